# cython: language_level=3
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, exp, floor, nextafter

cnp.import_array()

RESAMPLE_POINTS = 30
BACKEND = "cython"

cdef int NPTS = 30
cdef double TINY_ARC = 1e-9


cdef inline void _rodrigues(double kx, double ky, double kz, double q, double* R) noexcept nogil:
    cdef double s = sin(q), c = cos(q), v = 1.0 - c
    R[0] = c + kx * kx * v
    R[1] = kx * ky * v - kz * s
    R[2] = kx * kz * v + ky * s
    R[3] = ky * kx * v + kz * s
    R[4] = c + ky * ky * v
    R[5] = ky * kz * v - kx * s
    R[6] = kz * kx * v - ky * s
    R[7] = kz * ky * v + kx * s
    R[8] = c + kz * kz * v


cdef inline void _matmul3(const double* A, const double* B, double* C) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            C[3 * i + j] = A[3 * i] * B[j] + A[3 * i + 1] * B[3 + j] + A[3 * i + 2] * B[6 + j]


cdef void _fk_one(const double[:, ::1] axes, const double[:, ::1] links,
                  const double[::1] q, double* pos) noexcept nogil:
    # pos: (d+1)*3 frame positions
    cdef int d = axes.shape[0]
    cdef double R[9]
    cdef double Rj[9]
    cdef double T[9]
    cdef double p0 = 0.0, p1 = 0.0, p2 = 0.0
    cdef int i, j
    for j in range(9):
        R[j] = 0.0
    R[0] = 1.0
    R[4] = 1.0
    R[8] = 1.0
    pos[0] = 0.0
    pos[1] = 0.0
    pos[2] = 0.0
    for i in range(d):
        _rodrigues(axes[i, 0], axes[i, 1], axes[i, 2], q[i], Rj)
        _matmul3(R, Rj, T)
        for j in range(9):
            R[j] = T[j]
        p0 = p0 + (R[0] * links[i, 0] + R[1] * links[i, 1] + R[2] * links[i, 2])
        p1 = p1 + (R[3] * links[i, 0] + R[4] * links[i, 1] + R[5] * links[i, 2])
        p2 = p2 + (R[6] * links[i, 0] + R[7] * links[i, 1] + R[8] * links[i, 2])
        pos[3 * (i + 1)] = p0
        pos[3 * (i + 1) + 1] = p1
        pos[3 * (i + 1) + 2] = p2


def fk_markers(axes, links, markers, Q):
    cdef const double[:, ::1] ax = np.ascontiguousarray(axes, dtype=np.float64)
    cdef const double[:, ::1] ln = np.ascontiguousarray(links, dtype=np.float64)
    cdef const double[:, ::1] q = np.ascontiguousarray(Q, dtype=np.float64)
    cdef cnp.intp_t[::1] mk = np.ascontiguousarray(markers, dtype=np.intp)
    cdef Py_ssize_t B = q.shape[0], d = ax.shape[0], nm = mk.shape[0]
    cdef Py_ssize_t b, m, f
    out = np.empty((B, nm, 3))
    cdef double[:, :, ::1] o = out
    cdef double[::1] buf = np.empty(3 * (d + 1))
    with nogil:
        for b in range(B):
            _fk_one(ax, ln, q[b], &buf[0])
            for m in range(nm):
                f = mk[m]
                o[b, m, 0] = buf[3 * f]
                o[b, m, 1] = buf[3 * f + 1]
                o[b, m, 2] = buf[3 * f + 2]
    return out


cdef inline double _seg_dist(const double* a, const double* b, const double* c) noexcept nogil:
    cdef double ab0 = b[0] - a[0], ab1 = b[1] - a[1], ab2 = b[2] - a[2]
    cdef double denom = ab0 * ab0 + ab1 * ab1 + ab2 * ab2
    cdef double t = 0.0
    if denom > 0.0:
        t = ((c[0] - a[0]) * ab0 + (c[1] - a[1]) * ab1 + (c[2] - a[2]) * ab2) / denom
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    cdef double x = a[0] + t * ab0 - c[0]
    cdef double y = a[1] + t * ab1 - c[1]
    cdef double z = a[2] + t * ab2 - c[2]
    return sqrt(x * x + y * y + z * z)


def segment_point_distance(a, b, c):
    a, b, c = np.broadcast_arrays(np.asarray(a, dtype=np.float64),
                                  np.asarray(b, dtype=np.float64),
                                  np.asarray(c, dtype=np.float64))
    shape = a.shape[:-1]
    cdef const double[:, ::1] A = np.ascontiguousarray(a.reshape(-1, 3))
    cdef const double[:, ::1] Bv = np.ascontiguousarray(b.reshape(-1, 3))
    cdef const double[:, ::1] C = np.ascontiguousarray(c.reshape(-1, 3))
    cdef Py_ssize_t n = A.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = _seg_dist(&A[i, 0], &Bv[i, 0], &C[i, 0])
    return out.reshape(shape)


def capsules_hit_spheres(P, centers, radii, link_radius):
    cdef const double[:, :, ::1] p = np.ascontiguousarray(P, dtype=np.float64)
    cdef const double[:, ::1] cen = np.ascontiguousarray(np.reshape(centers, (-1, 3)), dtype=np.float64)
    cdef const double[::1] rad = np.ascontiguousarray(radii, dtype=np.float64)
    cdef double lr = link_radius
    cdef Py_ssize_t B = p.shape[0], nm = p.shape[1], S = rad.shape[0]
    cdef Py_ssize_t b, s, j
    out = np.zeros(B, dtype=bool)
    cdef cnp.npy_bool[::1] o = out
    if S == 0 or B == 0:
        return out
    with nogil:
        for b in range(B):
            for s in range(S):
                for j in range(nm - 1):
                    if _seg_dist(&p[b, j, 0], &p[b, j + 1, 0], &cen[s, 0]) <= rad[s] + lr:
                        o[b] = 1
                        break
                if o[b]:
                    break
    return out


cdef int _resample(const double* M, Py_ssize_t n, Py_ssize_t k, int count,
                   double* cum, double* out) noexcept nogil:
    # M: n*k*3 frames (last marker = hand); out: count*k*3
    cdef Py_ssize_t i, j, m, h = k - 1, idx
    cdef double dx, dy, dz, seg, total, s, t, u
    cdef Py_ssize_t stride = k * 3
    cum[0] = 0.0
    for i in range(n - 1):
        dx = M[(i + 1) * stride + 3 * h] - M[i * stride + 3 * h]
        dy = M[(i + 1) * stride + 3 * h + 1] - M[i * stride + 3 * h + 1]
        dz = M[(i + 1) * stride + 3 * h + 2] - M[i * stride + 3 * h + 2]
        cum[i + 1] = cum[i] + sqrt(dx * dx + dy * dy + dz * dz)
    total = cum[n - 1]
    idx = 0
    for j in range(count):
        if total < TINY_ARC:
            u = j * (n - 1) / <double>(count - 1)
            idx = <Py_ssize_t>floor(u)
            if idx > n - 2:
                idx = n - 2
            t = u - idx
        else:
            s = j * total / (count - 1)
            while idx < n - 2 and cum[idx + 1] < s:
                idx += 1
            seg = cum[idx + 1] - cum[idx]
            t = (s - cum[idx]) / seg if seg > 0.0 else 0.0
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        for m in range(stride):
            out[j * stride + m] = M[idx * stride + m] + t * (M[(idx + 1) * stride + m] - M[idx * stride + m])
    for m in range(stride):
        out[m] = M[m]
        out[(count - 1) * stride + m] = M[(n - 1) * stride + m]
    return 0


cdef int _directions(const double* R, int count, double* out) noexcept nogil:
    # R: count*3*3 -> out: count*6; returns -1 on a zero-length segment
    cdef int j, a
    cdef double d[3]
    cdef double nrm
    for j in range(count):
        for a in range(2):
            d[0] = R[j * 9 + 3 * (a + 1)] - R[j * 9 + 3 * a]
            d[1] = R[j * 9 + 3 * (a + 1) + 1] - R[j * 9 + 3 * a + 1]
            d[2] = R[j * 9 + 3 * (a + 1) + 2] - R[j * 9 + 3 * a + 2]
            nrm = sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            if nrm == 0.0:
                return -1
            out[j * 6 + 3 * a] = d[0] / nrm
            out[j * 6 + 3 * a + 1] = d[1] / nrm
            out[j * 6 + 3 * a + 2] = d[2] / nrm
    return 0


def resample_markers(M, count=RESAMPLE_POINTS):
    cdef const double[:, :, ::1] m = np.ascontiguousarray(M, dtype=np.float64)
    cdef Py_ssize_t n = m.shape[0], k = m.shape[1]
    if n < 2:
        raise ValueError("need at least two frames to resample a motion")
    out = np.empty((count, k, 3))
    cdef double[:, :, ::1] o = out
    cdef double[::1] cum = np.empty(n)
    _resample(&m[0, 0, 0], n, k, count, &cum[0], &o[0, 0, 0])
    return out


def directions(R):
    cdef const double[:, :, ::1] r = np.ascontiguousarray(R, dtype=np.float64)
    cdef int count = r.shape[0]
    out = np.empty((count, 6))
    cdef double[:, ::1] o = out
    if _directions(&r[0, 0, 0], count, &o[0, 0]) != 0:
        raise ValueError("zero-length arm segment: cannot form a direction")
    return out


def encode_markers(M):
    cdef const double[:, :, ::1] m = np.ascontiguousarray(M, dtype=np.float64)
    cdef Py_ssize_t n = m.shape[0]
    if n < 2:
        raise ValueError("need at least two frames to resample a motion")
    if m.shape[1] != 3:
        raise ValueError("expected shoulder, elbow and hand markers")
    out = np.empty((NPTS, 6))
    cdef double[:, ::1] o = out
    cdef double[::1] cum = np.empty(n)
    cdef double[::1] res = np.empty(NPTS * 9)
    _resample(&m[0, 0, 0], n, 3, NPTS, &cum[0], &res[0])
    if _directions(&res[0], NPTS, &o[0, 0]) != 0:
        raise ValueError("zero-length arm segment: cannot form a direction")
    return out


def encode_paths(markers_all, parent, node_ids, extra=None):
    cdef const double[:, :, ::1] ma = np.ascontiguousarray(markers_all, dtype=np.float64)
    cdef const cnp.intp_t[::1] par = np.ascontiguousarray(parent, dtype=np.intp)
    cdef const cnp.intp_t[::1] ids = np.ascontiguousarray(node_ids, dtype=np.intp)
    cdef Py_ssize_t B = ids.shape[0]
    cdef bint has_extra = extra is not None
    cdef const double[:, :, ::1] ex
    if has_extra:
        ex = np.ascontiguousarray(extra, dtype=np.float64)
    out = np.empty((B, NPTS, 6))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t b, i, depth, n, j, m
    cdef Py_ssize_t cap = ma.shape[0] + 1
    cdef double[:, :, ::1] path = np.empty((cap, 3, 3))
    cdef cnp.intp_t[::1] stack = np.empty(cap, dtype=np.intp)
    cdef double[::1] cum = np.empty(cap)
    cdef double[::1] res = np.empty(NPTS * 9)
    cdef int bad = 0
    with nogil:
        for b in range(B):
            depth = 0
            i = ids[b]
            while i >= 0:
                stack[depth] = i
                depth += 1
                i = par[i]
            n = 0
            for j in range(depth - 1, -1, -1):
                for m in range(9):
                    path[n, m // 3, m % 3] = ma[stack[j], m // 3, m % 3]
                n += 1
            if has_extra:
                for m in range(9):
                    path[n, m // 3, m % 3] = ex[b, m // 3, m % 3]
                n += 1
            if n < 2:
                bad = 1
                break
            _resample(&path[0, 0, 0], n, 3, NPTS, &cum[0], &res[0])
            if _directions(&res[0], NPTS, &o[b, 0, 0]) != 0:
                bad = 2
                break
    if bad == 1:
        raise ValueError("need at least two frames to resample a motion")
    if bad == 2:
        raise ValueError("zero-length arm segment: cannot form a direction")
    return out


cdef double _sigmoid(double z) noexcept nogil:
    cdef double e
    if z >= 0.0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


def pack_discriminator(weights, biases, strides, dense_w, dense_b):
    """Kernel-ready copies of the parameters; kernels are transposed to (C_in, K, C_out)."""
    if len(weights) != 3:
        raise ValueError("compiled forward pass expects three convolution layers")
    Wt = tuple(np.ascontiguousarray(np.transpose(w, (1, 2, 0)), dtype=np.float64) for w in weights)
    bs = tuple(np.ascontiguousarray(bb, dtype=np.float64) for bb in biases)
    return (Wt, bs, tuple(int(v) for v in strides), np.ascontiguousarray(dense_w, dtype=np.float64),
            float(np.asarray(dense_b).reshape(-1)[0]))


def disc_forward(X, weights, biases, strides, dense_w, dense_b):
    return disc_forward_packed(X, pack_discriminator(weights, biases, strides, dense_w, dense_b))


def disc_forward_packed(X, packed):
    cdef const double[:, :, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t B = x.shape[0], L0 = x.shape[1], C0 = x.shape[2]
    Wt, bs, st, dw, dbias = packed
    cdef const double[:, :, ::1] W1 = Wt[0]
    cdef const double[:, :, ::1] W2 = Wt[1]
    cdef const double[:, :, ::1] W3 = Wt[2]
    cdef const double[::1] b1 = bs[0]
    cdef const double[::1] b2 = bs[1]
    cdef const double[::1] b3 = bs[2]
    cdef const double[:, ::1] Wd = dw
    cdef double bd = dbias
    cdef int s1 = st[0], s2 = st[1], s3 = st[2]
    cdef Py_ssize_t L1 = (L0 - W1.shape[1]) // s1 + 1
    cdef Py_ssize_t L2 = (L1 - W2.shape[1]) // s2 + 1
    cdef Py_ssize_t L3 = (L2 - W3.shape[1]) // s3 + 1
    if W1.shape[0] != C0 or W2.shape[0] != W1.shape[2] or W3.shape[0] != W2.shape[2]:
        raise ValueError("layer channel mismatch")
    if Wd.shape[1] != W3.shape[2] * L3:
        raise ValueError("dense layer size mismatch")
    cdef double[:, ::1] a1 = np.empty((L1, W1.shape[2]))
    cdef double[:, ::1] a2 = np.empty((L2, W2.shape[2]))
    cdef double[:, ::1] a3 = np.empty((L3, W3.shape[2]))
    out = np.empty(B)
    cdef double[::1] o = out
    cdef Py_ssize_t b
    cdef double z
    cdef double lo = nextafter(0.0, 1.0), hi = nextafter(1.0, 0.0)
    with nogil:
        for b in range(B):
            _conv(x[b], W1, b1, s1, a1)
            _conv(a1, W2, b2, s2, a2)
            _conv(a2, W3, b3, s3, a3)
            z = _dense(a3, Wd, bd)
            z = _sigmoid(z)
            if z < lo:
                z = lo
            elif z > hi:
                z = hi
            o[b] = z
    return out


cdef void _conv(const double[:, ::1] x, const double[:, :, ::1] Wt, const double[::1] bias,
                int stride, double[:, ::1] out) noexcept nogil:
    # x: (L_in, C_in), Wt: (C_in, K, C_out), out: (L_out, C_out); ReLU applied.
    # Each output still sums its terms in (c, k) order, then adds the bias.
    cdef Py_ssize_t L_out = out.shape[0], C_in = Wt.shape[0], K = Wt.shape[1], C_out = Wt.shape[2]
    cdef Py_ssize_t j, o, c, k
    cdef double xv
    cdef double* row
    cdef const double* w
    for j in range(L_out):
        row = &out[j, 0]
        for o in range(C_out):
            row[o] = 0.0
        for c in range(C_in):
            for k in range(K):
                xv = x[j * stride + k, c]
                w = &Wt[c, k, 0]
                for o in range(C_out):
                    row[o] = row[o] + w[o] * xv
        for o in range(C_out):
            xv = row[o] + bias[o]
            row[o] = xv if xv > 0.0 else 0.0


cdef double _dense(const double[:, ::1] a, const double[:, ::1] Wd, double bd) noexcept nogil:
    # channel-major flatten: index o * L + j
    cdef Py_ssize_t L = a.shape[0], C = a.shape[1], j, o
    cdef double acc = 0.0
    for o in range(C):
        for j in range(L):
            acc = acc + Wd[0, o * L + j] * a[j, o]
    return acc + bd
