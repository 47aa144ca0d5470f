"""Convolutional motion discriminator trained with backpropagation and Adam.

Input is a (30, 6) representation treated as a 6-channel sequence of
length 30. Three valid-padded 1-D convolutions with ReLU feed one dense
unit with a logistic output. Everything is float64.
"""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import _kernels_py, kernels
from .motion_repr import GENERATED, REAL, REPR_COLS, REPR_ROWS

log = logging.getLogger(__name__)

MAGIC = b"IDSC"
VERSION = 1
KIND_CONV = 0
KIND_DENSE = 1

_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class Architecture:
    channels: tuple = (16, 32, 64)
    kernels: tuple = (5, 5, 3)
    strides: tuple = (2, 2, 1)
    input_length: int = REPR_ROWS
    input_channels: int = REPR_COLS

    def lengths(self):
        out = []
        L = self.input_length
        for k, s in zip(self.kernels, self.strides):
            L = (L - k) // s + 1
            if L < 1:
                raise ValueError("architecture collapses the sequence to nothing")
            out.append(L)
        return out

    def shapes(self):
        """Parameter shapes in storage order: (W1, b1, W2, b2, W3, b3, Wd, bd)."""
        shapes = []
        c_in = self.input_channels
        for c_out, k in zip(self.channels, self.kernels):
            shapes += [(c_out, c_in, k), (c_out,)]
            c_in = c_out
        flat = self.channels[-1] * self.lengths()[-1]
        shapes += [(1, flat), (1,)]
        return shapes


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    loss_mode: str = "bce"
    clamp: float = 1e-7
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_mode not in ("bce", "paper_eq1"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")

    @classmethod
    def from_dict(cls, doc):
        return cls(**(doc or {}))

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class Discriminator:
    """Parameter container with scoring, forward/backward and (de)serialisation."""

    def __init__(self, params, arch=None):
        self.arch = arch or Architecture()
        params = [np.array(p, dtype=np.float64) for p in params]
        expected = self.arch.shapes()
        if [p.shape for p in params] != expected:
            raise ShapeMismatchError(
                f"parameter shapes {[p.shape for p in params]} do not match {expected}"
            )
        self.params = params

    @classmethod
    def initialize(cls, rng_seed, arch=None):
        """He-normal conv kernels, variance 1/fan_in dense weights, zero biases."""
        arch = arch or Architecture()
        rng = np.random.default_rng(rng_seed)
        params = []
        for shape in arch.shapes():
            if len(shape) == 1:
                params.append(np.zeros(shape))
            elif len(shape) == 3:
                fan_in = shape[1] * shape[2]
                params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
            else:
                params.append(rng.normal(0.0, np.sqrt(1.0 / shape[1]), size=shape))
        return cls(params, arch)

    @classmethod
    def zeros(cls, arch=None):
        arch = arch or Architecture()
        return cls([np.zeros(s) for s in arch.shapes()], arch)

    def copy(self):
        return Discriminator([p.copy() for p in self.params], self.arch)

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, theta):
        i = 0
        for p in self.params:
            p[...] = theta[i:i + p.size].reshape(p.shape)
            i += p.size

    # scoring --------------------------------------------------------------

    def score_batch(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1:] != (self.arch.input_length, self.arch.input_channels):
            raise ValueError(
                f"expected (n, {self.arch.input_length}, {self.arch.input_channels}) input, got {X.shape}"
            )
        if len(X) == 0:
            return np.zeros(0)
        n = len(self.arch.channels)
        conv_w = self.params[0:2 * n:2]
        conv_b = self.params[1:2 * n:2]
        forward = kernels.disc_forward if n == 3 else _kernels_py.disc_forward
        return forward(X, conv_w, conv_b, self.arch.strides, self.params[-2], self.params[-1])

    def scorer(self):
        """Batch scoring function over a snapshot of the current parameters."""
        n = len(self.arch.channels)
        if n != 3:
            return self.copy().score_batch
        packed = kernels.pack_discriminator(self.params[0:6:2], self.params[1:6:2], self.arch.strides,
                                            self.params[-2], self.params[-1])
        return lambda X: kernels.disc_forward_packed(np.asarray(X, dtype=np.float64), packed)

    def score(self, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (self.arch.input_length, self.arch.input_channels):
            raise ValueError(f"expected a ({self.arch.input_length}, {self.arch.input_channels}) input")
        return float(self.score_batch(m[None])[0])

    __call__ = score

    # training path ----------------------------------------------------------

    def _conv_layers(self):
        n = len(self.arch.channels)
        return [(self.params[2 * i], self.params[2 * i + 1], self.arch.strides[i]) for i in range(n)]

    def forward(self, X):
        """Training forward pass; returns outputs and the cache needed by :meth:`backward`."""
        A = np.asarray(X, dtype=np.float64)
        cache = []
        for W, b, s in self._conv_layers():
            c_out, c_in, k = W.shape
            L_out = (A.shape[1] - k) // s + 1
            idx = (np.arange(L_out) * s)[:, None] + np.arange(k)[None, :]
            P = A[:, idx, :].transpose(0, 1, 3, 2).reshape(A.shape[0], L_out, c_in * k)
            Z = P @ W.reshape(c_out, c_in * k).T + b
            cache.append((A.shape, idx, P, Z))
            A = np.maximum(Z, 0.0)
        F = A.transpose(0, 2, 1).reshape(A.shape[0], -1)
        Wd, bd = self.params[-2], self.params[-1]
        z = F @ Wd[0] + bd[0]
        D = np.clip(1.0 / (1.0 + np.exp(-np.clip(z, -700.0, 700.0))), _SIG_LO, _SIG_HI)
        return D, (cache, A.shape, F, D)

    def backward(self, dD, state):
        """Gradients of a scalar loss w.r.t. every parameter, given dloss/dD per sample."""
        cache, a_shape, F, D = state
        grads = [None] * len(self.params)
        dz = dD * D * (1.0 - D)
        Wd = self.params[-2]
        grads[-2] = (dz @ F)[None, :]
        grads[-1] = np.array([dz.sum()])
        dF = dz[:, None] * Wd[0][None, :]
        dA = dF.reshape(a_shape[0], a_shape[2], a_shape[1]).transpose(0, 2, 1)
        for li in range(len(cache) - 1, -1, -1):
            W, b, s = self._conv_layers()[li]
            in_shape, idx, P, Z = cache[li]
            c_out, c_in, k = W.shape
            dZ = dA * (Z > 0.0)
            grads[2 * li] = np.einsum("blo,blf->of", dZ, P).reshape(W.shape)
            grads[2 * li + 1] = dZ.sum(axis=(0, 1))
            if li > 0:
                dP = (dZ @ W.reshape(c_out, c_in * k)).reshape(dZ.shape[0], dZ.shape[1], c_in, k)
                dX = np.zeros(in_shape)
                for kk in range(k):
                    dX[:, idx[:, kk], :] += dP[:, :, :, kk]
                dA = dX
        return grads

    # persistence ------------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(to_bytes(self))

    @classmethod
    def load(cls, path, arch=None):
        with open(path, "rb") as fh:
            return from_bytes(fh.read(), arch)


def to_bytes(d):
    arch = d.arch
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    body += struct.pack("<II", arch.input_length, arch.input_channels)
    n_layers = len(arch.channels) + 1
    body += struct.pack("<I", n_layers)
    for i in range(len(arch.channels)):
        W = d.params[2 * i]
        body += struct.pack("<IIIIII", KIND_CONV, arch.strides[i], 3, *W.shape)
    body += struct.pack("<IIIII", KIND_DENSE, 0, 2, *d.params[-2].shape)
    for p in d.params:
        body += np.ascontiguousarray(p, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def from_bytes(blob, arch=None):
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("not an IDSC checkpoint")
    stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError("checkpoint checksum mismatch (truncated or corrupted file)")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    length, channels = struct.unpack_from("<II", blob, off)
    off += 8
    (n_layers,) = struct.unpack_from("<I", blob, off)
    off += 4
    conv_shapes, strides = [], []
    dense_shape = None
    for _ in range(n_layers):
        kind, stride, ndim = struct.unpack_from("<III", blob, off)
        off += 12
        dims = struct.unpack_from("<" + "I" * ndim, blob, off)
        off += 4 * ndim
        if kind == KIND_CONV:
            conv_shapes.append(tuple(dims))
            strides.append(stride)
        else:
            dense_shape = tuple(dims)
    stored_arch = Architecture(
        channels=tuple(s[0] for s in conv_shapes),
        kernels=tuple(s[2] for s in conv_shapes),
        strides=tuple(strides),
        input_length=length,
        input_channels=channels,
    )
    if arch is not None and arch != stored_arch:
        raise ShapeMismatchError(f"checkpoint architecture {stored_arch} does not match {arch}")
    shapes = stored_arch.shapes()
    if dense_shape != shapes[-2]:
        raise ShapeMismatchError(f"dense layer shape {dense_shape} inconsistent with conv stack")
    params = []
    for shape in shapes:
        n = int(np.prod(shape))
        if off + 8 * n > len(blob) - 4:
            raise CheckpointError("checkpoint parameter block is short")
        params.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape))
        off += 8 * n
    if off != len(blob) - 4:
        raise CheckpointError("trailing bytes in checkpoint")
    return Discriminator(params, stored_arch)


# losses -----------------------------------------------------------------------


def _loss_and_grad_wrt_D(D, y, mode, clamp):
    Dc = np.clip(D, clamp, 1.0 - clamp)
    inside = (D > clamp) & (D < 1.0 - clamp)
    real = y == REAL
    gen = y == GENERATED
    if mode == "bce":
        n = len(D)
        loss = -(np.log(Dc[real]).sum() + np.log(1.0 - Dc[gen]).sum()) / n
        g = np.where(real, -1.0 / Dc, 1.0 / (1.0 - Dc)) / n
    elif mode == "paper_eq1":
        # a mini-batch may hold a single label; its empty mean is dropped
        n_r, n_g = int(real.sum()), int(gen.sum())
        loss = (np.log(Dc[gen]).mean() if n_g else 0.0) - (np.log(Dc[real]).mean() if n_r else 0.0)
        g = np.where(real, -1.0 / (max(n_r, 1) * Dc), 1.0 / (max(n_g, 1) * Dc))
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return float(loss), g * inside


def loss_from_scores(D, y, mode="bce", clamp=1e-7):
    """Loss from discriminator outputs ``D`` and labels ``y`` (1 real, 0 generated)."""
    D = np.asarray(D, dtype=np.float64)
    y = np.asarray(y)
    if not (np.any(y == REAL) and np.any(y == GENERATED)):
        raise ValueError("loss needs both real and generated entries")
    return _loss_and_grad_wrt_D(D, y, mode, clamp)[0]


def loss(d, dataset, mode="bce", clamp=1e-7):
    dataset.require_both_labels()
    D, _ = d.forward(dataset.X)
    return loss_from_scores(D, dataset.y, mode, clamp)


def loss_and_gradients(d, X, y, mode="bce", clamp=1e-7):
    D, state = d.forward(X)
    value, dD = _loss_and_grad_wrt_D(D, np.asarray(y), mode, clamp)
    return value, d.backward(dD, state)


# training -----------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(d, dataset, config=None):
    """Train a copy of ``d``; returns (trained discriminator, per-epoch loss trace).

    Each epoch draws a seeded permutation and takes one Adam step per
    mini-batch. The trace records the full-dataset loss after every epoch.
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    dataset.require_both_labels()
    model = d.copy()
    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.rng_seed)
    n = len(dataset)
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = loss_and_gradients(model, dataset.X[idx], dataset.y[idx], config.loss_mode, config.clamp)
            opt.step(grads)
        trace.append(loss(model, dataset, config.loss_mode, config.clamp))
        log.debug("epoch %d loss %.6f", epoch + 1, trace[-1])
    return model, trace


def accuracy(d, dataset):
    if len(dataset) == 0:
        return float("nan")
    pred = d.score_batch(dataset.X) >= 0.5
    return float(np.mean(pred == (dataset.y == REAL)))


def gradient_check(d, dataset, mode="bce", h=1e-5, clamp=1e-7):
    """Max relative error between backprop and central differences over all parameters.

    Relative error per parameter is |g_a - g_n| / max(1, |g_a| + |g_n|).
    The numeric side goes through the scoring path rather than the
    training forward pass, so the two gradients share no code.
    """
    dataset.require_both_labels()
    X, y = dataset.X, dataset.y
    _, grads = loss_and_gradients(d, X, y, mode, clamp)
    analytic = np.concatenate([g.ravel() for g in grads])
    probe = d.copy()
    theta = probe.flat()
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        probe.set_flat(theta)
        up = loss_from_scores(probe.score_batch(X), y, mode, clamp)
        theta[i] = old - h
        probe.set_flat(theta)
        down = loss_from_scores(probe.score_batch(X), y, mode, clamp)
        theta[i] = old
        numeric[i] = (up - down) / (2.0 * h)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(rel.max())
