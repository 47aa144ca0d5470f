import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from advplan.adversarial import plan_queries, read_robot_motion
from advplan.cli import main
from advplan.collision import Scene
from advplan.experiments import (
    ConfigError,
    IMITATION_BASE,
    chain_for,
    goal_state_sets,
    load_config,
    prepare_demonstrations,
    sample_starts,
    scene_for,
    sphere_config,
    sphere_queries,
    write_demonstration_set,
    _merge,
)
from advplan.motion_repr import check_repr, encode, mean_hand_direction
from advplan.planner import LengthObjective, PlannerConfig

TINY = {"starts": {"count": 2}, "goal_line": {"count": 2}, "budget": 1500,
        "loop": {"iterations": 1, "train": {"epochs": 2}}}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.json", TINY)
    out = root / "run"
    assert main(["gen-targets", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["loop", "--config", str(cfg), "--out", str(out)]) == 0
    return root, cfg, out


def test_presets_and_overrides():
    desk = sphere_config("desk")
    assert desk["starts"]["count"] == 5 and desk["goal_line"]["count"] == 11
    assert desk["loop"]["iterations"] == 3 and desk["budget"] == 2000
    full = sphere_config("paper")
    assert full["starts"]["count"] == 10 and full["goal_line"]["count"] == 21
    with pytest.raises(ConfigError):
        sphere_config("huge")


@pytest.mark.parametrize("doc", [
    {"loop": {"iterations": 0}},
    {"goal_line": {"count": 0}},
    {"chain": "missing.json"},
    {"experiment": "dance"},
    {"planner": {"rewire_mode": "lazy"}},
])
def test_invalid_configs(tmp_path, doc):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path / "c.json", doc))


def test_seed_and_out_overrides(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.json", {"seed": 1}), preset="desk", seed=7, out=tmp_path / "x")
    assert cfg["seed"] == 7 and cfg["out"] == str(tmp_path / "x")


def test_starts_are_seeded_and_collision_free():
    cfg = sphere_config("desk")
    chain, scene = chain_for(cfg), scene_for(cfg)
    a = sample_starts(chain, cfg, scene)
    b = sample_starts(chain, cfg, scene)
    assert len(a) == 5 and all(np.array_equal(x, y) for x, y in zip(a, b))
    from advplan.collision import state_in_collision

    assert not any(state_in_collision(chain, q, scene) for q in a)


def test_colliding_start_is_named():
    cfg = sphere_config("desk", {"starts": {"states": [[0.0] * 7]},
                                 "scene": {"spheres": [{"center": [0, 0, 0.3], "radius": 0.05}]}})
    with pytest.raises(ConfigError, match="start 0"):
        sample_starts(chain_for(cfg), cfg, scene_for(cfg))


def test_unreachable_goal_is_named():
    cfg = sphere_config("desk", {"goal_line": {"a": [1.0, 0, 0], "b": [1.2, 0, 0], "count": 2}})
    with pytest.raises(ConfigError, match="goal 0"):
        goal_state_sets(chain_for(cfg), cfg, Scene())


def test_empty_scene_targets_equal_naive_plans():
    cfg = sphere_config("desk", {"starts": {"count": 1}, "goal_line": {"count": 1}, "scene": {"spheres": []}})
    chain, scene = chain_for(cfg), scene_for(cfg)
    qs = sphere_queries(chain, cfg, scene)
    assert len(qs) == 1
    targets = plan_queries(chain, qs, LengthObjective(), scene, cfg["budget"], PlannerConfig(), cfg["seed"])
    naive = plan_queries(chain, qs, LengthObjective(), Scene(), cfg["budget"], PlannerConfig(), cfg["seed"])
    assert targets[0].states.tobytes() == naive[0].states.tobytes()


def test_demonstration_fixture_preprocesses(tmp_path):
    cfg = _merge(IMITATION_BASE, {"demos": {"train": 3, "test": 2}})
    manifest = write_demonstration_set(tmp_path, cfg)
    chain = chain_for(cfg)
    demos = prepare_demonstrations(manifest, chain)
    assert len(demos["train"]) >= 3 and len(demos["test"]) >= 2
    for d in demos["train"]:
        mean = mean_hand_direction(d.states)
        np.testing.assert_allclose(mean / np.linalg.norm(mean), [0, 0, 1], atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(d.states[:, 1] - d.states[:, 0], axis=1), 0.30, atol=1e-12)
        check_repr(encode(chain, d))


def test_gen_targets_and_loop_layout(run_dir):
    _, _, out = run_dir
    index = json.loads((out / "targets" / "index.json").read_text())
    assert len(index["targets"]) == 4
    assert sorted(p.name for p in out.iterdir()) == ["iter_0", "iter_1", "run.json", "targets"]
    for k in (0, 1):
        assert (out / f"iter_{k}" / "model.idsc").exists()
        report = json.loads((out / f"iter_{k}" / "report.json").read_text())
        assert 0.0 <= report["metrics"]["success_rate"] <= 1.0
    run = json.loads((out / "run.json").read_text())
    assert "out" not in run["config"] and run["config"]["chain"]["joints"]


def test_targets_avoid_the_sphere(run_dir):
    from advplan.collision import motion_in_collision

    _, cfg, out = run_dir
    config = load_config(cfg)
    chain, scene = chain_for(config), scene_for(config)
    for path in (out / "targets").glob("q*.csv"):
        motion, _ = read_robot_motion(path)
        assert not motion_in_collision(chain, motion.states, scene)


def test_refuses_to_overwrite_without_force(run_dir):
    _, cfg, out = run_dir
    assert main(["loop", "--config", str(cfg), "--out", str(out)]) == 1
    assert main(["gen-targets", "--config", str(cfg), "--out", str(out)]) == 1


def test_force_rerun_is_byte_identical(run_dir, tmp_path):
    _, cfg, out = run_dir
    before = (out / "iter_1" / "model.idsc").read_bytes()
    assert main(["loop", "--config", str(cfg), "--out", str(out), "--force"]) == 0
    assert (out / "iter_1" / "model.idsc").read_bytes() == before


def test_run_json_reproduces_the_run(run_dir, tmp_path):
    _, _, out = run_dir
    other = tmp_path / "again"
    run_json = str(out / "run.json")
    assert main(["gen-targets", "--config", run_json, "--out", str(other)]) == 0
    assert main(["loop", "--config", run_json, "--out", str(other), "--jobs", "2"]) == 0
    for path in sorted(p for p in out.rglob("*") if p.is_file() and "plots" not in p.parts):
        twin = other / path.relative_to(out)
        assert twin.read_bytes() == path.read_bytes(), path


def test_eval_prints_per_iteration_metrics(run_dir, capsys):
    _, _, out = run_dir
    assert main(["eval", str(out)]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["iteration"] for r in rows] == [0, 1]
    for k, row in enumerate(rows):
        stored = json.loads((out / f"iter_{k}" / "report.json").read_text())
        assert row["success_rate"] == stored["metrics"]["success_rate"]


def test_export_plot_is_deterministic(run_dir, tmp_path):
    _, _, out = run_dir
    for kind in ("endpoints", "paths"):
        args = ["export-plot", str(out), "--iteration", "0", "--kind", kind, "--plot-dir", str(tmp_path)]
        assert main(args) == 0
        svg = (tmp_path / f"iter_0_{kind}.svg").read_bytes()
        assert main(args) == 1
        assert main(args + ["--force"]) == 0
        assert (tmp_path / f"iter_0_{kind}.svg").read_bytes() == svg
        root = ET.fromstring(svg)
        assert root.tag.endswith("svg")
        with (tmp_path / f"iter_0_{kind}.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert rows and set(rows[0]) == {"motion", "point", "x", "y", "collision"}
        hits = {r["motion"] for r in rows if r["collision"] == "1"}
        assert svg.count(b'class="arm collision"') == len(hits)


def test_export_plot_with_no_motions(run_dir, tmp_path):
    import shutil

    _, _, out = run_dir
    bare = tmp_path / "bare"
    shutil.copytree(out, bare)
    for p in (bare / "iter_0" / "motions").iterdir():
        p.unlink()
    assert main(["export-plot", str(bare), "--plot-dir", str(tmp_path)]) == 0
    svg = (tmp_path / "iter_0_endpoints.svg").read_text()
    assert 'class="sphere"' in svg and "polyline" not in svg


def test_export_plot_missing_iteration(run_dir):
    _, _, out = run_dir
    assert main(["export-plot", str(out), "--iteration", "9"]) == 1


def test_loop_without_targets_is_a_usage_error(tmp_path):
    cfg = write_config(tmp_path / "c.json", TINY)
    assert main(["loop", "--config", str(cfg), "--out", str(tmp_path / "none")]) == 1


def test_zero_iterations_rejected(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"loop": {"iterations": 0}})
    assert main(["loop", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_usage_errors_exit_one(capsys):
    assert pytest.raises(SystemExit, main, ["bogus"]).value.code == 1
    assert pytest.raises(SystemExit, main, ["ik-probe"]).value.code == 1


def test_grad_check_command(capsys):
    assert main(["grad-check", "--seeds", "0", "--samples", "1"]) == 0
    row = json.loads(capsys.readouterr().out)
    assert row["max_relative_error"] < 1e-5


def test_ik_probe(capsys):
    assert main(["ik-probe", "--target", "0.3", "0.1", "0.1", "--swivel", "0.5"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["solutions"] and all(s["hand_error"] < 1e-6 for s in doc["solutions"])
    assert main(["ik-probe", "--target", "1.0", "0", "0"]) == 2


def test_log_lines_carry_iso_timestamps(tmp_path, capfd):
    import re

    main(["loop", "--config", str(write_config(tmp_path / "c.json", TINY)), "--out", str(tmp_path / "none")])
    err = capfd.readouterr().err
    assert re.search(r"^\d{4}-\d\d-\d\dT\d\d:\d\d:\d\d[+-]\d{4} ERROR ", err, re.M)


def test_imitation_gen_targets_writes_manifest(tmp_path):
    cfg = write_config(tmp_path / "im.json", {"experiment": "imitation", "demos": {"train": 2, "test": 1}})
    assert main(["gen-targets", "--config", str(cfg), "--out", str(tmp_path / "im")]) == 0
    manifest = json.loads((tmp_path / "im" / "demos" / "manifest.json").read_text())
    assert [e["split"] for e in manifest] == ["train", "train", "test"]
    header = (tmp_path / "im" / "demos" / manifest[0]["path"]).read_text().splitlines()[0]
    assert header == "t,sx,sy,sz,ex,ey,ez,hx,hy,hz"
