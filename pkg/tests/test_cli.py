import filecmp

import numpy as np
import pytest
import yaml

from hotform import rom
from hotform.cli import main
from hotform.container import read_csv
from hotform.experiment import ExperimentConfig, Scenario, load_artifacts, stage_estimate, stage_reduce

SMALL = {
    "mesh": {"edge_length": 0.03, "n_steps": 510},
    "sweep": {"t_aust_avg": [1273.0, 1373.0], "v_punch": [80.0], "excitations": [[[9.0, 11.0, 1000.0]]]},
    "rom": {"r": 10, "rmse_dimensions": [5, 10]},
}


def write_config(path, **overrides):
    raw = {**SMALL, **overrides}
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(root / "small.yaml")
    out = root / "run"
    for cmd in ("simulate", "reduce", "estimate"):
        assert main([cmd, "--config", str(cfg_path), "--out", str(out)]) == 0
    return root, cfg_path, out


def test_outputs_written(small):
    _, _, out = small
    for name in ("plant_state.hfc", "parameters.hfc", "sensors_clean.csv", "sensors_noisy.csv", "basis.hfc",
                 "schedule.hfc", "energy.csv", "rom_rmse.csv", "estimate_with_d.csv", "estimate_without_d.csv",
                 "rmse_comparison.csv", "disturbance.csv", "eval_points.csv", "properties.csv"):
        assert (out / name).is_file(), name
    header, _ = read_csv(out / "sensors_noisy.csv")
    assert header == ["t [s]", "y1 [K]", "y2 [K]", "y3 [K]"]


def test_same_seed_same_bytes(small):
    root, cfg_path, out = small
    again = root / "again"
    for cmd in ("simulate", "estimate"):
        assert main([cmd, "--config", str(cfg_path), "--out", str(again)]) == 0
    for name in ("sensors_noisy.csv", "estimate_with_d.csv", "properties.csv"):
        assert filecmp.cmp(out / name, again / name, shallow=False), name


def test_seed_changes_noise(small):
    root, cfg_path, out = small
    other = root / "seed7"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(other), "--seed", "7"]) == 0
    assert not filecmp.cmp(out / "sensors_noisy.csv", other / "sensors_noisy.csv", shallow=False)


def test_sensor_noise_level(tmp_path):
    cfg0 = write_config(tmp_path / "zero.yaml", sensors={"noise_std": 0.0})
    assert main(["simulate", "--config", str(cfg0), "--out", str(tmp_path / "zero")]) == 0
    _, clean = read_csv(tmp_path / "zero" / "sensors_clean.csv")
    _, noisy = read_csv(tmp_path / "zero" / "sensors_noisy.csv")
    np.testing.assert_array_equal(noisy, clean)

    cfg10 = write_config(tmp_path / "ten.yaml", sensors={"noise_std": 10.0})
    assert main(["simulate", "--config", str(cfg10), "--out", str(tmp_path / "ten")]) == 0
    _, clean = read_csv(tmp_path / "ten" / "sensors_clean.csv")
    _, noisy = read_csv(tmp_path / "ten" / "sensors_noisy.csv")
    resid = (noisy - clean)[:, 1:].ravel()
    assert resid.size >= 1000
    assert abs(resid.std() - 10.0) <= 0.5


def test_external_plant_matches_internal(small, tmp_path):
    root, cfg_path, out = small
    ext = tmp_path / "ext"
    for name in ("basis.hfc", "schedule.hfc"):
        (ext / name).parent.mkdir(exist_ok=True)
        (ext / name).write_bytes((out / name).read_bytes())
    argv = ["estimate", "--config", str(cfg_path), "--out", str(ext), "--plant", f"external:{out / 'plant_state.hfc'}"]
    assert main(argv) == 0
    for name in ("estimate_with_d.csv", "estimate_without_d.csv", "properties.csv"):
        assert filecmp.cmp(out / name, ext / name, shallow=False), name


def test_without_disturbance_estimation(small, tmp_path):
    _, cfg_path, out = small
    dst = tmp_path / "nod"
    dst.mkdir()
    for name in ("basis.hfc", "schedule.hfc"):
        (dst / name).write_bytes((out / name).read_bytes())
    assert main(["estimate", "--config", str(cfg_path), "--out", str(dst), "--no-disturbance-estimation"]) == 0
    assert (dst / "estimate_without_d.csv").exists()
    assert not (dst / "estimate_with_d.csv").exists()


def test_reloaded_artifacts_match_memory(small, tmp_path):
    _, cfg_path, _ = small
    cfg = ExperimentConfig.load(cfg_path)
    scen = Scenario.build(cfg)
    red = stage_reduce(cfg, scen, tmp_path, rank_check=False)
    basis, schedule = load_artifacts(tmp_path)
    np.testing.assert_array_equal(basis.phi, red.basis.phi)
    for name in ("M", "K", "b", "E", "C", "h"):
        np.testing.assert_array_equal(getattr(schedule, name), getattr(red.schedule, name))
    a = stage_estimate(cfg, scen, red.basis, red.schedule)
    b = stage_estimate(cfg, scen, basis, schedule, plant=a.plant)
    np.testing.assert_array_equal(a.with_d.x, b.with_d.x)
    np.testing.assert_array_equal(a.without_d.q, b.without_d.q)


def test_invalid_config_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("unknown_section: {a: 1}\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "unknown_section" in capsys.readouterr().err
    cfg = write_config(tmp_path / "neg.yaml", noise={"q_w": -1.0})
    assert main(["estimate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_missing_external_plant_exits_one(small, tmp_path):
    _, cfg_path, _ = small
    assert main(["estimate", "--config", str(cfg_path), "--out", str(tmp_path),
                 "--plant", f"external:{tmp_path / 'missing.hfc'}"]) == 1
    assert main(["estimate", "--config", str(cfg_path), "--out", str(tmp_path), "--plant", "nonsense"]) == 1


def test_singular_schedule_exits_two(small, tmp_path):
    _, cfg_path, out = small
    (tmp_path / "basis.hfc").write_bytes((out / "basis.hfc").read_bytes())
    sched = rom.load_schedule(out / "schedule.hfc")
    sched.M[3] = 0.0
    sched.K[3] = 0.0
    rom.save_schedule(tmp_path / "schedule.hfc", sched)
    assert main(["estimate", "--config", str(cfg_path), "--out", str(tmp_path)]) == 2


def test_failed_evaluation_exits_one(monkeypatch, tmp_path):
    from hotform import evaluation

    monkeypatch.setattr(evaluation, "evaluate",
                        lambda cfg, out: [evaluation.CheckResult(1, "pod_energy", False, {"energy_30": 0.5})])
    assert main(["evaluate", "--out", str(tmp_path)]) == 1
    assert '"passed": false' in (tmp_path / "acceptance.json").read_text()
