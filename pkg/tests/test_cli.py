import json
import subprocess
import sys

import pytest

from mfgldp import cli
from mfgldp.errors import Explosion
from mfgldp.mfg_solver import solve_decoupling_field
from mfgldp.model import spec_from_dict

SMALL = {"Ns": [8, 16], "K": 400, "K_sim": 20, "nash_K": 200, "reps": 100, "seed": 3}


def write_config(tmp_path, **kw):
    d = json.loads(cli.default_scenario().to_json())
    d.update(SMALL)
    d.update(kw)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(d))
    return str(path)


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_default_scenario():
    cfg = cli.default_scenario()
    spec = spec_from_dict(cfg.spec)
    assert spec.q**2 <= spec.eps
    solve_decoupling_field(spec, 4000)
    back = cli.ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg
    mono = cli.default_scenario(monotone=True).game()
    assert mono.T == 2.0 and mono.a >= 2.0


def test_validate_default(tmp_path):
    out = tmp_path / "v"
    assert cli.main(["validate", "--out", str(out)]) == 0
    m = manifest(out)
    assert m["status"] == "complete" and m["exit_code"] == 0
    assert all(m["summary"]["checks"][k]["pass"] for k in ("A1", "A2", "A3", "A4", "A5"))
    assert (out / "COMPLETE").exists()
    assert (out / "validate.csv").read_text().splitlines()[0] == "check,pass,detail"


def test_validate_monotone(tmp_path):
    out = tmp_path / "m"
    assert cli.main(["validate", "--config", write_config(tmp_path, monotone=True), "--out", str(out)]) == 0
    assert manifest(out)["summary"]["checks"]["A8"]["pass"]


def test_invalid_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["validate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    out = tmp_path / "o2"
    assert cli.main(["solve-mfg", "--config", write_config(tmp_path, K=1), "--out", str(out)]) == 2
    assert manifest(out)["status"] == "invalid"
    out = tmp_path / "o3"
    assert cli.main(["coop", "--config", write_config(tmp_path), "--out", str(out)]) == 2
    with pytest.raises(cli.SpecError):
        cli.ExperimentConfig.from_dict({"spec": {}, "bogus": 1})


def test_numerical_failure(tmp_path):
    spec = {"family": "general_lq", "A": 0.2, "Abar": 0.1, "B": 1.0, "Bbar": 0.3, "Q": -5.0, "Qbar": 0.2,
            "R": 0.5, "Rbar": 0.25, "Sbar": 0.1, "QT": 0.5, "QbarT": 0.1, "sigma": 1.0, "T": 5.0, "x0": 1.0}
    out = tmp_path / "n"
    assert cli.main(["solve-mfg", "--config", write_config(tmp_path, spec=spec), "--out", str(out)]) == 3
    m = manifest(out)
    assert m["status"] == "numerical_failure" and m["error"]["type"] == "RiccatiBlowup"
    assert (out / "COMPLETE").read_text() == "numerical_failure\n"


def test_explosion_is_numerical(tmp_path, monkeypatch):
    def boom(*a):
        raise Explosion("state left the box")
    monkeypatch.setitem(cli.RUNNERS, "chaos", boom)
    out = tmp_path / "e"
    assert cli.main(["chaos", "--config", write_config(tmp_path), "--out", str(out)]) == 3


def test_manifest_written_before_compute(tmp_path, monkeypatch):
    seen = {}

    def spy(cfg, spec, out, threads, summary):
        seen["status"] = json.loads(open(f"{out}/manifest.json").read())["status"]
        seen["marker"] = (tmp_path / "s" / "COMPLETE").exists()
        return []
    monkeypatch.setitem(cli.RUNNERS, "chaos", spy)
    assert cli.main(["chaos", "--config", write_config(tmp_path), "--out", str(tmp_path / "s")]) == 0
    assert seen == {"status": "running", "marker": False}


@pytest.mark.parametrize("scenario", ["solve-mfg", "residuals", "ldp-tail"])
def test_rerun_byte_identical(tmp_path, scenario):
    cfg = write_config(tmp_path)
    outs = []
    for i, th in enumerate((1, 4)):
        out = tmp_path / f"r{i}"
        assert cli.main([scenario, "--config", cfg, "--out", str(out), "--threads", str(th)]) == 0
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir())
    for name in files:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_seed_override(tmp_path):
    cfg = write_config(tmp_path)
    cli.main(["chaos", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "11"])
    cli.main(["chaos", "--config", cfg, "--out", str(tmp_path / "b")])
    assert manifest(tmp_path / "a")["seed"] == 11
    assert (tmp_path / "a" / "chaos.csv").read_bytes() != (tmp_path / "b" / "chaos.csv").read_bytes()
    assert (tmp_path / "a" / "chaos.csv").read_text().splitlines()[0] == "N,mean_w2sq,stderr,fitted_slope"


def test_residuals_csv_slope(tmp_path):
    out = tmp_path / "res"
    cfg = write_config(tmp_path, Ns=[8, 16, 32, 64, 128, 256], reps=200, K_sim=50, nash_K=1000)
    assert cli.main(["residuals", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "residuals.csv").read_text().splitlines()
    assert lines[0] == "N,max_eps,max_zeta,max_gamma,fitted_slope"
    slope = float(lines[1].split(",")[-1])
    assert -1.2 <= slope <= -0.8


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mfgldp", "validate", "--out", str(tmp_path / "x")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
