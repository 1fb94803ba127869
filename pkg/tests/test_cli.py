import json
import subprocess
import sys
from pathlib import Path

import pytest

from crophybrid import model
from crophybrid.cli import main
from crophybrid.nn import parallel


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """synth -> sample -> train -> evaluate on a small 3-class scene."""
    root = tmp_path_factory.mktemp("chain")
    assert run("synth", "--out", root / "s", "--grid", 32, 32, "--classes", 3, "--seed", 1) == 0
    assert run("sample", "--cube", root / "s/cube", "--parcels", root / "s/parcels.json",
               "--labels", root / "s/labels.csv", "--out", root / "p") == 0
    assert run("train", "--patches", root / "p", "--epochs", 4, "--batch-size", 32, "--out", root / "t") == 0
    assert run("evaluate", "--checkpoint", root / "t/model.ckpt", "--patches", root / "p",
               "--out", root / "m.json") == 0
    return root


def test_train_evaluate_reaches_accuracy(chain):
    doc = json.loads((chain / "m.json").read_text())
    assert doc["accuracy"] >= 0.95
    assert {"accuracy", "weighted_f1", "per_class", "confusion", "parcel"} <= set(doc)
    assert doc["split"] == "test" and doc["n"] == sum(map(sum, doc["confusion"]))


def test_sidecars_carry_provenance(chain):
    sidecars = [chain / "s/synth.json", chain / "s/cube.json", chain / "p/index.json",
                chain / "t/train.json", chain / "m.json"]
    for path in sidecars:
        prov = json.loads(path.read_text())["provenance"]
        assert set(prov) == {"tool_version", "seed", "config_hash"}, path
    assert json.loads((chain / "s/synth.json").read_text())["provenance"]["seed"] == 1


def test_evaluate_is_repeatable(chain, tmp_path):
    assert run("evaluate", "--checkpoint", chain / "t/model.ckpt", "--patches", chain / "p",
               "--out", tmp_path / "m.json") == 0
    assert (tmp_path / "m.json").read_bytes() == (chain / "m.json").read_bytes()


def test_predict_map(chain, tmp_path):
    assert run("predict-map", "--checkpoint", chain / "t/model.ckpt", "--cube", chain / "s/cube",
               "--parcels", chain / "s/parcels.json", "--labels", chain / "s/labels.csv",
               "--vote", "--out", tmp_path / "map.ppm") == 0
    assert (tmp_path / "map.ppm").read_bytes()[:9] == b"P6\n32 32\n"
    assert "provenance" in json.loads((tmp_path / "map.json").read_text())


def test_synth_twice_is_bitwise_identical(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"classes": 3, "grid": [24, 24], "seed": 7}))
    for d in ("a", "b"):
        assert run("synth", "--spec", spec, "--out", tmp_path / d) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a and a == b


def test_params_prints_count_and_table(tmp_path, capsys):
    arch = tmp_path / "default_hybrid.json"
    arch.write_text(json.dumps(model.default_hybrid(10).to_dict()))
    assert run("params", "--config", arch) == 0
    lines = capsys.readouterr().out.splitlines()
    expected = model.count_params(model.build_hybrid(model.default_hybrid(10)))
    assert int(lines[0]) == expected
    assert any("conv3d" in ln for ln in lines[1:]) and any("dense" in ln for ln in lines[1:])


def test_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": "baseline3d", "classes": 7}))
    assert run("params", "--config", cfg) == 0
    from_file = int(capsys.readouterr().out.splitlines()[0])
    assert from_file == model.count_params(model.build_3d_baseline(model.default_baseline(7)))
    assert run("params", "--config", cfg, "--classes", 4) == 0
    overridden = int(capsys.readouterr().out.splitlines()[0])
    assert overridden == model.count_params(model.build_3d_baseline(model.default_baseline(4)))


def test_pipeline_failure_exits_one_with_single_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert run("params", "--config", bad) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ConfigError:")
    assert run("evaluate", "--checkpoint", tmp_path / "missing.ckpt", "--patches", tmp_path, "--out", tmp_path / "x") == 1


def test_unknown_flag_is_usage_error():
    proc = subprocess.run([sys.executable, "-m", "crophybrid", "params", "--bogus"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_gradcheck_and_bench_commands(tmp_path, capsys):
    assert run("gradcheck", "--out", tmp_path / "g.json") == 0
    assert json.loads((tmp_path / "g.json").read_text())["provenance"]["seed"] == 0
    assert run("bench", "--warmup", 1, "--iters", 2, "--out", tmp_path / "b.json") == 0
    out = capsys.readouterr().out
    assert "hybrid" in out and "baseline3d" in out


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv(parallel.ENV_VAR, "3")
    prev = parallel.get_threads()
    try:
        assert parallel.set_threads(None) == 3
    finally:
        parallel.set_threads(prev)
