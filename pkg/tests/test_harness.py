import json
import random
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from itss.errors import CorruptArtifactError, MissingArtifactError, UnsupportedVersionError
from itss.harness import artifacts, runner
from itss.harness.cli import main
from itss.harness.config import ExperimentConfig, RunManifest, resolve_out
from itss.nn import ModelSpec, init_model
from itss.subspace import LowDimState, extract_basis
from itss.train import Trajectory

TINY = {"suite": {"num_tasks": 3, "small_n": 48, "large_n": 64, "n_val": 48},
        "model": {"hidden_dim": 10}, "train": {"epochs": 6},
        "dim": 6, "dims": [2, 4, 6], "seeds": [0, 1], "h": 4}


def make_traj(seed=0, t=4):
    m = init_model(ModelSpec(input_dim=3, hidden_dim=4, depth=2))
    r = np.random.default_rng(seed)
    origin = [v.copy() for v in m.hidden_values()]
    cks = [[o + r.standard_normal(o.size) for o in origin] for _ in range(t)]
    return Trajectory(m.layouts, origin, cks, "task1", {"epochs": t, "lr": 0.001})


def same_traj(a, b):
    assert a.layouts == b.layouts and a.task_id == b.task_id and a.config == b.config
    for x, y in zip(a.origin, b.origin):
        assert x.tobytes() == y.tobytes()
    for ca, cb in zip(a.checkpoints, b.checkpoints):
        assert all(x.tobytes() == y.tobytes() for x, y in zip(ca, cb))


def test_trajectory_roundtrip(tmp_path):
    tr = make_traj()
    p = artifacts.save(tr, tmp_path / "t.itss")
    same_traj(tr, artifacts.load_trajectory(p))
    assert p.read_bytes()[:4] == b"ITSS"


def test_basis_and_state_roundtrip(tmp_path):
    tr = make_traj()
    b = extract_basis(tr, 3)
    back = artifacts.load_basis(artifacts.save(b, tmp_path / "b.itss"))
    assert back.source == b.source and back.layouts == b.layouts
    for part in ("directions", "singular_values", "origin"):
        for x, y in zip(getattr(b, part), getattr(back, part)):
            assert x.tobytes() == y.tobytes()
    st_ = LowDimState([np.random.default_rng(1).standard_normal((16, 3)) for _ in range(2)])
    got = artifacts.load_state(artifacts.save(st_, tmp_path / "s.itss"))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(st_.members, got.members))


@given(seed=st.integers(0, 2**31), t=st.integers(1, 5), special=st.booleans())
def test_roundtrip_bit_exact_property(seed, t, special):
    tr = make_traj(seed, t)
    if special:
        tr.checkpoints[0][0][:3] = [-0.0, 5e-324, 1.7976931348623157e308]
    same_traj(tr, artifacts.trajectory_from_bytes(artifacts.trajectory_bytes(tr)))


def test_truncated_and_flipped(tmp_path):
    data = artifacts.trajectory_bytes(make_traj())
    for cut in (len(data) - 1, len(data) // 2, 20, 3):
        with pytest.raises(CorruptArtifactError):
            artifacts.trajectory_from_bytes(data[:cut])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    with pytest.raises(CorruptArtifactError):
        artifacts.trajectory_from_bytes(bytes(flipped))


def test_bad_magic_and_version():
    data = bytearray(artifacts.trajectory_bytes(make_traj()))
    bad = bytes(b"XTSS" + data[4:])
    with pytest.raises(CorruptArtifactError):
        artifacts.trajectory_from_bytes(bad)
    bumped = bytearray(data)
    bumped[4:8] = struct.pack("<I", artifacts.VERSION + 1)
    with pytest.raises(UnsupportedVersionError):
        artifacts.trajectory_from_bytes(bytes(bumped))
    # even with a recomputed checksum the version is rejected explicitly
    body = bytes(bumped[:-4])
    with pytest.raises(UnsupportedVersionError):
        artifacts.trajectory_from_bytes(body + struct.pack("<I", zlib.crc32(body)))


def test_wrong_kind_and_missing(tmp_path):
    data = artifacts.basis_bytes(extract_basis(make_traj(), 2))
    with pytest.raises(CorruptArtifactError):
        artifacts.trajectory_from_bytes(data)
    with pytest.raises(MissingArtifactError) as info:
        artifacts.load_trajectory(tmp_path / "nope.itss")
    assert "train-full" in str(info.value)


def test_config_defaults_and_json(tmp_path):
    cfg = ExperimentConfig()
    assert (cfg.dim, cfg.h, cfg.k_sigma, cfg.dims, len(cfg.seeds)) == (32, 16, 3.0, [8, 16, 32], 5)
    assert cfg.train_config("task1", 0).epochs == 32
    p = tmp_path / "c.json"
    cfg.save(p)
    assert ExperimentConfig.load(p).to_dict() == cfg.to_dict()


def test_config_hash_ignores_field_order(tmp_path):
    d = ExperimentConfig(**TINY).to_dict()
    keys = list(d)
    random.Random(0).shuffle(keys)
    shuffled = {k: d[k] for k in keys}
    shuffled["suite"] = dict(reversed(list(shuffled["suite"].items())))
    assert ExperimentConfig.from_dict(shuffled).hash() == ExperimentConfig.from_dict(d).hash()
    assert ExperimentConfig(**{**TINY, "h": 8}).hash() != ExperimentConfig(**TINY).hash()


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=[])
    with pytest.raises(ValueError):
        ExperimentConfig(train={"epochs": 16})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"nonsense": 1})
    ok = ExperimentConfig(task_overrides={"task8": {"epochs": 64, "dim": 64}})
    assert ok.task_dim("task8") == 64 and ok.train_config("task8", 0).epochs == 64


def test_resolve_out(monkeypatch, tmp_path):
    cfg = ExperimentConfig(out_dir="from_config")
    monkeypatch.delenv("ITSS_OUT", raising=False)
    assert str(resolve_out(None, cfg)) == "from_config"
    monkeypatch.setenv("ITSS_OUT", str(tmp_path))
    assert resolve_out(None, cfg) == tmp_path
    assert str(resolve_out("cli", cfg)) == "cli"


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def test_experiments_are_byte_reproducible(tmp_path, tiny_cfg):
    for run in ("a", "b"):
        assert main(["experiment", "all", "--config", str(tiny_cfg), "--out", str(tmp_path / run)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.csv")) + ["outliers.json"]
    assert {"transductive.csv", "transfer_matrix.csv", "similarity.csv", "unified.csv",
            "ablation.csv", "update_vector_layer0.csv"} <= set(files)
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    table = (tmp_path / "a" / "transductive.csv").read_text().splitlines()
    assert table[0] == "method,task1,task2,task3,avg"
    assert [r.split(",")[0] for r in table[1:]] == ["Full", "Freeze", "Random", "Intrinsic"]
    uni = (tmp_path / "a" / "unified.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in uni[1:]] == ["Full", "Random", "Zeroshot", "Unified"]
    man = RunManifest.load(tmp_path / "a" / "manifest_unified.json")
    assert man.metrics["unified_dims"] == [3, 3] and man.metrics["zeroshot_dims"] == [2, 2]
    tm = (tmp_path / "a" / "transfer_matrix.csv").read_text().splitlines()
    assert tm[1].split(",")[1] == "0.0000" and tm[-1].startswith("random,")


def test_resume_reuses_cache(tmp_path, tiny_cfg, monkeypatch):
    out = tmp_path / "r"
    assert main(["experiment", "transductive", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    first = (out / "transductive.csv").read_bytes()

    def boom(*a, **k):
        raise AssertionError("retrained despite a cached trajectory")

    monkeypatch.setattr(runner, "train_full", boom)
    monkeypatch.setattr(runner, "train_in_subspace", boom)
    monkeypatch.setattr(runner, "train_frozen", boom)
    assert main(["experiment", "transductive", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    assert (out / "transductive.csv").read_bytes() == first


def test_parallel_matches_serial(tmp_path, tiny_cfg):
    for run, par in (("s", "1"), ("p", "2")):
        main(["experiment", "ablation", "--config", str(tiny_cfg), "--out", str(tmp_path / run), "--parallel", par])
    assert (tmp_path / "s" / "ablation.csv").read_bytes() == (tmp_path / "p" / "ablation.csv").read_bytes()


def test_step_commands_and_missing_prereqs(tmp_path, tiny_cfg, capsys):
    out = str(tmp_path / "steps")
    base = ["--config", str(tiny_cfg), "--out", out, "--task", "task2", "--seed", "1"]
    assert main(["extract-basis", *base]) == 2
    assert "itss train-full --task task2 --seed 1" in capsys.readouterr().err
    assert main(["train-subspace", *base, "--dim", "4"]) == 2
    assert "extract-basis" in capsys.readouterr().err
    assert main(["train-full", *base]) == 0
    assert main(["extract-basis", *base, "--dim", "4"]) == 0
    assert main(["train-subspace", *base, "--dim", "4"]) == 0
    assert main(["train-subspace", *base, "--dim", "4", "--random"]) == 0
    capsys.readouterr()
    assert main(["report", "--run", out]) == 2


def test_report_aggregates(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "rep"
    main(["experiment", "transductive", "--config", str(tiny_cfg), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", "--run", str(out)]) == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0] == "experiment,method,task,mean,std,n"
    assert any(l.startswith("transductive,Intrinsic,task1,") and l.endswith(",2") for l in lines)


def test_env_out(tmp_path, tiny_cfg, monkeypatch):
    monkeypatch.setenv("ITSS_OUT", str(tmp_path / "env"))
    assert main(["train-full", "--config", str(tiny_cfg), "--task", "task1"]) == 0
    assert (tmp_path / "env" / "task1_s0.trajectory.itss").exists()


def test_write_config(tmp_path):
    p = tmp_path / "d.json"
    assert main(["write-config", str(p)]) == 0
    assert ExperimentConfig.load(p).to_dict() == ExperimentConfig().to_dict()
