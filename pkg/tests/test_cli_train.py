import json
import math

import numpy as np
import pytest

import hamba.train as train_mod
from hamba.cli import bench_tokens_report, main
from hamba.io import Checkpoint, generate_dataset, parse_obj
from hamba.train import RunConfig, TrainingAborted, load_model, train


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(12, seed=3)


def _toy(out_dir, **kw):
    base = dict(preset="toy", batch_size=4, log_every=1, out_dir=str(out_dir))
    base.update(kw)
    return RunConfig.desk(**base)


# ---------------------------------------------------------------- CLI

def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a.gssh", "b.gssh"):
        assert main(["gen-data", "--seed", "7", "--count", "10", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.gssh").read_bytes() == (tmp_path / "b.gssh").read_bytes()


def test_bench_tokens(capsys):
    assert main(["bench-tokens"]) == 0
    text = capsys.readouterr().out
    assert "tokens per GSS scan: 22 vs 192" in text and "88.5% reduction" in text
    rows = {r["variant"]: r for r in bench_tokens_report()}
    assert rows["full"]["scan_tokens"] == 22
    assert rows["attention baseline (full grid)"]["scan_tokens"] == 192
    assert rows["w/o mamba"]["scan_tokens"] == 0
    assert main(["bench-tokens", "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["summary"]["gss_tokens"] == 22 and data["summary"]["grid_tokens"] == 192


def test_eval_ablation_builds_the_matching_topology(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["eval", "--preset", "toy", "--ablate", "gss_branch", "--count", "2", "--out", str(out)]) == 0
    report = json.loads(out.read_text(encoding="utf-8"))
    pipe = report["config"]["model"]["pipeline"]
    assert pipe["use_gss_branch"] is False
    assert all(pipe[k] for k in ("use_ts_branch", "use_2d_branch", "use_global_branch", "use_gcn", "use_mamba"))
    assert report["count"] == 2 and math.isfinite(report["pa_mpjpe"])
    assert json.loads(capsys.readouterr().out) == report


def test_infer_writes_mesh(tmp_path):
    out = tmp_path / "hand.obj"
    assert main(["infer", "--preset", "toy", "--out", str(out)]) == 0
    verts, faces = parse_obj(out)
    assert verts.shape == (778, 3) and len(faces) > 0


def test_usage_errors_exit_2():
    for argv in (["no-such-command"], ["gen-data"], ["eval", "--ablate", "nonsense"], ["bench-tokens", "--frob"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert main(["eval", "--data", str(tmp_path / "missing.gssh")]) == 1
    assert "error:" in capsys.readouterr().err


def test_checkpoint_excludes_topology_flags(tmp_path, tiny_data):
    tiny_data.save(tmp_path / "d.gssh")
    assert main(["train", "--preset", "toy", "--steps", "1", "--batch-size", "2", "--train-data",
                 str(tmp_path / "d.gssh"), "--out-dir", str(tmp_path / "run")]) == 0
    ckpt = str(tmp_path / "run" / "checkpoint.gssk")
    assert main(["eval", "--checkpoint", ckpt, "--ablate", "gcn", "--count", "1"]) == 1


def test_gradcheck_cli_kernels(capsys):
    assert main(["gradcheck", "--suite", "kernels"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.strip().endswith("0 failing case(s)")


# ---------------------------------------------------------------- training

def test_smoke_run_50_steps(tmp_path, tiny_data):
    result = train(_toy(tmp_path, steps=50), tiny_data)
    assert result.final_step == 50 and len(result.losses) == 50
    lines = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert {r["step"] for r in lines} == set(range(1, 51))
    assert {"kp3d", "kp2d", "theta", "beta", "adv", "disc", "objective"} <= {r["term"] for r in lines}
    assert all(math.isfinite(r["value"]) for r in lines)
    assert Checkpoint.load(result.checkpoint).step == 50


def test_resume_replays_the_same_trajectory(tmp_path, tiny_data):
    straight = train(_toy(tmp_path / "straight", steps=6), tiny_data)
    first = train(_toy(tmp_path / "first", steps=3), tiny_data)
    resumed = train(_toy(tmp_path / "resumed", steps=6), tiny_data, resume=str(first.checkpoint))
    assert first.losses + resumed.losses == straight.losses
    a, b = Checkpoint.load(straight.checkpoint), Checkpoint.load(resumed.checkpoint)
    assert a.step == b.step == 6 and a.rng_state == b.rng_state
    assert set(a.tensors) == set(b.tensors)
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)


def test_non_finite_loss_aborts_with_last_good_checkpoint(tmp_path, tiny_data, monkeypatch):
    calls = {"n": 0}
    real_forward = train_mod.hamba_forward

    def poisoned(image, model):
        calls["n"] += 1
        return real_forward(image * np.nan if calls["n"] == 3 else image, model)

    monkeypatch.setattr(train_mod, "hamba_forward", poisoned)
    with pytest.raises(TrainingAborted) as info:
        train(_toy(tmp_path, steps=5, ckpt_every=2), tiny_data)
    assert info.value.last_checkpoint is not None
    assert Checkpoint.load(info.value.last_checkpoint).step == 2
    model, _ = load_model(info.value.last_checkpoint)
    assert all(np.all(np.isfinite(p.data)) for _, p in model.store.items())


def test_same_commands_twice_are_bit_identical(tmp_path):
    data = str(tmp_path / "d.gssh")
    run = str(tmp_path / "run")
    ckpt = str(tmp_path / "run" / "checkpoint.gssk")
    report, mesh = str(tmp_path / "r.json"), str(tmp_path / "m.obj")
    outputs = []
    for _ in range(2):
        assert main(["gen-data", "--seed", "2", "--count", "6", "--out", data]) == 0
        assert main(["train", "--preset", "toy", "--steps", "4", "--batch-size", "3", "--seed", "5",
                     "--train-data", data, "--out-dir", run]) == 0
        assert main(["eval", "--checkpoint", ckpt, "--data", data, "--out", report]) == 0
        assert main(["infer", "--checkpoint", ckpt, "--seed", "9", "--out", mesh]) == 0
        outputs.append([open(p, "rb").read() for p in (data, ckpt, str(tmp_path / "run" / "metrics.jsonl"),
                                                       report, mesh)])
    assert outputs[0] == outputs[1]


def test_effective_config_written_and_layered(tmp_path, tiny_data):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("steps = 2\nbatch_size = 5\npreset = toy\n", encoding="utf-8")
    tiny_data.save(tmp_path / "d.gssh")
    assert main(["train", "--config", str(cfg_file), "--batch-size", "2", "--train-data",
                 str(tmp_path / "d.gssh"), "--out-dir", str(tmp_path / "run")]) == 0
    text = (tmp_path / "run" / "effective_config.txt").read_text(encoding="utf-8")
    assert "steps = 2" in text and "batch_size = 2" in text and "preset = toy" in text
    ckpt = Checkpoint.load(tmp_path / "run" / "checkpoint.gssk")
    assert ckpt.config["run"]["batch_size"] == 2 and ckpt.step == 2
