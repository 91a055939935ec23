import json
import subprocess
import sys

import pytest

from reld import io
from reld.cli import THREADS_ENV, _threads, build_parser, main
from reld.generate import keyed_rng
from reld.model import init_params
from tests.conftest import DATA, tiny_model


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "m.ckpt"
    cfg = tiny_model()
    io.save_checkpoint(path, init_params(cfg, keyed_rng(0)))
    return str(path)


@pytest.fixture
def tiny_config(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(
        "model: {d_h: 16, heads: 4, layers: 1, d_ff: 32}\n"
        "train: {epochs: 1, instances_per_epoch: 16, batch_size: 8}\n"
        "gen: {size_range: [6, 6]}\n"
    )
    return str(f)


def test_gen_writes_count_lines(tmp_path, capsys):
    out = tmp_path / "s.jsonl"
    assert main(["gen", "--count", "100", "--size", "10", "--seed", "4", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 100 and all(len(json.loads(l)["demands"]) == 10 for l in lines)
    assert "wrote 100" in capsys.readouterr().out


def test_gen_seed_repeats(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        main(["gen", "--count", "5", "--seed", "2", "--out", str(p), "--quiet"])
    assert a.read_bytes() == b.read_bytes()


def test_solve_vrp_honours_k(ckpt, capsys):
    assert main(["solve", "--checkpoint", ckpt, "--instance", str(DATA / "cvrplib" / "setx-style-n7.vrp"),
                 "--k", "4"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "# setx-style-n7 N=6 K=4"
    assert out[1].startswith("Route #1:") and out[-1].startswith("Cost ")
    # rounded distances by default for .vrp input: an integer-valued cost
    assert float(out[-1].split()[1]).is_integer()


def test_solve_writes_file(ckpt, tmp_path, capsys):
    out = tmp_path / "sol.txt"
    assert main(["solve", "--checkpoint", ckpt, "--instance", str(DATA / "cvrplib" / "tiny-n3.vrp"),
                 "--out", str(out), "--quiet", "--augment"]) == 0
    assert capsys.readouterr().out == ""
    text = out.read_text()
    assert "N=2 K=2" in text and "Cost 16.000000" in text


def test_eval_with_oracle_and_report(ckpt, tmp_path, capsys):
    out = tmp_path / "r.jsonl"
    assert main(["eval", "--checkpoint", ckpt, "--data", str(DATA / "heldout_cvrp10.jsonl"),
                 "--limit", "3", "--oracle", "--out", str(out), "--threads", "2"]) == 0
    recs = io.read_report(out)
    assert len(recs) == 3 and all(r["gap_pct"] >= 0 for r in recs)
    assert "mean_gap=" in capsys.readouterr().out


def test_eval_vrp_against_bks(ckpt, tmp_path, capsys):
    out = tmp_path / "r.jsonl"
    vrp = str(DATA / "cvrplib" / "setx-style-n7.vrp")
    assert main(["eval", "--checkpoint", ckpt, "--data", vrp, "--bks", str(DATA / "cvrplib" / "bks.txt"),
                 "--out", str(out), "--quiet"]) == 0
    (rec,) = io.read_report(out)
    assert rec["instance"] == "setx-style-n7" and rec["ref"] == 2073.0
    assert float(rec["cost"]).is_integer() and rec["gap_pct"] >= 0


def test_probe_extension_on_vrp(ckpt, capsys):
    assert main(["probe-extension", "--checkpoint", ckpt, "--data", str(DATA / "cvrplib" / "setx-style-n7.vrp"),
                 "--bks", str(DATA / "cvrplib" / "bks.txt"), "--deltas", "0,1"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2


def test_probe_extension(ckpt, tmp_path, capsys):
    assert main(["probe-extension", "--checkpoint", ckpt, "--data", str(DATA / "heldout_cvrp10.jsonl"),
                 "--limit", "2", "--deltas", "0,0.5", "--out", str(tmp_path / "p")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in out] == ["delta=0", "delta=0.5"]
    assert (tmp_path / "p" / "delta_0.5.jsonl").exists()


def test_train_then_fine_tune(tiny_config, tmp_path, capsys):
    assert main(["train", "--config", tiny_config, "--out", str(tmp_path / "t"), "--quiet"]) == 0
    ck = next((tmp_path / "t").glob("*.ckpt"))
    assert main(["fine-tune", "--config", tiny_config, "--checkpoint", str(ck), "--freeze", "encoder",
                 "--out", str(tmp_path / "f"), "--quiet"]) == 0
    assert capsys.readouterr().out == ""
    assert any((tmp_path / "f").glob("*.ckpt"))


def test_oracle_command(tmp_path, capsys):
    assert main(["oracle", "--data", str(DATA / "cvrplib" / "tiny-n3.vrp"), "--out", str(tmp_path / "o")]) == 0
    rec = json.loads((tmp_path / "o").read_text())
    assert rec["instance"] == "tiny-n3" and rec["cost"] == pytest.approx(16.0)


def test_ablate_small(tiny_config, capsys):
    assert main(["ablate", "--config", tiny_config, "--variants", "pomo,reld", "--eval-sizes", "6",
                 "--eval-count", "3", "--quiet"]) == 0
    assert capsys.readouterr().out == ""


def test_grad_check_exits_zero(capsys):
    assert main(["grad-check", "--dh", "8", "--heads", "2", "--layers", "1", "--n", "5", "--max-entries", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 9 and out[-1].startswith("max_rel_error=")


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["gen", "--count", "3"],
    ["gen", "--count", "0", "--out", "x"],
    ["solve", "--instance", "x.vrp"],
    ["eval", "--checkpoint", "c", "--data", "d", "--oracle", "--bks", "b"],
    ["ablate", "--variants", "pomo,bogus"],
    ["gen", "--count", "3", "--out", "x", "--config", "/no/such.yaml"],
    ["probe-extension", "--checkpoint", "c", "--data", "d", "--deltas", "a,b"],
])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "solve" in capsys.readouterr().out


def test_bad_vrp_file_exits_two(ckpt, tmp_path, capsys):
    bad = tmp_path / "bad.vrp"
    bad.write_text("NAME : bad\nDIMENSION : 3\nCAPACITY : 5\nEDGE_WEIGHT_TYPE : GEO\n")
    assert main(["solve", "--checkpoint", ckpt, "--instance", str(bad)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("reld solve: reading instance: line ")


def test_corrupt_checkpoint_exits_two(tmp_path, capsys):
    bad = tmp_path / "m.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["solve", "--checkpoint", str(bad), "--instance", str(DATA / "cvrplib" / "tiny-n3.vrp")]) == 2
    assert "loading checkpoint" in capsys.readouterr().err


def test_bad_config_exits_two(tmp_path, capsys):
    f = tmp_path / "c.yaml"
    f.write_text("model:\n  us_idt: true\n")
    assert main(["gen", "--count", "2", "--out", str(tmp_path / "x"), "--config", str(f)]) == 2
    assert "did you mean 'use_idt'" in capsys.readouterr().err


def test_oracle_too_large_exits_two(ckpt, capsys):
    assert main(["eval", "--checkpoint", ckpt, "--data", str(DATA / "heldout_cvrp20.jsonl"),
                 "--limit", "1", "--oracle"]) == 2


def test_threads_flag_beats_env(monkeypatch):
    parser = build_parser()
    monkeypatch.setenv(THREADS_ENV, "3")
    assert _threads(parser.parse_args(["oracle", "--data", "x"])) == 3
    assert _threads(parser.parse_args(["oracle", "--data", "x", "--threads", "5"])) == 5


def test_entry_point_module(tmp_path):
    out = tmp_path / "s.jsonl"
    res = subprocess.run([sys.executable, "-m", "reld.cli", "gen", "--count", "2", "--out", str(out), "--quiet"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout == ""
    assert len(out.read_text().splitlines()) == 2
