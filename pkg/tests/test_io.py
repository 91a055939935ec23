import json

import numpy as np
import pytest

from reld import io
from reld.errors import (
    CheckpointShapeError,
    ChecksumError,
    ConfigurationError,
    MagicError,
    ParseError,
)
from reld.evaluation import evaluate
from reld.generate import FixedCapacity, GenConfig, keyed_rng, sample_instances
from reld.model import init_params, preset
from reld.training import AdamState, TrainConfig
from reld.vrp import Instance, tour_cost
from tests.conftest import DATA, make_instance, tiny_model

MINIMAL = """NAME : mini
TYPE : CVRP
DIMENSION : 3
EDGE_WEIGHT_TYPE : EUC_2D
CAPACITY : 7
NODE_COORD_SECTION
1 0 0
2 3 4
3 6 0
DEMAND_SECTION
1 0
2 2
3 5
DEPOT_SECTION
1
-1
EOF
"""


class TestCvrplib:
    def test_minimal(self):
        inst = io.parse_cvrplib(MINIMAL)
        assert inst.n == 2 and inst.capacity == 7 and inst.name == "mini"
        assert inst.customers.tolist() == [[3, 4], [6, 0]] and inst.demands.tolist() == [2, 5]

    def test_depot_not_first(self):
        text = MINIMAL.replace("1 0\n2 2\n3 5", "1 2\n2 0\n3 5").replace("DEPOT_SECTION\n1\n", "DEPOT_SECTION\n2\n")
        inst = io.parse_cvrplib(text)
        assert inst.depot.tolist() == [3, 4] and inst.customers.tolist() == [[0, 0], [6, 0]]
        assert inst.demands.tolist() == [2, 5]

    def test_synthetic_n101_header(self):
        inst = io.read_cvrplib(DATA / "cvrplib" / "synth-n101-k25.vrp")
        assert inst.n + 1 == 101 and inst.capacity == 206

    def test_setx_layout_with_tabs_and_comment(self):
        inst = io.read_cvrplib(DATA / "cvrplib" / "setx-style-n7.vrp")
        assert inst.n == 6 and inst.capacity == 10

    @pytest.mark.parametrize("name", ["tiny-n3", "setx-style-n7", "synth-n101-k25"])
    def test_round_trip(self, name):
        inst = io.read_cvrplib(DATA / "cvrplib" / f"{name}.vrp")
        assert io.parse_cvrplib(io.write_cvrplib(inst)) == inst

    @pytest.mark.parametrize("mutate, kind, line", [
        (lambda t: t.replace("DEMAND_SECTION\n1 0\n2 2\n3 5\n", ""), "missing-section", 13),
        (lambda t: t.replace("CAPACITY : 7\n", ""), "missing-field", 16),
        (lambda t: t.replace("EUC_2D", "GEO"), "weight-type", 4),
        (lambda t: t.replace("DIMENSION : 3", "DIMENSION : 4"), "node-count", 3),
        (lambda t: t.replace("1 0\n2 2", "1 1\n2 2"), "depot-demand", 11),
        (lambda t: t.replace("2 3 4", "2 3 x"), "malformed", 8),
    ])
    def test_errors_are_distinct_with_lines(self, mutate, kind, line):
        with pytest.raises(ParseError) as exc:
            io.parse_cvrplib(mutate(MINIMAL))
        assert exc.value.kind == kind and exc.value.line == line
        assert str(exc.value).startswith(f"line {line}:")

    @pytest.mark.parametrize("text", ["", "::::", "DIMENSION : x\nCAPACITY : 3", "NODE_COORD_SECTION\n1 2"])
    def test_garbage_is_a_parse_error(self, text):
        with pytest.raises(ParseError):
            io.parse_cvrplib(text)

    def test_bks(self, tmp_path):
        table = io.read_bks(DATA / "cvrplib" / "bks.txt")
        assert table == {"tiny-n3": 16.0, "setx-style-n7": 2073.0}
        bad = tmp_path / "b.txt"
        bad.write_text("x -3\n")
        with pytest.raises(ParseError, match="line 1"):
            io.read_bks(bad)


class TestScale:
    def test_unit_instance_unchanged(self):
        inst = make_instance(5)
        out, f = io.scale_instance(inst)
        assert f == 1.0 and out is inst

    def test_scaled_by_thousand(self):
        inst = make_instance(6, seed=1)
        big = Instance(inst.depot * 1000, inst.customers * 1000, inst.demands, inst.capacity)
        out, f = io.scale_instance(big)
        assert f == pytest.approx((big.coords.max(0) - big.coords.min(0)).max())
        assert out.coords.min() >= 0 and out.coords.max() <= 1

    def test_cost_round_trip(self):
        inst = io.read_cvrplib(DATA / "cvrplib" / "synth-n101-k25.vrp")
        out, f = io.scale_instance(inst)
        order = [0, *range(1, 101), 0]
        assert tour_cost(out, order) * f == pytest.approx(tour_cost(inst, order), rel=1e-6)

    def test_degenerate(self):
        inst = Instance([2, 2], [[2, 2]], [1], 1)
        with pytest.raises(ValueError):
            io.scale_instance(inst)


class TestInstanceSets:
    def test_round_trip(self, tmp_path):
        insts = sample_instances(GenConfig(seed=3), 10)
        io.write_instances(tmp_path / "s.jsonl", insts)
        assert io.read_instances(tmp_path / "s.jsonl") == insts
        assert len((tmp_path / "s.jsonl").read_text().splitlines()) == 10

    def test_bad_record_names_line(self, tmp_path):
        f = tmp_path / "s.jsonl"
        io.write_instances(f, [make_instance(3)])
        f.write_text(f.read_text() + '{"depot": [0, 0]}\n')
        with pytest.raises(ParseError, match="line 2"):
            io.read_instances(f)

    def test_frozen_heldout_sets(self):
        held = io.read_instances(DATA / "heldout_cvrp10.jsonl")
        refs = [json.loads(l) for l in (DATA / "heldout_cvrp10_refs.jsonl").read_text().splitlines()]
        assert len(held) == 100 and all(i.n == 10 for i in held)
        assert [r["instance"] for r in refs] == [i.name for i in held]
        for inst, r in zip(held[:5], refs[:5]):
            assert tour_cost(inst, r["nodes"]) == pytest.approx(r["cost"], abs=1e-12)


class TestCheckpoint:
    def test_bit_exact(self, tmp_path):
        cfg = tiny_model()
        p = init_params(cfg, keyed_rng(0))
        io.save_checkpoint(tmp_path / "m.ckpt", p)
        ck = io.load_checkpoint(tmp_path / "m.ckpt")
        assert ck.cfg == cfg
        for n, t in p.items():
            assert np.array_equal(ck.params[n].data, t.data.astype(np.float32).astype(np.float64))
        io.save_checkpoint(tmp_path / "m2.ckpt", ck.params)
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()

    def test_adam_state_and_meta(self, tmp_path):
        p = init_params(tiny_model(), keyed_rng(0))
        adam = AdamState({"dec.Wo": np.ones((16, 16))}, {"dec.Wo": np.full((16, 16), 2.0)}, 7)
        io.save_checkpoint(tmp_path / "m.ckpt", p, adam=adam, meta={"epoch": 3})
        ck = io.load_checkpoint(tmp_path / "m.ckpt")
        assert ck.adam.t == 7 and ck.meta["epoch"] == 3
        assert np.array_equal(ck.adam.v["dec.Wo"], adam.v["dec.Wo"])

    def test_flipped_byte(self, tmp_path):
        path = tmp_path / "m.ckpt"
        io.save_checkpoint(path, init_params(tiny_model(), keyed_rng(0)))
        blob = bytearray(path.read_bytes())
        blob[-100] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            io.load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOTIT" + b"\0" * 40)
        with pytest.raises(MagicError):
            io.load_checkpoint(path)

    def test_wrong_width_names_tensor(self, tmp_path):
        path = tmp_path / "m.ckpt"
        io.save_checkpoint(path, init_params(tiny_model(), keyed_rng(0)))
        with pytest.raises(CheckpointShapeError, match=r"tensor enc\.\S+: checkpoint shape"):
            io.load_checkpoint(path, expect=tiny_model(d_h=32))


class TestConfig:
    def test_default_round_trip(self, tmp_path):
        io.write_config(tmp_path / "c.yaml")
        assert io.read_config(tmp_path / "c.yaml") == io.ExperimentConfig()

    def test_custom_round_trip(self, tmp_path):
        cfg = io.ExperimentConfig(
            preset("pomo", d_h=32, heads=4),
            TrainConfig(epochs=3, lr_decay_epochs=(1, 2), max_grad_norm=1.5,
                        gen=GenConfig(size_range=(5, 7), capacity_mode=FixedCapacity(12), seed=9)),
        )
        io.write_config(tmp_path / "c.yaml", cfg)
        assert io.read_config(tmp_path / "c.yaml") == cfg

    def test_shipped_desk_config_loads(self):
        from tests.conftest import ROOT

        cfg = io.read_config(ROOT / "configs" / "desk.yaml")
        assert cfg.model == preset("reld") and cfg.gen.size_range == (10, 20)

    def test_inline_docs(self):
        assert "use_idt: true  # identity-mapping residual" in io.config_to_text(io.ExperimentConfig())

    def test_typo_suggestion(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("model:\n  us_idt: false\n")
        with pytest.raises(ConfigurationError, match="did you mean 'use_idt'"):
            io.read_config(f)

    def test_partial_file_fills_defaults(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("train:\n  epochs: 2\ngen:\n  size_range: [8, 8]\n")
        cfg = io.read_config(f)
        assert cfg.train.epochs == 2 and cfg.gen.size_range == (8, 8)
        assert cfg.model == io.ExperimentConfig().model and cfg.train.batch_size == 32

    @pytest.mark.parametrize("text", [
        "model:\n  d_h: sixty\n",
        "model:\n  use_idt: 1\n",
        "train:\n  epochs: 0\n",
        "model:\n  d_h: 10\n",
        "gen:\n  capacity: {kind: weird}\n",
        "gen:\n  capacity: {kind: fixed, valu: 3}\n",
        "nonsense: 1\n",
        "- a list\n",
        "model: [unclosed\n",
    ])
    def test_rejections(self, tmp_path, text):
        f = tmp_path / "c.yaml"
        f.write_text(text)
        with pytest.raises(ConfigurationError):
            io.read_config(f)


def test_report_records(tmp_path):
    cfg = tiny_model()
    p = init_params(cfg, keyed_rng(0))
    insts = sample_instances(GenConfig(size_range=(5, 5)), 3)
    rep = evaluate(p, cfg, insts, references=[1.0, 2.0, 3.0])
    io.write_report(tmp_path / "r.jsonl", rep)
    recs = io.read_report(tmp_path / "r.jsonl")
    assert [r["cost"] for r in recs] == list(rep.costs)
    assert all(r["gap_pct"] == round(r["gap_pct"], 3) for r in recs)
    assert (tmp_path / "r.jsonl.txt").exists()
    (tmp_path / "bad.jsonl").write_text("{oops\n")
    with pytest.raises(ParseError, match="line 1"):
        io.read_report(tmp_path / "bad.jsonl")
