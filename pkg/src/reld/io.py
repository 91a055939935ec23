"""File formats: CVRPLib instances, instance sets, checkpoints, configs, reports."""

from __future__ import annotations

import difflib
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np
import yaml

from .errors import (
    ChecksumError,
    CheckpointError,
    CheckpointShapeError,
    ConfigurationError,
    MagicError,
    ParseError,
)
from .generate import FixedCapacity, GenConfig, TriangularRoute
from .model import ModelConfig, ParamStore, param_shapes
from .training import AdamState, TrainConfig
from .vrp import Instance, Trajectory

MAGIC = b"RLDV1"


def atomic_write(path: str | Path, data: bytes | str):
    """Write to a temporary file next to ``path``, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- CVRPLib / TSPLIB -------------------------------------------------------------

_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION")


def parse_cvrplib(text: str) -> Instance:
    """Parse a TSPLIB-style CVRP file with EUC_2D weights.

    File nodes are 1-indexed; the declared depot becomes node 0 and the other
    nodes keep their file order. Coordinates are kept as given.
    """
    header: dict[str, tuple[str, int]] = {}
    coords: dict[int, tuple[float, float]] = {}
    demands: dict[int, int] = {}
    demand_line: dict[int, int] = {}
    depots: list[int] = []
    section = None
    seen = set()
    lineno = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        word = line.split()[0].rstrip(":").upper()
        if word == "EOF":
            break
        if word in _SECTIONS:
            section = word
            seen.add(word)
            continue
        if section is None or (":" in line and not _numeric(line.split(":")[0])):
            if ":" not in line:
                raise ParseError(f"expected 'KEY : VALUE', got {line!r}", lineno)
            key, value = (s.strip() for s in line.split(":", 1))
            header[key.upper()] = (value, lineno)
            section = None
            continue
        parts = line.split()
        try:
            if section == "NODE_COORD_SECTION":
                if len(parts) != 3:
                    raise ValueError
                coords[int(parts[0])] = (float(parts[1]), float(parts[2]))
            elif section == "DEMAND_SECTION":
                if len(parts) != 2:
                    raise ValueError
                demands[int(parts[0])] = int(parts[1])
                demand_line[int(parts[0])] = lineno
            elif section == "DEPOT_SECTION":
                for p in parts:
                    v = int(p)
                    if v == -1:
                        section = None
                        break
                    depots.append((v, lineno))
        except ValueError:
            raise ParseError(f"malformed {section} entry {line!r}", lineno) from None

    for key in ("DIMENSION", "CAPACITY"):
        if key not in header:
            raise ParseError(f"missing {key} field", lineno, "missing-field")
    for sec in _SECTIONS:
        if sec not in seen:
            raise ParseError(f"missing {sec}", lineno, "missing-section")
    wtype, wline = header.get("EDGE_WEIGHT_TYPE", ("EUC_2D", None))
    if wtype.upper() != "EUC_2D":
        raise ParseError(
            f"unsupported EDGE_WEIGHT_TYPE {wtype!r}; only EUC_2D is accepted", wline, "weight-type"
        )
    try:
        dim = int(header["DIMENSION"][0])
        capacity = int(header["CAPACITY"][0])
    except ValueError:
        raise ParseError("DIMENSION and CAPACITY must be integers", header["DIMENSION"][1]) from None
    if len(coords) != dim or sorted(coords) != list(range(1, dim + 1)):
        raise ParseError(
            f"DIMENSION {dim} but {len(coords)} coordinate entries", header["DIMENSION"][1], "node-count"
        )
    if sorted(demands) != list(range(1, dim + 1)):
        raise ParseError(
            f"DIMENSION {dim} but {len(demands)} demand entries", header["DIMENSION"][1], "node-count"
        )
    if len(depots) != 1:
        raise ParseError(f"expected exactly one depot, got {len(depots)}", lineno, "depot")
    depot, dline = depots[0]
    if depot not in coords:
        raise ParseError(f"depot {depot} is not a node", dline, "depot")
    if demands[depot] != 0:
        raise ParseError(f"depot demand must be 0, got {demands[depot]}", demand_line[depot], "depot-demand")
    others = [i for i in range(1, dim + 1) if i != depot]
    name = header.get("NAME", (None, None))[0]
    try:
        return Instance(
            depot=coords[depot],
            customers=[coords[i] for i in others],
            demands=[demands[i] for i in others],
            capacity=capacity,
            name=name,
        )
    except ValueError as exc:
        raise ParseError(str(exc), lineno, "invalid-instance") from None


def _numeric(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def write_cvrplib(instance: Instance) -> str:
    lines = []
    if instance.name:
        lines.append(f"NAME : {instance.name}")
    lines += [
        "TYPE : CVRP",
        f"DIMENSION : {instance.n + 1}",
        "EDGE_WEIGHT_TYPE : EUC_2D",
        f"CAPACITY : {instance.capacity}",
        "NODE_COORD_SECTION",
    ]
    for i, (x, y) in enumerate(instance.coords, 1):
        lines.append(f"{i} {_num(x)} {_num(y)}")
    lines.append("DEMAND_SECTION")
    for i, d in enumerate(np.concatenate([[0], instance.demands]), 1):
        lines.append(f"{i} {int(d)}")
    lines += ["DEPOT_SECTION", "1", "-1", "EOF", ""]
    return "\n".join(lines)


def read_cvrplib(path: str | Path) -> Instance:
    inst = parse_cvrplib(Path(path).read_text())
    if inst.name is None:
        inst = Instance(inst.depot, inst.customers, inst.demands, inst.capacity, Path(path).stem)
    return inst


def scale_instance(instance: Instance) -> tuple[Instance, float]:
    """Map coordinates into the unit square; multiply scaled costs by the factor.

    Instances already inside [0, 1]^2 are returned unchanged with factor 1.
    Otherwise the bounding box is moved to the origin and divided by its
    larger side.
    """
    c = instance.coords
    if np.all((c >= 0) & (c <= 1)):
        return instance, 1.0
    lo = c.min(0)
    factor = float((c.max(0) - lo).max())
    if factor <= 0:
        raise ValueError("cannot scale an instance whose nodes all coincide")
    s = (c - lo) / factor
    return Instance(s[0], s[1:], instance.demands, instance.capacity, instance.name), factor


def format_solution(traj: Trajectory, cost: float | None = None) -> str:
    lines = [f"Route #{i}: {' '.join(map(str, r))}" for i, r in enumerate(traj.routes, 1)]
    lines.append(f"Cost {traj.cost if cost is None else cost:.6f}")
    return "\n".join(lines)


def read_bks(path: str | Path) -> dict[str, float]:
    """Best-known costs, one ``name cost`` pair per line (``#`` comments allowed)."""
    table = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"expected 'name cost', got {raw!r}", lineno)
        try:
            cost = float(parts[1])
        except ValueError:
            raise ParseError(f"cost is not a number: {parts[1]!r}", lineno) from None
        if not cost > 0:
            raise ParseError(f"best-known cost must be positive, got {cost}", lineno)
        table[parts[0]] = cost
    return table


# -- instance sets (JSON lines) ---------------------------------------------------


def instance_to_record(inst: Instance) -> dict:
    return {
        "name": inst.name,
        "depot": inst.depot.tolist(),
        "customers": inst.customers.tolist(),
        "demands": inst.demands.tolist(),
        "capacity": inst.capacity,
    }


def instance_from_record(rec: dict) -> Instance:
    return Instance(rec["depot"], rec["customers"], rec["demands"], rec["capacity"], rec.get("name"))


def write_instances(path: str | Path, instances: Iterable[Instance]):
    atomic_write(path, "".join(json.dumps(instance_to_record(i)) + "\n" for i in instances))


def iter_instances(path: str | Path):
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield instance_from_record(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"bad instance record: {exc}", lineno) from None


def read_instances(path: str | Path) -> list[Instance]:
    return list(iter_instances(path))


# -- reports ----------------------------------------------------------------------

REPORT_FIELDS = ("instance", "cost", "ref", "gap_pct", "time_ms")


def report_records(report) -> list[dict]:
    out = []
    for r in report.results:
        rec = r.record()
        if rec["gap_pct"] is not None:
            rec["gap_pct"] = round(rec["gap_pct"], 3)
        out.append(rec)
    return out


def write_report(path: str | Path, report):
    """Line-delimited records to ``path`` and the human table to ``path.txt``."""
    path = Path(path)
    atomic_write(path, "".join(json.dumps(r) + "\n" for r in report_records(report)))
    atomic_write(path.with_suffix(path.suffix + ".txt"), report.table() + "\n")


def read_report(path: str | Path) -> list[dict]:
    recs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise ParseError(f"not a JSON record ({exc})", lineno) from None
        if not isinstance(rec, dict) or set(rec) != set(REPORT_FIELDS):
            raise ParseError(f"report fields {sorted(rec)} != {list(REPORT_FIELDS)}", lineno)
        recs.append(rec)
    return recs


# -- checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: ParamStore
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_checkpoint(
    path: str | Path,
    params: ParamStore,
    cfg: ModelConfig | None = None,
    adam: AdamState | None = None,
    meta: dict | None = None,
):
    """Write parameters (and optionally Adam moments) as little-endian float32.

    Layout: magic, u32 header length, JSON header (config, tensor table,
    meta), payload, u64 checksum of the payload.
    """
    cfg = cfg or params.cfg
    tensors = list(params.arrays().items())
    meta = dict(meta or {})
    if adam is not None:
        meta["adam_t"] = adam.t
        for name in params.names():
            if name in adam.m:
                tensors.append((f"adam.m/{name}", adam.m[name]))
                tensors.append((f"adam.v/{name}", adam.v[name]))
    table = [{"name": n, "shape": list(a.shape), "dtype": "<f4"} for n, a in tensors]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in tensors)
    header = json.dumps({"config": cfg.to_dict(), "tensors": table, "meta": meta}).encode()
    blob = MAGIC + struct.pack("<I", len(header)) + header + payload + struct.pack("<Q", _checksum(payload))
    atomic_write(path, blob)


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint; values come back as float64.

    With ``expect`` the stored tensor table must match that configuration.
    """
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise MagicError(f"{path}: not a checkpoint (bad magic {blob[:len(MAGIC)]!r})")
    try:
        (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
        start = len(MAGIC) + 4
        header = json.loads(blob[start : start + hlen])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = blob[start + hlen : -8]
    (stored,) = struct.unpack("<Q", blob[-8:])
    if _checksum(payload) != stored:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    cfg = ModelConfig.from_dict(header["config"])
    arrays, off = {}, 0
    for entry in header["tensors"]:
        if entry.get("dtype") != "<f4":
            raise CheckpointError(f"{entry['name']}: unsupported dtype {entry.get('dtype')}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(np.float64)
        off += 4 * count
    if off != len(payload):
        raise CheckpointError(f"{path}: payload size does not match the tensor table")

    target = expect or cfg
    shapes = param_shapes(target)
    for name, shape in shapes.items():
        if name not in arrays:
            raise CheckpointShapeError(f"tensor {name} missing from checkpoint")
        if tuple(arrays[name].shape) != shape:
            raise CheckpointShapeError(
                f"tensor {name}: checkpoint shape {tuple(arrays[name].shape)} != expected {shape}"
            )
    extra = [n for n in arrays if n not in shapes and not n.startswith("adam.")]
    if extra:
        raise CheckpointShapeError(f"checkpoint has tensors unknown to the config: {extra}")
    params = ParamStore.from_arrays(target, {n: arrays[n] for n in shapes})
    meta = header.get("meta", {})
    adam = None
    if any(n.startswith("adam.") for n in arrays):
        adam = AdamState(t=int(meta.get("adam_t", 0)))
        for n in shapes:
            if f"adam.m/{n}" in arrays:
                adam.m[n] = arrays[f"adam.m/{n}"]
                adam.v[n] = arrays[f"adam.v/{n}"]
    return Checkpoint(target, params, adam, meta)


# -- configs ----------------------------------------------------------------------

_MODEL_DOCS = {
    "d_h": "embedding width",
    "heads": "attention heads (must divide d_h)",
    "layers": "encoder layers",
    "d_ff": "feed-forward hidden width",
    "norm": "encoder normalization: instance | none",
    "use_idt": "identity-mapping residual in the decoder query",
    "use_ff_query": "feed-forward refinement of the decoder query",
    "use_dist_heuristic": "subtract log-distance from the last node inside tanh",
    "logit_clip": "tanh logit clipping C",
    "d_attr": "dynamic feature width (remaining capacity)",
    "qkv_ff": "ablation: feed-forward q/k(/v) projections: none | qk | qkv",
    "extra_mha": "ablation: second decoder attention layer",
}
_TRAIN_DOCS = {
    "epochs": "training epochs",
    "instances_per_epoch": "instances per epoch",
    "batch_size": "instances per optimizer step",
    "k_policy": "trajectories per instance: full (K = N) | min100",
    "learning_rate": "initial Adam learning rate",
    "lr_decay_epochs": "epochs after which the rate is multiplied by lr_decay_factor",
    "lr_decay_factor": "multiplicative decay in (0, 1]",
    "weight_decay": "L2 coefficient added to gradients",
    "max_grad_norm": "optional global gradient-norm clip (null = off)",
    "seed": "seed for initialization and sampling",
    "checkpoint_every": "write a checkpoint every this many epochs (0 = final only)",
}
_GEN_DOCS = {
    "size_range": "customer count range [low, high], inclusive",
    "demand_range": "integer demand range [low, high], inclusive",
    "capacity": "{kind: triangular, low, mode, high} customers per route, or {kind: fixed, value}",
    "seed": "instance stream seed",
}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()

    @property
    def gen(self) -> GenConfig:
        return self.train.gen


def _unknown(key: str, allowed, where: str):
    hint = difflib.get_close_matches(key, list(allowed), n=1)
    msg = f"unknown key {key!r} in [{where}]"
    if hint:
        msg += f"; did you mean {hint[0]!r}?"
    raise ConfigurationError(msg)


def _coerce(value, default, key: str, where: str):
    """Check ``value`` against the type of the default value for ``key``."""
    bad = ConfigurationError(f"[{where}] {key}: expected {type(default).__name__}, got {value!r}")
    if default is None or key == "max_grad_norm":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise bad
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
        ):
            raise bad
        return tuple(value)
    raise bad


def _section(data: dict, cls, where: str, skip=()):
    defaults = cls()
    names = [f.name for f in fields(cls) if f.name not in skip]
    out = {}
    for key, value in (data or {}).items():
        if key not in names:
            _unknown(key, names, where)
        out[key] = _coerce(value, getattr(defaults, key), key, where)
    return out


def _gen_from(data: dict) -> GenConfig:
    data = dict(data or {})
    cap = data.pop("capacity", None)
    kw = _section(data, GenConfig, "gen", skip=("capacity_mode",))
    if cap is not None:
        if not isinstance(cap, dict) or "kind" not in cap:
            raise ConfigurationError("[gen] capacity must be a mapping with a 'kind' key")
        cap = dict(cap)
        kind = cap.pop("kind")
        if kind == "fixed":
            if set(cap) - {"value"}:
                _unknown(next(iter(set(cap) - {"value"})), ["value"], "gen.capacity")
            kw["capacity_mode"] = FixedCapacity(_coerce(cap.get("value"), 1, "value", "gen.capacity"))
        elif kind == "triangular":
            for k in cap:
                if k not in ("low", "mode", "high"):
                    _unknown(k, ["low", "mode", "high"], "gen.capacity")
            kw["capacity_mode"] = TriangularRoute(
                **{k: _coerce(v, 1.0, k, "gen.capacity") for k, v in cap.items()}
            )
        else:
            raise ConfigurationError(f"[gen] capacity kind must be fixed or triangular, got {kind!r}")
    return GenConfig(**kw)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = data or {}
    for key in data:
        if key not in ("model", "train", "gen"):
            _unknown(key, ["model", "train", "gen"], "top level")
    model = ModelConfig(**_section(data.get("model"), ModelConfig, "model"))
    gen = _gen_from(data.get("gen"))
    train = TrainConfig(gen=gen, **_section(data.get("train"), TrainConfig, "train", skip=("gen",)))
    return ExperimentConfig(model, train)


def read_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def _yaml_value(v) -> str:
    if isinstance(v, tuple):
        v = list(v)
    return yaml.safe_dump(v, default_flow_style=True).strip().removesuffix("...").strip()


def config_to_text(cfg: ExperimentConfig) -> str:
    out = ["# experiment configuration; omitted keys take the defaults shown here", "model:"]
    for f in fields(ModelConfig):
        out.append(f"  {f.name}: {_yaml_value(getattr(cfg.model, f.name))}  # {_MODEL_DOCS[f.name]}")
    out.append("train:")
    for f in fields(TrainConfig):
        if f.name == "gen":
            continue
        out.append(f"  {f.name}: {_yaml_value(getattr(cfg.train, f.name))}  # {_TRAIN_DOCS[f.name]}")
    g = cfg.gen
    out.append("gen:")
    out.append(f"  size_range: {_yaml_value(g.size_range)}  # {_GEN_DOCS['size_range']}")
    out.append(f"  demand_range: {_yaml_value(g.demand_range)}  # {_GEN_DOCS['demand_range']}")
    cm = g.capacity_mode
    if isinstance(cm, FixedCapacity):
        cap = f"{{kind: fixed, value: {cm.value}}}"
    else:
        cap = f"{{kind: triangular, low: {cm.low}, mode: {cm.mode}, high: {cm.high}}}"
    out.append(f"  capacity: {cap}  # {_GEN_DOCS['capacity']}")
    out.append(f"  seed: {g.seed}  # {_GEN_DOCS['seed']}")
    return "\n".join(out) + "\n"


def write_config(path: str | Path, cfg: ExperimentConfig | None = None):
    atomic_write(path, config_to_text(cfg or ExperimentConfig()))
