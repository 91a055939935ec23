"""Transformer encoder and single-query decoder for CVRP.

The encoder maps node features to static embeddings once per instance. The
decoder builds a query from the last node's embedding and the remaining
capacity, attends over the feasible nodes, and scores every node against the
query. Switches on :class:`ModelConfig` select the baseline decoder or add the
identity-mapping residual, the query feed-forward block and the
log-distance bias, plus a few further decoder variants used in ablations.

All batched tensors are laid out as (B instances, K trajectories, M nodes, ...),
with the depot at node 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, NumericError, ShapeError
from .numerics import Tensor
from .vrp import Instance, RolloutState, feasible_mask, node_features

DIST_EPS = 1e-10

NORMS = ("instance", "none")
QK_FF = ("none", "qk", "qkv")


@dataclass(frozen=True)
class ModelConfig:
    d_h: int = 64
    heads: int = 8
    layers: int = 6
    d_ff: int = 512
    norm: str = "none"
    use_idt: bool = True
    use_ff_query: bool = True
    use_dist_heuristic: bool = True
    logit_clip: float = 10.0
    d_attr: int = 1
    # ablation-only decoder variants
    qkv_ff: str = "none"
    extra_mha: bool = False

    def __post_init__(self):
        if self.d_h % self.heads:
            raise ConfigurationError(f"d_h={self.d_h} not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ConfigurationError("layers must be >= 1")
        if self.norm not in NORMS:
            raise ConfigurationError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.qkv_ff not in QK_FF:
            raise ConfigurationError(f"qkv_ff must be one of {QK_FF}, got {self.qkv_ff!r}")
        if self.logit_clip <= 0:
            raise ConfigurationError("logit_clip must be positive")
        if self.d_attr != 1:
            raise ConfigurationError("only d_attr=1 (remaining capacity) is supported for CVRP")

    @property
    def d_k(self) -> int:
        return self.d_h // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


_BASE = dict(use_idt=False, use_ff_query=False, use_dist_heuristic=False)
PRESETS: dict[str, dict] = {
    "pomo": dict(_BASE, norm="instance"),
    "pomo+idt": dict(_BASE, norm="instance", use_idt=True),
    "pomon": dict(_BASE, norm="none"),
    "pomon+idt": dict(_BASE, norm="none", use_idt=True),
    "pomon+ff": dict(_BASE, norm="none", use_ff_query=True),
    "pomon+idt+ff": dict(_BASE, norm="none", use_idt=True, use_ff_query=True),
    "pomon+ffqk": dict(_BASE, norm="none", qkv_ff="qk"),
    "pomon+ffqkv": dict(_BASE, norm="none", qkv_ff="qkv"),
    "pomon+mha": dict(_BASE, norm="none", extra_mha=True),
    "reld-no-idt-ff": dict(_BASE, norm="none", use_dist_heuristic=True),
    "reld": dict(norm="none", use_idt=True, use_ff_query=True, use_dist_heuristic=True),
}


def preset(name: str, **overrides) -> ModelConfig:
    """Named architecture rows, from POMO (instance norm, plain decoder) to ReLD."""
    row = PRESETS.get(name.lower())
    if row is None:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**row, **overrides})


def _ff_shapes(prefix, d_in, d_ff, d_out):
    return {
        f"{prefix}.W1": (d_in, d_ff),
        f"{prefix}.b1": (d_ff,),
        f"{prefix}.W2": (d_ff, d_out),
        f"{prefix}.b2": (d_out,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape table for every tensor the configuration needs."""
    d, f = cfg.d_h, cfg.d_ff
    shapes = {
        "enc.init.depot.W": (2, d),
        "enc.init.depot.b": (d,),
        "enc.init.node.W": (3, d),
        "enc.init.node.b": (d,),
    }
    for l in range(cfg.layers):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"enc.{l}.{w}"] = (d, d)
        shapes.update(_ff_shapes(f"enc.{l}.ff", d, f, d))
    dq = d + cfg.d_attr
    if cfg.qkv_ff == "none":
        shapes["dec.Wq"] = (dq, d)
    else:
        shapes.update(_ff_shapes("dec.qff", dq, f, d))
    if cfg.qkv_ff == "none":
        shapes["dec.Wk"] = (d, d)
    else:
        shapes.update(_ff_shapes("dec.kff", d, f, d))
    if cfg.qkv_ff == "qkv":
        shapes.update(_ff_shapes("dec.vff", d, f, d))
    else:
        shapes["dec.Wv"] = (d, d)
    shapes["dec.Wo"] = (d, d)
    if cfg.use_idt:
        shapes["dec.W_idt"] = (cfg.d_attr, d)
    if cfg.extra_mha:
        for w in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"dec.mha2.{w}"] = (d, d)
    if cfg.use_ff_query:
        shapes.update(_ff_shapes("dec.ff", d, f, d))
    return shapes


class ParamStore:
    """Named, shaped, differentiable parameters of one model."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(cfg)
        if set(expected) != set(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ShapeError(f"parameter names differ from config: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.cfg = cfg
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, part: str | None = None) -> list[str]:
        """All names, or only those of ``part`` ("encoder" / "decoder")."""
        if part is None:
            return list(self.tensors)
        prefix = {"encoder": "enc.", "decoder": "dec."}[part]
        return [n for n in self.tensors if n.startswith(prefix)]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        return ParamStore(
            self.cfg,
            {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.items()},
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.items()}

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> "ParamStore":
        return cls(
            cfg,
            {
                n: Tensor(np.ascontiguousarray(a, dtype=np.float64), requires_grad=True, name=n)
                for n, a in arrays.items()
            },
        )

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamStore:
    """Uniform(-1/sqrt(d_h), 1/sqrt(d_h)) for every tensor, in table order."""
    bound = 1.0 / math.sqrt(cfg.d_h)
    arrays = {
        name: rng.uniform(-bound, bound, size=shape) for name, shape in param_shapes(cfg).items()
    }
    return ParamStore.from_arrays(cfg, arrays)


# -- building blocks -----------------------------------------------------------


def linear(x, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = nx.matmul(x, W)
    return y if b is None else y + b


def feed_forward(x, p: ParamStore, prefix: str, outer_relu: bool = False) -> Tensor:
    hidden = nx.relu(linear(x, p[f"{prefix}.W1"], p[f"{prefix}.b1"]))
    out = linear(hidden, p[f"{prefix}.W2"], p[f"{prefix}.b2"])
    return nx.relu(out) if outer_relu else out


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, d) -> (..., heads, L, d / heads)."""
    *lead, length, d = x.shape
    x = x.reshape(*lead, length, heads, d // heads)
    n = len(lead)
    return x.transpose(*range(n), n + 1, n, n + 2)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, L, d_k) -> (..., L, heads * d_k)."""
    *lead, heads, length, dk = x.shape
    n = len(lead)
    x = x.transpose(*range(n), n + 1, n, n + 2)
    return x.reshape(*lead, length, heads * dk)


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over split heads; ``mask`` broadcasts to scores."""
    scores = nx.matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))
    attn = nx.softmax(scores * (1.0 / math.sqrt(q.shape[-1])), mask=mask)
    return nx.matmul(attn, v)


def _norm(x: Tensor, cfg: ModelConfig) -> Tensor:
    return nx.instance_norm(x, axis=-2) if cfg.norm == "instance" else x


# -- encoder ---------------------------------------------------------------------


class EncodeCounter:
    """Counts encoded instances (one per batch row), for instrumentation."""

    def __init__(self):
        self.instances = 0
        self.calls = 0

    def reset(self):
        self.instances = self.calls = 0


encode_counter = EncodeCounter()


@dataclass
class Embeddings:
    """Static per-instance quantities shared by every decoding step.

    ``H`` holds node embeddings (B, M, d_h); ``keys``/``values`` the per-head
    decoder projections (B, S, M, d_k); ``last_query`` the node-embedding part
    of the query projection, gathered by last node at each step.
    """

    H: Tensor
    H_T: Tensor
    keys: Tensor
    values: Tensor
    last_query: Tensor | None
    mha2_keys: Tensor | None
    mha2_values: Tensor | None
    coords: np.ndarray
    demands: np.ndarray
    dist: np.ndarray = field(repr=False)

    @property
    def batch(self) -> int:
        return self.H.shape[0]

    @property
    def nodes(self) -> int:
        return self.H.shape[1]

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for t in (self.H, self.keys, self.values):
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def _stack_features(instances: list[Instance]) -> np.ndarray:
    sizes = {inst.n for inst in instances}
    if len(sizes) != 1:
        raise ShapeError(f"batched instances must share one size, got sizes {sorted(sizes)}")
    return np.stack([node_features(inst) for inst in instances])


def encoder_forward(features: np.ndarray, p: ParamStore, cfg: ModelConfig) -> Tensor:
    """Static node embeddings (B, M, d_h) from features (B, M, 3)."""
    depot = linear(features[:, :1, :2], p["enc.init.depot.W"], p["enc.init.depot.b"])
    nodes = linear(features[:, 1:, :], p["enc.init.node.W"], p["enc.init.node.b"])
    h = nx.concat([depot, nodes], axis=1)
    for l in range(cfg.layers):
        q = split_heads(linear(h, p[f"enc.{l}.Wq"]), cfg.heads)
        k = split_heads(linear(h, p[f"enc.{l}.Wk"]), cfg.heads)
        v = split_heads(linear(h, p[f"enc.{l}.Wv"]), cfg.heads)
        mha = linear(merge_heads(attend(q, k, v)), p[f"enc.{l}.Wo"])
        h = _norm(h + mha, cfg)
        h = _norm(h + feed_forward(h, p, f"enc.{l}.ff"), cfg)
        if not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite activations after encoder layer {l}")
    return h


def encode_batch(instances: list[Instance], p: ParamStore, cfg: ModelConfig) -> Embeddings:
    """Encode instances of equal size; the decoder-side projections are cached too."""
    features = _stack_features(instances)
    H = encoder_forward(features, p, cfg)
    d = cfg.d_h
    if cfg.qkv_ff == "none":
        keys = linear(H, p["dec.Wk"])
        last_query = linear(H, p["dec.Wq"][:d])
    else:
        keys = feed_forward(H, p, "dec.kff")
        last_query = None
    values = feed_forward(H, p, "dec.vff") if cfg.qkv_ff == "qkv" else linear(H, p["dec.Wv"])
    m2k = m2v = None
    if cfg.extra_mha:
        m2k = split_heads(linear(H, p["dec.mha2.Wk"]), cfg.heads)
        m2v = split_heads(linear(H, p["dec.mha2.Wv"]), cfg.heads)
    coords = features[..., :2]
    dist = np.sqrt(((coords[:, :, None, :] - coords[:, None, :, :]) ** 2).sum(-1))
    encode_counter.calls += 1
    encode_counter.instances += len(instances)
    return Embeddings(
        H=H,
        H_T=H.transpose(0, 2, 1),
        keys=split_heads(keys, cfg.heads),
        values=split_heads(values, cfg.heads),
        last_query=last_query,
        mha2_keys=m2k,
        mha2_values=m2v,
        coords=coords,
        demands=features[..., 2],
        dist=dist,
    )


def encode(instance: Instance, p: ParamStore, cfg: ModelConfig) -> Embeddings:
    return encode_batch([instance], p, cfg)


# -- decoder ---------------------------------------------------------------------


@dataclass
class DecoderOutput:
    logits: Tensor  # clipped scores (B, K, M), before masking
    glimpse: Tensor  # attention output MHA(h_c, H_t, H_t), (B, K, d_h)
    query: Tensor  # final query q_c, (B, K, d_h)


def decoder_forward(
    emb: Embeddings,
    last: np.ndarray,
    remaining: np.ndarray,
    mask: np.ndarray,
    p: ParamStore,
    cfg: ModelConfig,
) -> DecoderOutput:
    """Score every node for each (instance, trajectory) pair.

    ``last`` (B, K) int, ``remaining`` (B, K) normalized capacity, ``mask``
    (B, K, M) feasible nodes. Attention runs over feasible nodes only.
    """
    d = cfg.d_h
    cap = remaining[..., None]
    h_last = nx.gather_rows(emb.H, last)
    if emb.last_query is not None:
        q = nx.gather_rows(emb.last_query, last) + cap * p["dec.Wq"][d:]
    else:
        q = feed_forward(nx.concat([h_last, Tensor(cap)], axis=-1), p, "dec.qff")
    q = split_heads(q, cfg.heads)  # (B, S, K, dk)
    att_mask = mask[:, None, :, :]
    glimpse = linear(merge_heads(attend(q, emb.keys, emb.values, att_mask)), p["dec.Wo"])
    h = glimpse
    if cfg.use_idt:
        h = h + h_last + cap * p["dec.W_idt"]
    if cfg.extra_mha:
        q2 = split_heads(linear(h, p["dec.mha2.Wq"]), cfg.heads)
        h = linear(merge_heads(attend(q2, emb.mha2_keys, emb.mha2_values, att_mask)), p["dec.mha2.Wo"])
    if cfg.use_ff_query:
        h = h + feed_forward(h, p, "dec.ff", outer_relu=True)
    scores = nx.matmul(h, emb.H_T) * (1.0 / math.sqrt(d))
    if cfg.use_dist_heuristic:
        b = np.arange(last.shape[0])[:, None]
        dist = emb.dist[b, last]
        scores = scores - np.log(np.maximum(dist, DIST_EPS))
    logits = nx.tanh_clip(scores, cfg.logit_clip)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite decoder logits")
    return DecoderOutput(logits, glimpse, h)


def decode_log_probs(emb, last, remaining, mask, p, cfg) -> Tensor:
    out = decoder_forward(emb, last, remaining, mask, p, cfg)
    return nx.log_softmax(out.logits, mask=mask)


def decode_step(
    emb: Embeddings,
    state: RolloutState,
    instance: Instance,
    p: ParamStore,
    cfg: ModelConfig,
    details: bool = False,
) -> np.ndarray | tuple[np.ndarray, DecoderOutput]:
    """Selection probability of every node (depot first) for one state.

    With ``details`` the raw :class:`DecoderOutput` is returned as well.
    """
    mask = feasible_mask(instance, state)
    if emb.nodes != instance.n + 1:
        raise ShapeError("embeddings do not belong to this instance")
    with nx.no_grad():
        out = decoder_forward(
            emb,
            np.array([[state.last_node]]),
            np.array([[state.remaining_capacity]], dtype=np.float64),
            mask[None, None],
            p,
            cfg,
        )
        probs = nx.softmax(out.logits, mask=mask[None, None])
    return (probs.data[0, 0], out) if details else probs.data[0, 0]


def with_flags(cfg: ModelConfig, **flags) -> ModelConfig:
    return replace(cfg, **flags)


MODEL_FIELDS = tuple(f.name for f in fields(ModelConfig))
