"""Anchor Former connector: adapter, cross-attention aggregation stack, projector.

Data flow for one image with ``N`` feature rows of width ``feature_dim``::

    features --adapter--> adapted (N x model_dim)
    queries  = adapted rows at the selected anchors        (T x model_dim)
    for each layer:
        a_out = q + Attn(LN1(q), LN1(adapted), LN1(adapted))
        q     = a_out + FF(LN2(a_out))
    out = Proj(q)                                           (T x out_dim)

The same adapter feeds both queries and keys/values, and no positional
encoding enters the stack, so it is blind to key/value row order.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kernel as K
from .errors import ConfigError, DataError, NumericError, ShapeError, UsageError
from .selector import select_anchors

VARIANTS = (
    "acformer",
    "pr",
    "pooling",
    "pooling_pr",
    "random_pr",
    "top_p_direct",
    "evit_direct",
)

CHECKPOINT_MAGIC = b"ACFW"
CHECKPOINT_VERSION = 1


@dataclass
class ConnectorConfig:
    """Connector hyperparameters. Defaults are the full-size setup.

    ``token_budget`` counts the [CLS] anchor, so 145 means 144 selected
    visual tokens plus [CLS].
    """

    layers: int = 6
    model_dim: int = 512
    heads: int = 8
    head_dim: int = 64
    ff_dim: int = 2048
    out_dim: int = 4096
    feature_dim: int = 1024
    token_budget: int = 145
    variant: str = "acformer"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("model_dim", "heads", "head_dim", "ff_dim", "out_dim", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.heads * self.head_dim != self.model_dim:
            raise ConfigError(
                f"heads x head_dim = {self.heads} x {self.head_dim} != model_dim {self.model_dim}"
            )
        if self.token_budget < 1:
            raise ConfigError(f"token_budget must be >= 1, got {self.token_budget}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown connector variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def t_n(self) -> int:
        return self.token_budget - 1

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- weights


def expected_shapes(cfg: ConnectorConfig, with_bank: bool | None = None) -> dict[str, tuple]:
    """Parameter name -> shape, in canonical (initialization and file) order."""
    dm, ff = cfg.model_dim, cfg.ff_dim
    shapes: dict[str, tuple] = {
        "adapter.w": (cfg.feature_dim, dm),
        "adapter.b": (dm,),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gain"] = (dm,)
        shapes[p + "ln1.bias"] = (dm,)
        for m in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{m}"] = (dm, dm)
            shapes[p + f"attn.b{m}"] = (dm,)
        shapes[p + "ln2.gain"] = (dm,)
        shapes[p + "ln2.bias"] = (dm,)
        shapes[p + "ff.w1"] = (dm, ff)
        shapes[p + "ff.b1"] = (ff,)
        shapes[p + "ff.w2"] = (ff, dm)
        shapes[p + "ff.b2"] = (dm,)
    shapes["proj.w1"] = (dm, cfg.out_dim)
    shapes["proj.b1"] = (cfg.out_dim,)
    shapes["proj.w2"] = (cfg.out_dim, cfg.out_dim)
    shapes["proj.b2"] = (cfg.out_dim,)
    if with_bank is None:
        with_bank = cfg.variant == "pr"
    if with_bank:
        shapes["queries"] = (cfg.token_budget, dm)
    return shapes


class AggregatorWeights:
    """Named float64 parameter tensors of one connector."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = {name: np.asarray(t, dtype=np.float64) for name, t in tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "AggregatorWeights":
        return AggregatorWeights({k: v.copy() for k, v in self.tensors.items()})

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def check(self, cfg: ConnectorConfig, with_bank: bool | None = None) -> None:
        """Raise ShapeError if any required tensor is missing or misshapen."""
        for name, shape in expected_shapes(cfg, with_bank).items():
            if name not in self.tensors:
                raise ShapeError(f"weights are missing tensor {name!r}")
            if self.tensors[name].shape != shape:
                raise ShapeError(
                    f"tensor {name!r} has shape {self.tensors[name].shape}, config needs {shape}"
                )

    def save(self, path) -> None:
        save_weights(self, path)

    @classmethod
    def load(cls, path) -> "AggregatorWeights":
        return load_weights(path)


def init_weights(
    cfg: ConnectorConfig,
    seed: int = 0,
    *,
    std: float = 0.02,
    zero_init_residual: bool = True,
    with_bank: bool | None = None,
) -> AggregatorWeights:
    """Truncated-normal matrices, unit LN gains, zero biases.

    With ``zero_init_residual`` the attention output projection and the
    second feedforward layer start at zero, making every layer an identity.
    """
    rng = K.Rng(seed)
    tensors = {}
    for name, shape in expected_shapes(cfg, with_bank).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            t = np.ones(shape)
        elif len(shape) == 1:
            t = np.zeros(shape)
        else:
            t = rng.trunc_normal(shape, std)
            if zero_init_residual and (name.endswith("attn.wo") or name.endswith("ff.w2")):
                t = np.zeros(shape)
        tensors[name] = t
    return AggregatorWeights(tensors)


def encode_weights(w: AggregatorWeights) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, t in w.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_weights(blob: bytes) -> AggregatorWeights:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError("not an ACFW checkpoint (bad magic)")
    if len(blob) < 8:
        raise DataError("truncated ACFW header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported ACFW version {version}")
    pos = 8
    tensors = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(dims, dtype=np.int64))
            end = pos + 8 * count
            if end > len(blob):
                raise DataError(f"ACFW record {name!r} is truncated")
            tensors[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise DataError(f"corrupt ACFW checkpoint: {exc}") from None
    return AggregatorWeights(tensors)


def save_weights(w: AggregatorWeights, path) -> None:
    from .tensorfile import atomic_write_bytes

    atomic_write_bytes(path, encode_weights(w))


def load_weights(path) -> AggregatorWeights:
    return decode_weights(Path(path).read_bytes())


# ---------------------------------------------------------------- query sources


class GatherQueries:
    """Queries are rows of the adapted feature map at fixed indices."""

    def __init__(self, indices: Sequence[int]):
        self.indices = np.asarray(indices, dtype=np.int64)

    def build(self, adapted: np.ndarray, w: AggregatorWeights) -> np.ndarray:
        if self.indices.size == 0 or self.indices.min() < 0 or self.indices.max() >= adapted.shape[0]:
            raise DataError(f"query index out of range for {adapted.shape[0]} feature rows")
        return adapted[self.indices]

    def backward(self, dq, d_adapted, grads) -> None:
        np.add.at(d_adapted, self.indices, dq)


class BankQueries:
    """Learnable query bank stored in the weights under ``queries``."""

    def build(self, adapted: np.ndarray, w: AggregatorWeights) -> np.ndarray:
        if "queries" not in w:
            raise ShapeError("weights have no 'queries' bank; initialize with with_bank=True")
        q = w["queries"]
        if q.shape[1] != adapted.shape[1]:
            raise ShapeError(f"query bank {q.shape} does not match model width {adapted.shape[1]}")
        return q

    def backward(self, dq, d_adapted, grads) -> None:
        grads["queries"] = grads["queries"] + dq


# ---------------------------------------------------------------- stack


def aggregator_layer_forward(ia, rv, lw: dict, heads: int, eps: float = K.LN_EPS):
    """One pre-LN cross-attention + feedforward block. ``lw`` uses short names."""
    ia = K.as_matrix(ia, "ia")
    rv = K.as_matrix(rv, "rv")
    if ia.shape[1] != rv.shape[1]:
        raise ShapeError(f"queries {ia.shape} and keys/values {rv.shape} differ in width")
    qn, c_lnq = K.layer_norm_forward(ia, lw["ln1.gain"], lw["ln1.bias"], eps)
    kvn, c_lnkv = K.layer_norm_forward(rv, lw["ln1.gain"], lw["ln1.bias"], eps)
    att, c_att = K.mh_cross_attention_forward(
        qn, kvn, kvn, K.AttentionParams.from_dict(lw, "attn."), heads
    )
    a_out = ia + att
    fn, c_ln2 = K.layer_norm_forward(a_out, lw["ln2.gain"], lw["ln2.bias"], eps)
    ff, c_ff = K.feedforward_forward(fn, lw["ff.w1"], lw["ff.b1"], lw["ff.w2"], lw["ff.b2"])
    return a_out + ff, (c_lnq, c_lnkv, c_att, c_ln2, c_ff)


def aggregator_layer_backward(dh, cache):
    """Returns ``(d_ia, d_rv, grads)`` with short-name grads."""
    if cache is None:
        raise UsageError("aggregator_layer_backward called without a forward cache")
    c_lnq, c_lnkv, c_att, c_ln2, c_ff = cache
    dfn, gff = K.feedforward_backward(dh, c_ff)
    d_ln2, dg2, db2 = K.layer_norm_backward(dfn, c_ln2)
    d_aout = dh + d_ln2
    dqn, dk, dv, gatt = K.mh_cross_attention_backward(d_aout, c_att)
    d_q, dg1q, db1q = K.layer_norm_backward(dqn, c_lnq)
    d_rv, dg1kv, db1kv = K.layer_norm_backward(dk + dv, c_lnkv)
    grads = {
        "ln1.gain": dg1q + dg1kv,
        "ln1.bias": db1q + db1kv,
        "ln2.gain": dg2,
        "ln2.bias": db2,
    }
    grads.update({"attn." + k: v for k, v in gatt.items()})
    grads.update({"ff." + k: v for k, v in gff.items()})
    return d_aout + d_q, d_rv, grads


def aggregator_layer(ia, rv, lw: dict, heads: int) -> np.ndarray:
    return aggregator_layer_forward(ia, rv, lw, heads)[0]


@dataclass
class ForwardCache:
    source: object
    adapter: tuple
    adapted_shape: tuple
    layers: list
    proj: tuple
    weight_names: list
    weight_shapes: dict
    anchors: list | None = None


@dataclass
class Gradients:
    """Parameter gradients plus the gradient w.r.t. the input feature map.

    ``features`` is the sum of ``features_query`` (through the query source)
    and ``features_kv`` (through the key/value path).
    """

    params: dict
    features: np.ndarray
    features_query: np.ndarray
    features_kv: np.ndarray


def _check_features(features, cfg: ConnectorConfig) -> np.ndarray:
    x = K.as_matrix(features, "features")
    if x.shape[0] < 2:
        raise DataError(f"feature map needs [CLS] plus at least one patch, got {x.shape[0]} rows")
    if x.shape[1] != cfg.feature_dim:
        raise ShapeError(f"feature width {x.shape[1]} != config feature_dim {cfg.feature_dim}")
    if not np.isfinite(x).all():
        raise DataError("feature map contains non-finite values")
    return x


def connector_forward(features, cfg: ConnectorConfig, w: AggregatorWeights, source):
    """Shared adapter -> queries -> stack -> Proj path. Returns ``(out, cache)``."""
    x = _check_features(features, cfg)
    adapted, c_ad = K.linear_forward(x, w["adapter.w"], w["adapter.b"])
    q = source.build(adapted, w)
    layer_caches = []
    for i in range(cfg.layers):
        q, c = aggregator_layer_forward(q, adapted, w.group(f"layers.{i}."), cfg.heads)
        layer_caches.append(c)
    out, c_proj = K.feedforward_forward(q, w["proj.w1"], w["proj.b1"], w["proj.w2"], w["proj.b2"])
    cache = ForwardCache(
        source=source,
        adapter=c_ad,
        adapted_shape=adapted.shape,
        layers=layer_caches,
        proj=c_proj,
        weight_names=list(w.tensors),
        weight_shapes={k: v.shape for k, v in w.items()},
    )
    return out, cache


def connector_backward(dout, cache: ForwardCache) -> Gradients:
    if cache is None:
        raise UsageError("connector_backward called without a forward cache")
    dout = K.as_matrix(dout, "dout")
    grads = {name: np.zeros(cache.weight_shapes[name]) for name in cache.weight_names}
    dq, gproj = K.feedforward_backward(dout, cache.proj)
    for k, v in gproj.items():
        grads["proj." + k] = v
    d_kv = np.zeros(cache.adapted_shape)
    for i in reversed(range(len(cache.layers))):
        dq, d_rv, g = aggregator_layer_backward(dq, cache.layers[i])
        d_kv += d_rv
        for k, v in g.items():
            grads[f"layers.{i}.{k}"] = v
    d_query = np.zeros(cache.adapted_shape)
    cache.source.backward(dq, d_query, grads)
    dx, dwa, dba = K.linear_backward(d_kv + d_query, cache.adapter)
    grads["adapter.w"] = dwa
    grads["adapter.b"] = dba
    wa = cache.adapter[1]
    return Gradients(
        params=grads,
        features=dx,
        features_query=d_query @ wa.T,
        features_kv=d_kv @ wa.T,
    )


# ---------------------------------------------------------------- acformer


def _require_variant(cfg: ConnectorConfig, *allowed: str) -> None:
    if cfg.variant not in allowed:
        raise ConfigError(f"config variant {cfg.variant!r} used where {allowed} is required")


def check_pair(features, attn) -> np.ndarray:
    """Feature map as float64, after checking it matches the attention map's patch count."""
    x = K.as_matrix(features, "features")
    a = np.asarray(attn)
    if a.ndim != 2 or a.shape[1] != x.shape[0] - 1:
        raise ShapeError(
            f"attention map {a.shape} does not cover the {x.shape[0] - 1} patches of features {x.shape}"
        )
    return x


def acformer_forward_cached(features, attn, cfg: ConnectorConfig, w: AggregatorWeights):
    _require_variant(cfg, "acformer")
    x = check_pair(features, attn)
    anchors = select_anchors(attn, cfg.t_n)
    out, cache = connector_forward(x, cfg, w, GatherQueries(anchors))
    cache.anchors = anchors
    return out, cache


def acformer_forward(features, attn, cfg: ConnectorConfig, w: AggregatorWeights) -> np.ndarray:
    """Select anchors from ``attn`` and run the full connector; ``(token_budget, out_dim)``."""
    return acformer_forward_cached(features, attn, cfg, w)[0]


def acformer_backward(dout, cache: ForwardCache) -> Gradients:
    """Selection is discrete; gradients reach the selected rows via gather."""
    return connector_backward(dout, cache)


@dataclass
class MultimodalInput:
    visual: np.ndarray
    text: np.ndarray
    concatenated: np.ndarray

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.visual.shape[0]
        return self.concatenated[:n], self.concatenated[n:]


def build_lm_input(visual, text) -> MultimodalInput:
    """Visual rows first, then text rows."""
    visual = K.as_matrix(visual, "visual")
    text = np.asarray(text, dtype=np.float64)
    if text.size == 0 and text.ndim != 2:
        # bare [] means "no text rows"
        text = text.reshape(0, visual.shape[1])
    text = K.as_matrix(text, "text")
    if visual.shape[1] != text.shape[1]:
        raise ShapeError(f"visual width {visual.shape[1]} != text width {text.shape[1]}")
    return MultimodalInput(visual, text, np.concatenate([visual, text], axis=0))


# ---------------------------------------------------------------- toy training


@dataclass
class ToySample:
    features: np.ndarray
    attn: np.ndarray
    target: np.ndarray
    anchors: list = field(default_factory=list)


def make_toy_dataset(
    cfg: ConnectorConfig, n_samples: int, n_tokens: int, heads: int, seed: int
) -> list[ToySample]:
    """Planted-anchor images whose target is a fixed linear map of the anchor-row mean."""
    from .synth import synthesize

    rng = K.Rng(seed)
    mix = rng.normal((cfg.feature_dim, cfg.out_dim), 1.0 / np.sqrt(cfg.feature_dim))
    samples = []
    for i in range(n_samples):
        s = synthesize(
            seed * 1_000_003 + i, n_tokens, cfg.feature_dim, heads,
            structure="planted", n_planted=cfg.t_n,
        )
        anchors = [0] + [j + 1 for j in s.planted]
        target = s.features[anchors].mean(axis=0) @ mix
        samples.append(ToySample(s.features, s.attn, target, anchors))
    return samples


# calibrated on the tiny config: 500 steps reach >= 24x loss reduction on seeds 0-4
TOY_LR = 0.3


@dataclass
class TrainResult:
    losses: list[float]
    weights: AggregatorWeights


def _toy_source(cfg: ConnectorConfig, attn):
    if cfg.variant == "acformer":
        return GatherQueries(select_anchors(attn, cfg.t_n))
    if cfg.variant == "pr":
        return BankQueries()
    raise ConfigError(f"toy_train supports 'acformer' and 'pr', not {cfg.variant!r}")


def toy_loss_and_grads(cfg, w, data, sources, want_grads=True):
    """Mean over samples of MSE(mean of output rows, target)."""
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in w.items()} if want_grads else None
    n = len(data)
    for sample, src in zip(data, sources):
        out, cache = connector_forward(sample.features, cfg, w, src)
        err = out.mean(axis=0) - sample.target
        total += float(np.mean(err * err)) / n
        if want_grads:
            dout = np.broadcast_to(2.0 * err / (err.size * out.shape[0] * n), out.shape)
            g = connector_backward(dout, cache).params
            for k in grads:
                grads[k] += g[k]
    return total, grads


def toy_train(
    cfg: ConnectorConfig,
    data: Sequence[ToySample],
    steps: int,
    lr: float,
    seed: int = 0,
    weights: AggregatorWeights | None = None,
) -> TrainResult:
    """Full-batch SGD. ``losses`` has ``steps + 1`` entries (initial, then after each step)."""
    if not data:
        raise DataError("toy_train needs at least one sample")
    w = init_weights(cfg, seed) if weights is None else weights.copy()
    sources = [_toy_source(cfg, s.attn) for s in data]
    losses = []
    for step in range(steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = toy_loss_and_grads(cfg, w, data, sources, want_grads=step < steps)
        if not np.isfinite(loss):
            raise NumericError(f"toy_train: loss became non-finite at step {step} (lr={lr})")
        losses.append(loss)
        if step < steps:
            for k, g in grads.items():
                w.tensors[k] = w.tensors[k] - lr * g
    return TrainResult(losses, w)
