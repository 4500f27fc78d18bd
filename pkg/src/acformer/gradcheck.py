"""Central finite-difference verification of the analytic backward passes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .connector import (
    ConnectorConfig,
    GatherQueries,
    connector_backward,
    connector_forward,
    init_weights,
)
from .kernel import Rng
from .selector import select_anchors
from .synth import synthesize

# Denominator floor. Central differences at h=1e-5 carry ~1e-10 roundoff, and
# some gradients are exactly zero (key biases shift all scores of a query
# equally), so below this magnitude the check is effectively absolute.
REL_FLOOR = 1e-5

TINY_CONFIG = ConnectorConfig(
    layers=2, model_dim=16, heads=2, head_dim=8, ff_dim=32,
    out_dim=8, feature_dim=12, token_budget=4,
)


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def probe(
    loss: Callable[[], float],
    tensor: np.ndarray,
    index: tuple,
    h: float = 1e-5,
) -> float:
    """Central difference of ``loss`` w.r.t. ``tensor[index]``, restored afterwards."""
    old = tensor[index]
    tensor[index] = old + h
    up = loss()
    tensor[index] = old - h
    down = loss()
    tensor[index] = old
    return (up - down) / (2 * h)


@dataclass
class GradcheckReport:
    max_rel_err: float
    probes: int
    worst: str
    errors: list

    def to_dict(self) -> dict:
        return {"max_rel_err": self.max_rel_err, "probes": self.probes, "worst": self.worst}


def check_tensors(
    loss: Callable[[], float],
    tensors: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    n_probes: int,
    rng: Rng,
    h: float = 1e-5,
) -> GradcheckReport:
    """Probe ``n_probes`` scalars chosen uniformly over all entries of ``tensors``."""
    names = list(tensors)
    sizes = np.array([tensors[n].size for n in names], dtype=np.int64)
    flat = rng.integers(0, int(sizes.sum()), size=n_probes)
    bounds = np.cumsum(sizes)
    errors = []
    worst, worst_err = "", 0.0
    for f in flat:
        k = int(np.searchsorted(bounds, f, side="right"))
        name = names[k]
        offset = int(f - (bounds[k] - sizes[k]))
        idx = np.unravel_index(offset, tensors[name].shape)
        num = probe(loss, tensors[name], idx, h)
        err = rel_error(float(analytic[name][idx]), num)
        errors.append(err)
        if err >= worst_err:
            worst, worst_err = f"{name}{list(map(int, idx))}", err
    return GradcheckReport(max(errors, default=0.0), len(errors), worst, errors)


def connector_gradcheck(
    cfg: ConnectorConfig = TINY_CONFIG,
    n_tokens: int = 10,
    attn_heads: int = 2,
    n_probes: int = 300,
    feature_probes: int = 50,
    seed: int = 0,
    h: float = 1e-5,
) -> GradcheckReport:
    """Check the full AcFormer backward on random weights (no zero-initialized branches).

    The loss is a fixed random linear functional of the connector output.
    """
    s = synthesize(seed, n_tokens, cfg.feature_dim, attn_heads)
    features = s.features
    source = GatherQueries(select_anchors(s.attn, cfg.t_n))
    w = init_weights(cfg, seed + 1, std=0.3, zero_init_residual=False)
    rng = Rng(seed + 2)
    # nonzero biases and gains so their gradients are exercised too
    for name, t in w.items():
        if t.ndim == 1:
            w.tensors[name] = t + rng.normal(t.shape, 0.1)
    probe_weights = rng.normal((cfg.token_budget, cfg.out_dim))

    def loss() -> float:
        out, _ = connector_forward(features, cfg, w, source)
        return float((out * probe_weights).sum())

    _, cache = connector_forward(features, cfg, w, source)
    g = connector_backward(probe_weights, cache)
    report = check_tensors(loss, w.tensors, g.params, n_probes, rng, h)
    if feature_probes:
        fr = check_tensors(loss, {"features": features}, {"features": g.features}, feature_probes, rng, h)
        if fr.max_rel_err > report.max_rel_err:
            report.worst = fr.worst
        report.errors += fr.errors
        report.max_rel_err = max(report.max_rel_err, fr.max_rel_err)
        report.probes += fr.probes
    return report

