"""Feature-map PCA visualization, CLS attention heatmaps, anchor overlap.

Images are ``(g, g, 3)`` uint8 arrays with patch ``j`` at row ``j // g``,
column ``j % g``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DataError
from .kernel import as_matrix
from .selector import check_attention_map
from .tensorfile import atomic_write_bytes


@dataclass
class PcaProjection:
    components: np.ndarray          # (3, D), orthonormal unless degenerate
    projected: np.ndarray           # (n, 3) scores
    explained_variance: np.ndarray  # (3,), descending
    degenerate: bool = False


def pca3(patches) -> PcaProjection:
    """Top-3 principal components of patch rows (pass the map without [CLS]).

    Variances use the ``n - 1`` normalization. Each component's
    largest-magnitude coordinate is made positive. Directions with no
    variance are returned as zero vectors and set ``degenerate``.
    """
    x = as_matrix(patches, "patches")
    n, d = x.shape
    if n < 3 or d < 3:
        raise DataError(f"pca3 needs at least 3 rows and 3 columns, got {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("pca3 input contains non-finite values")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = np.zeros(3)
    k = min(3, s.size)
    var[:k] = s[:k] ** 2 / (n - 1)
    comps = np.zeros((3, d))
    comps[:k] = vt[:k]

    scale = float(np.abs(x).max())
    tol = max(1e-12 * var[0], (1e-9 * scale) ** 2)
    live = var > tol
    degenerate = not live.all()
    var[~live] = 0.0
    comps[~live] = 0.0
    for i in np.flatnonzero(live):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    return PcaProjection(comps, centered @ comps.T, var, degenerate)


def _grid_side(n: int) -> int:
    g = math.isqrt(n)
    if g * g != n:
        raise DataError(f"{n} patch tokens do not form a square grid")
    return g


def normalize_channel(values) -> np.ndarray:
    """Min-max to 0..255, rounding half up; a constant channel maps to 0."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.floor((v - lo) / (hi - lo) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def render_feature_rgb(p: PcaProjection) -> np.ndarray:
    n = p.projected.shape[0]
    g = _grid_side(n)
    channels = [normalize_channel(p.projected[:, c]) for c in range(3)]
    return np.stack(channels, axis=1).reshape(g, g, 3)


def render_attention_heatmap(attn, head: int | str = "mean") -> np.ndarray:
    """Grayscale heatmap of one head's CLS row, or of the head-mean row."""
    a = check_attention_map(attn)
    if head == "mean":
        row = a.mean(axis=0)
    else:
        if isinstance(head, bool) or not isinstance(head, (int, np.integer)):
            raise DataError(f"head must be an index or 'mean', got {head!r}")
        if not 0 <= head < a.shape[0]:
            raise DataError(f"head {head} out of range for {a.shape[0]} heads")
        row = a[head]
    g = _grid_side(row.size)
    gray = normalize_channel(row).reshape(g, g)
    return np.repeat(gray[:, :, None], 3, axis=2)


def encode_ppm(image, comment: str = "", scale: int = 1) -> bytes:
    """Binary P6 with an optional one-line comment; ``scale`` repeats pixels."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"PPM image must be (h, w, 3), got {img.shape}")
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w, _ = img.shape
    header = "P6\n"
    if comment:
        header += "# " + comment.replace("\n", " ") + "\n"
    header += f"{w} {h}\n255\n"
    return header.encode("ascii") + np.ascontiguousarray(img).tobytes()


def decode_ppm(blob: bytes) -> tuple[np.ndarray, str]:
    """Inverse of :func:`encode_ppm` for its own output; returns ``(image, comment)``."""
    lines = blob.split(b"\n", 4)
    if lines[0] != b"P6":
        raise DataError("not a binary PPM")
    comment = ""
    if lines[1].startswith(b"#"):
        comment = lines[1][1:].strip().decode("ascii")
        dims, maxval, data = lines[2], lines[3], lines[4]
    else:
        dims, maxval = lines[1], lines[2]
        data = blob.split(b"\n", 3)[3]
    w, h = (int(t) for t in dims.split())
    if maxval != b"255":
        raise DataError("only 8-bit PPM is supported")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3), comment


def write_ppm(path, image, source_hash: str = "", scale: int = 1) -> None:
    comment = f"source-sha256 {source_hash}" if source_hash else ""
    atomic_write_bytes(path, encode_ppm(image, comment, scale))


def _top_k(scores: np.ndarray, k: int) -> set[int]:
    if not 0 < k <= scores.size:
        raise DataError(f"top-k needs 0 < k <= {scores.size}, got {k}")
    order = np.argsort(-scores, kind="stable")[:k]
    return {int(j) + 1 for j in order}


def activated_tokens(p: PcaProjection, k: int) -> set[int]:
    """Sequence indices of the ``k`` patches with the largest PCA-score norm."""
    return _top_k(np.linalg.norm(p.projected, axis=1), k)


def salient_tokens(attn, k: int) -> set[int]:
    """Sequence indices of the ``k`` patches with the largest head-mean CLS attention."""
    return _top_k(check_attention_map(attn).mean(axis=0), k)


def overlap_ratio(activated: Iterable[int], salient: Iterable[int]) -> float:
    """``|A & B| / |A|``."""
    a, b = set(activated), set(salient)
    if not a:
        raise DataError("overlap ratio is undefined for an empty activated set")
    return len(a & b) / len(a)


def anchor_overlap(features, attn, k: int) -> dict:
    """Overlap between PCA-activated patches and CLS-salient patches."""
    f = as_matrix(features, "features")
    a = check_attention_map(attn)
    if a.shape[1] != f.shape[0] - 1:
        raise DataError(f"attention covers {a.shape[1]} patches, features have {f.shape[0] - 1}")
    act = activated_tokens(pca3(f[1:]), k)
    sal = salient_tokens(a, k)
    return {
        "k": k,
        "ratio": overlap_ratio(act, sal),
        "activated": sorted(act),
        "salient": sorted(sal),
    }
