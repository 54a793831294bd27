"""Member-to-member attention statistics and intervention probes.

The primitive record is an [N, N] matrix of attention mass between group
members at one (layer, step): entry (i, j) is the total softmax weight
from image i's query patches onto image j's key patches, averaged over
heads and normalized by the per-image patch count so every row sums to 1.

From those records come the per-image cross-attention mass (everything
off-diagonal in row i), its mean and max, and the concentration score

    s_cross = (max - mean) / max

which is 0 for evenly spread cross attention (and, degenerately, always 0
for two-member groups, where the off-diagonal set has a single element)
and approaches 1 when one neighbour dominates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .constants import ATTN_ROW_SUM_TOL
from .errors import DimensionError, ValidationError


@dataclass
class AttentionBlockSums:
    layer: int
    step: int
    matrix: np.ndarray  # [N, N], rows sum to 1


@dataclass
class CrossSampleStats:
    image: int
    p_self: float
    cross_mean: float
    cross_max: float
    s_cross: float | None  # None when the group has a single member


def block_sums(weights: np.ndarray, n: int, l: int) -> np.ndarray:
    """Collapse token-level attention weights into the [N, N] member matrix.

    weights: [T, T] or [heads, T, T] with T = n*l, rows softmax-normalized.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    if w.ndim != 3 or w.shape[-1] != w.shape[-2] or w.shape[-1] != n * l:
        raise DimensionError(f"weights shape {weights.shape} does not match N={n}, L={l}")
    rows = w.sum(axis=-1)
    if not np.allclose(rows, 1.0, atol=ATTN_ROW_SUM_TOL * 10):
        raise ValidationError("attention rows are not stochastic")
    heads = w.shape[0]
    return w.reshape(heads, n, l, n, l).sum(axis=(2, 4)).mean(axis=0) / l


def cross_stats(matrix: np.ndarray) -> list[CrossSampleStats]:
    """Per-image cross-attention statistics from one [N, N] matrix."""
    b = np.asarray(matrix, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise DimensionError(f"expected a square matrix, got {b.shape}")
    n = b.shape[0]
    out = []
    for i in range(n):
        cross = np.delete(b[i], i)
        if n < 2:
            out.append(CrossSampleStats(image=i, p_self=float(b[i, i]),
                                        cross_mean=0.0, cross_max=0.0, s_cross=None))
            continue
        c_mean = float(cross.mean())
        c_max = float(cross.max())
        s = 0.0 if c_max == 0.0 else (c_max - c_mean) / c_max
        out.append(CrossSampleStats(image=i, p_self=float(b[i, i]),
                                    cross_mean=c_mean, cross_max=c_max, s_cross=float(s)))
    return out


def aggregate_s_cross(records: list[AttentionBlockSums], level: str = "image",
                      per_step: bool = False) -> float:
    """One scalar concentration score for a whole run.

    Default convention: average the matrices over every captured layer and
    step first, then score. ``per_step`` instead scores each step's
    layer-averaged matrix and averages the scores. ``level`` selects
    per-image scoring averaged over images ("image") or scoring of the
    pooled off-diagonal entries ("group").
    """
    if not records:
        raise ValidationError("no attention records captured")
    if level not in ("image", "group"):
        raise ValidationError("level must be 'image' or 'group'")
    n = records[0].matrix.shape[0]
    if n < 2:
        raise ValidationError("s_cross needs at least two group members")

    def score(mat: np.ndarray) -> float:
        if level == "image":
            vals = [st.s_cross for st in cross_stats(mat)]
            return float(np.mean(vals))
        off = mat[~np.eye(n, dtype=bool)]
        m = off.max()
        return 0.0 if m == 0.0 else float((m - off.mean()) / m)

    if not per_step:
        return score(np.mean([r.matrix for r in records], axis=0))
    steps = sorted({r.step for r in records})
    per = [score(np.mean([r.matrix for r in records if r.step == s], axis=0)) for s in steps]
    return float(np.mean(per))


def step_profile(trace) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-step curves of mean and max cross-attention mass.

    Accepts a SampleTrace (or anything with .block_sums). Matrices are
    averaged over layers within each step; the statistics are averaged
    over images. Returns (step_indices, cross_mean_curve, cross_max_curve).
    """
    records = trace.block_sums if hasattr(trace, "block_sums") else list(trace)
    if not records:
        raise ValidationError("trace has no captured attention records")
    steps = sorted({r.step for r in records})
    means, maxes = [], []
    for s in steps:
        mat = np.mean([r.matrix for r in records if r.step == s], axis=0)
        stats = cross_stats(mat)
        means.append(np.mean([st.cross_mean for st in stats]))
        maxes.append(np.mean([st.cross_max for st in stats]))
    return np.array(steps), np.array(means), np.array(maxes)


def fid_correlation(pairs: list[tuple[float, float]]) -> float:
    """Textbook Pearson correlation between score/quality pairs."""
    if len(pairs) < 3:
        raise ValidationError("need at least 3 pairs")
    xs = np.array([p[0] for p in pairs], dtype=np.float64)
    ys = np.array([p[1] for p in pairs], dtype=np.float64)
    xd = xs - xs.mean()
    yd = ys - ys.mean()
    vx = (xd * xd).sum()
    vy = (yd * yd).sum()
    if vx == 0.0 or vy == 0.0:
        raise ValidationError("degenerate variance in correlation input")
    return float((xd * yd).sum() / np.sqrt(vx * vy))


@dataclass
class CrossConditionResult:
    attention_received: np.ndarray  # [N], anchor-row attention mass per member
    ranking: list[int]              # non-anchor members, most-attended first
    deltas: dict[int, float]        # replaced member -> anchor-image L2 change
    reference_images: np.ndarray


def cross_condition_probe(model, schedule, plan, new_class: int,
                          require_trained: bool = True) -> CrossConditionResult:
    """Replace one member's condition and measure the anchor's sensitivity.

    Generates the reference group (with attention capture), ranks the
    other members by the attention the anchor pays them, then re-generates
    once per member with only that member's label switched to new_class
    (identical noise streams) and records the L2 change of the anchor
    image.
    """
    from .sampler import generate  # local import; sampler depends on this module

    cfg = model.config
    if plan.group_size < 3:
        raise ValidationError("cross-condition probe needs group_size >= 3")
    if not 0 <= new_class < cfg.num_classes:
        raise ValidationError(f"new_class {new_class} outside [0, {cfg.num_classes})")
    if new_class == plan.label:
        raise ValidationError("new_class must differ from the plan label")
    if require_trained and not model.meta.get("iterations", 0):
        raise ValidationError("probe on an untrained model is meaningless "
                              "(pass require_trained=False to override)")
    ref_plan = replace(plan, capture=True, member_labels=None)
    ref = generate(model, schedule, ref_plan)
    mean_matrix = np.mean([r.matrix for r in ref.block_sums], axis=0)
    received = mean_matrix[0]
    ranking = sorted(range(1, plan.group_size), key=lambda j: received[j], reverse=True)
    anchor_ref = ref.images[0]
    deltas: dict[int, float] = {}
    base_labels = [plan.label] * plan.group_size
    for member in range(plan.group_size):
        labels = list(base_labels)
        labels[member] = new_class
        alt_plan = replace(plan, capture=False, member_labels=tuple(labels))
        alt = generate(model, schedule, alt_plan)
        deltas[member] = float(np.linalg.norm(alt.images[0] - anchor_ref))
    return CrossConditionResult(attention_received=received, ranking=ranking,
                                deltas=deltas, reference_images=ref.images)
