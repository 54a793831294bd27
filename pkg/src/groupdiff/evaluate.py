"""Generation-quality proxy, representation probe, and guidance sweep.

Quality is the squared Frechet distance between Gaussians fitted on toy
encoder features of a generated set and a reference set. The matrix
square root is taken by eigendecomposition of the symmetrized product
sqrt(A) B sqrt(A); eigenvalues slightly below zero (within PSD_EIG_TOL)
are clamped, anything worse is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .constants import PSD_EIG_TOL
from .data import FEATURE_DIM, ToyDataset, encode
from .diffusion import NoiseSchedule, forward_noising, to_signed
from .errors import DimensionError, ValidationError
from .model import DenoiserModel
from .sampler import SamplerPlan, generate
from .tensor import no_grad


@dataclass
class FeatureGaussian:
    mean: np.ndarray   # [F]
    cov: np.ndarray    # [F, F]
    count: int

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureGaussian":
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValidationError("need a [n >= 2, F] feature matrix")
        mean = feats.mean(axis=0)
        centered = feats - mean
        cov = centered.T @ centered / feats.shape[0]
        return cls(mean=mean, cov=cov, count=feats.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -PSD_EIG_TOL:
        raise ValidationError(f"matrix is not PSD (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureGaussian, b: FeatureGaussian) -> float:
    """Squared Frechet distance between two Gaussians.

    |mu_a - mu_b|^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2}); symmetric,
    zero iff the Gaussians coincide.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionError("feature dimensions differ")
    diff = a.mean - b.mean
    sq_a = _psd_sqrt(a.cov)
    inner = sq_a @ b.cov @ sq_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if vals.min() < -PSD_EIG_TOL:
        raise ValidationError("cross-covariance product is not PSD")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    d2 = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


def fid_proxy(generated: np.ndarray, reference: np.ndarray, encoder=encode) -> float:
    """Frechet distance between encoder-feature Gaussians of two image sets."""
    gen = np.asarray(generated)
    ref = np.asarray(reference)
    for name, batch in (("generated", gen), ("reference", ref)):
        if batch.ndim != 4:
            raise DimensionError(f"{name} set must be [n, H, W, 3]")
        if batch.shape[0] < FEATURE_DIM + 1:
            raise ValidationError(
                f"{name} set has {batch.shape[0]} images, need >= {FEATURE_DIM + 1}")
    g = FeatureGaussian.fit(np.stack([encoder(im) for im in gen]))
    r = FeatureGaussian.fit(np.stack([encoder(im) for im in ref]))
    return frechet_distance(g, r)


# -- linear probe --------------------------------------------------------------

@dataclass
class ProbeResult:
    layer: int
    accuracy: float
    train_size: int
    test_size: int


def fit_linear_probe(features: np.ndarray, labels: np.ndarray,
                     rng: np.random.Generator, train_frac: float = 0.5,
                     ridge: float = 1e-3) -> ProbeResult:
    """Closed-form ridge classifier on given features; held-out accuracy."""
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValidationError("probe needs at least two classes")
    n = feats.shape[0]
    order = rng.permutation(n)
    n_train = max(int(round(n * train_frac)), len(classes))
    train, test = order[:n_train], order[n_train:]
    if len(test) == 0:
        raise ValidationError("probe split left no test samples")
    x_tr = np.concatenate([feats[train], np.ones((len(train), 1))], axis=1)
    x_te = np.concatenate([feats[test], np.ones((len(test), 1))], axis=1)
    y = np.zeros((len(train), len(classes)))
    class_pos = {int(c): j for j, c in enumerate(classes)}
    for row, lab in enumerate(labels[train]):
        y[row, class_pos[int(lab)]] = 1.0
    gram = x_tr.T @ x_tr + ridge * np.eye(x_tr.shape[1])
    w = np.linalg.solve(gram, x_tr.T @ y)
    pred = classes[np.argmax(x_te @ w, axis=1)]
    acc = float(np.mean(pred == labels[test]))
    return ProbeResult(layer=-1, accuracy=acc, train_size=len(train), test_size=len(test))


def linear_probe(model: DenoiserModel, layer: int, dataset: ToyDataset,
                 schedule: NoiseSchedule, noise_time: float = 0.5,
                 seed: int = 0, batch: int = 64) -> ProbeResult:
    """Accuracy of a ridge classifier on pooled mid-layer denoiser features.

    Images are noised to the level at normalized time ``noise_time`` and
    passed through unconditionally (null class), one member per group, so
    no label information leaks into the features.
    """
    cfg = model.config
    labels = dataset.labels()
    if len(np.unique(labels)) < 2:
        raise ValidationError("probe needs a multi-class dataset")
    rng = np.random.default_rng(seed)
    level = int(round(noise_time * (schedule.total_steps - 1)))
    signed = to_signed(dataset.pixel_array())
    eps = rng.standard_normal(signed.shape)
    x_t = forward_noising(signed, np.full(len(dataset), level), eps, schedule)
    feats = []
    with no_grad():
        for start in range(0, len(dataset), batch):
            chunk = x_t[start:start + batch]
            b = chunk.shape[0]
            t = np.full((b, 1), level)
            null = np.full((b, 1), cfg.null_class)
            pooled, _ = model.forward(chunk[:, None], t, null, group_on=False,
                                      hidden_layer=layer)
            feats.append(pooled.data[:, 0])
    result = fit_linear_probe(np.concatenate(feats), labels, rng)
    return ProbeResult(layer=layer, accuracy=result.accuracy,
                       train_size=result.train_size, test_size=result.test_size)


# -- evaluation-set generation and the guidance sweep ---------------------------

def generate_eval_set(model: DenoiserModel, schedule: NoiseSchedule, plan: SamplerPlan,
                      count: int, seed: int, capture: bool = False):
    """Generate `count` images as groups with class labels cycling 0..K-1.

    Returns (images [count, H, W, 3], traces). Group g uses seed + g, so
    the set is deterministic and independent of evaluation order.
    """
    k = model.config.num_classes
    n = plan.group_size
    groups = -(-count // n)
    traces = []
    images = []
    for g in range(groups):
        p = replace(plan, label=g % k, seed=seed + g, capture=capture,
                    member_labels=None, member_seeds=None)
        trace = generate(model, schedule, p)
        traces.append(trace)
        images.append(trace.images)
    return np.concatenate(images, axis=0)[:count], traces


def cfg_sweep(model: DenoiserModel, schedule: NoiseSchedule, plan: SamplerPlan,
              scales, reference: np.ndarray, count: int = 64,
              seed: int = 0) -> list[dict]:
    """fid_proxy per guidance scale with shared seeds; rows carry is_argmin."""
    scales = list(scales)
    if not scales:
        raise ValidationError("scale grid is empty")
    rows = []
    for s in scales:
        p = replace(plan, cfg_scale=float(s))
        images, _ = generate_eval_set(model, schedule, p, count, seed)
        rows.append({"scale": float(s), "fid": fid_proxy(images, reference)})
    best = min(range(len(rows)), key=lambda i: rows[i]["fid"])
    for i, row in enumerate(rows):
        row["is_argmin"] = i == best
    return rows
