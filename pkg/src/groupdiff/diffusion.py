"""Noise schedule, forward noising, group timestep policy, and the loss.

Noise levels are integers t in [0, T). The cumulative signal fraction
uses the exclusive product convention

    abar[t] = prod_{s < t} (1 - beta[s]),   abar[0] = 1,

so t=0 is exactly clean data and the noisiest trained level t=T-1 has
abar close to zero (how close depends on the beta range; the default is
chosen so sqrt(abar[T-1]) < 0.05). Sampling starts from standard normal
noise treated as level T-1, so the last beta only shapes the spacing of
levels, never a transition.

Training groups share one anchor timestep; the other members deviate from
it by at most ``sigma_tv`` steps (a max-deviation radius, not a variance).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, ValidationError
from .model import GroupBatch
from .tensor import Tensor

# Predicted clean images are clamped to this symmetric range during
# ancestral sampling (pixels are mapped [0,1] -> [-1,1] for the diffusion).
X0_CLIP = 1.0


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.12

    def validate(self):
        if self.total_steps < 2:
            raise ValidationError("total_steps must be >= 2")
        if not (0.0 < self.beta_start < 1.0 and 0.0 < self.beta_end < 1.0):
            raise ValidationError("betas must lie strictly inside (0, 1)")


class NoiseSchedule:
    def __init__(self, config: ScheduleConfig | None = None, betas: np.ndarray | None = None):
        if betas is None:
            config = config or ScheduleConfig()
            config.validate()
            betas = np.linspace(config.beta_start, config.beta_end, config.total_steps)
        else:
            betas = np.asarray(betas, dtype=np.float64)
            config = config or ScheduleConfig(total_steps=len(betas),
                                              beta_start=float(betas[0]),
                                              beta_end=float(betas[-1]))
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValidationError("betas must lie strictly inside (0, 1)")
        self.config = config
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(self.alphas)[:-1]])
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise NumericError("alpha_bar must be strictly decreasing")

    @property
    def total_steps(self) -> int:
        return len(self.betas)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 0 or t.max() >= self.total_steps):
            raise ValidationError(f"timestep out of range [0, {self.total_steps})")
        return t


@dataclass(frozen=True)
class GroupNoisePolicy:
    sigma_tv: int = 0            # max member deviation from the anchor timestep
    label_dropout_p: float = 0.1

    def validate(self):
        if self.sigma_tv < 0:
            raise ValidationError("sigma_tv must be >= 0")
        if not 0.0 <= self.label_dropout_p <= 1.0:
            raise ValidationError("label_dropout_p must lie in [0, 1]")


def forward_noising(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, elementwise exact.

    t is a scalar or an array matching x0's leading axes (one level per
    image).
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} != data shape {x0.shape}")
    t = schedule.check_t(t)
    abar = schedule.alpha_bars[t]
    extra = x0.ndim - abar.ndim
    abar = abar.reshape(abar.shape + (1,) * extra)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def sample_group_timesteps(n: int, policy: GroupNoisePolicy, schedule: NoiseSchedule,
                           rng: np.random.Generator) -> np.ndarray:
    """Anchor timestep uniform over [0, T); members uniform within the
    sigma_tv radius around it, clipped to the valid range."""
    if n < 1:
        raise ValidationError("group size must be >= 1")
    policy.validate()
    t_max = schedule.total_steps
    t0 = int(rng.integers(0, t_max))
    if n == 1:
        return np.array([t0], dtype=np.int64)
    lo = max(0, t0 - policy.sigma_tv)
    hi = min(t_max - 1, t0 + policy.sigma_tv)
    rest = rng.integers(lo, hi + 1, size=n - 1)
    return np.concatenate([[t0], rest]).astype(np.int64)


def label_dropout(labels: np.ndarray, p: float, rng: np.random.Generator,
                  null_class: int) -> tuple[np.ndarray, bool]:
    """All-or-none conditioning dropout for one group/batch of labels.

    Returns (labels, dropped). When dropped, every label is replaced by
    the null class; callers use the flag to switch grouped (unconditional)
    vs size-one (conditional) training.
    """
    if not 0.0 <= p <= 1.0:
        raise ValidationError("dropout probability must lie in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    dropped = bool(rng.random() < p)
    if dropped:
        labels = np.full_like(labels, null_class)
    return labels, dropped


def group_loss(eps_hat: Tensor, eps) -> Tensor:
    """Sum over members of the per-member mean squared error.

    eps_hat: [N, ...]; the inner reduction is a mean over elements so the
    N=1 case equals the plain denoising MSE regardless of image size, and
    concatenating member axes adds losses.
    """
    target = eps if isinstance(eps, Tensor) else Tensor(eps, dtype=eps_hat.dtype)
    if eps_hat.shape != target.shape:
        raise DimensionError(f"loss shapes differ: {eps_hat.shape} vs {target.shape}")
    n = eps_hat.shape[0]
    diff = eps_hat - target
    per_member = (diff * diff).reshape(n, -1).mean(axis=1)
    return per_member.sum()


def group_loss_batch(eps_hat: Tensor, eps) -> Tensor:
    """Mean over a batch of groups of group_loss. eps_hat: [B, N, ...]."""
    target = eps if isinstance(eps, Tensor) else Tensor(eps, dtype=eps_hat.dtype)
    if eps_hat.shape != target.shape:
        raise DimensionError(f"loss shapes differ: {eps_hat.shape} vs {target.shape}")
    b, n = eps_hat.shape[0], eps_hat.shape[1]
    diff = eps_hat - target
    per_member = (diff * diff).reshape(b, n, -1).mean(axis=2)
    return per_member.sum(axis=1).mean()


def make_group_batch(images: np.ndarray, labels: np.ndarray, policy: GroupNoisePolicy,
                     schedule: NoiseSchedule, rng: np.random.Generator) -> GroupBatch:
    """Draw group timesteps and noise for already-centered images."""
    n = images.shape[0]
    t = sample_group_timesteps(n, policy, schedule, rng)
    if np.abs(t - t[0]).max() > policy.sigma_tv:
        raise NumericError("group timestep deviation exceeded sigma_tv")
    eps = rng.standard_normal(images.shape)
    return GroupBatch(images=images, labels=np.asarray(labels, dtype=np.int64),
                      timesteps=t, noise=eps)


def to_signed(pixels: np.ndarray) -> np.ndarray:
    """[0,1] pixel range -> [-1,1] diffusion range."""
    return pixels.astype(np.float64) * 2.0 - 1.0


def to_unit(signed: np.ndarray) -> np.ndarray:
    """[-1,1] diffusion range -> clipped [0,1] pixels."""
    return np.clip((signed + 1.0) * 0.5, 0.0, 1.0)
