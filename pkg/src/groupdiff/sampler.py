"""Ancestral sampling with classifier-free guidance and group-attention modes.

Three modes:

* ``baseline``     - both score passes run each member as its own group of
                     one (slot 0, no cross-member attention).
* ``groupdiff_f``  - conditional and unconditional passes both run the
                     whole group jointly.
* ``groupdiff_l``  - the conditional score is per-member, only the
                     unconditional score sees the group.

The normalized time axis runs 0 -> 1 from pure noise to clean. The
guidance scale applies only inside ``guidance_interval`` (s = 0 outside),
and joint passes happen only while the step fraction lies inside
``group_window`` (outside it, every pass degenerates to independent
members, which is bitwise identical to baseline mode). ``group_layers``
further restricts which transformer layers may attend across members.

Each member owns an independent noise stream derived from its seed, so in
baseline mode a member's trajectory never depends on its neighbours.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .attn_metrics import AttentionBlockSums
from .diffusion import X0_CLIP, NoiseSchedule, to_unit
from .errors import DimensionError, NumericError, ValidationError
from .model import AttnCaptureSpec, DenoiserModel
from .tensor import no_grad

TRACE_MAGIC = b"GDT1"

SAMPLER_MODES = ("baseline", "groupdiff_f", "groupdiff_l")


@dataclass(frozen=True)
class SamplerPlan:
    mode: str = "groupdiff_l"
    steps: int = 50                                # ancestral updates (NFE per pass)
    cfg_scale: float = 1.5
    guidance_interval: tuple[float, float] = (0.0, 1.0)
    group_window: tuple[float, float] = (0.0, 1.0)
    group_layers: tuple[int, ...] | None = None    # None = all layers
    group_size: int = 4
    label: int = 0
    seed: int = 0
    member_seeds: tuple[int, ...] | None = None
    member_labels: tuple[int, ...] | None = None   # per-member override (probe use)
    capture: bool = False
    capture_layers: tuple[int, ...] | None = None
    snapshot_stride: int = 0                       # 0 = keep no x_t snapshots

    def validate(self):
        if self.mode not in SAMPLER_MODES:
            raise ValidationError(f"mode must be one of {SAMPLER_MODES}")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValidationError("cfg_scale must be >= 0")
        for name, (lo, hi) in (("guidance_interval", self.guidance_interval),
                               ("group_window", self.group_window)):
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValidationError(f"{name} must satisfy 0 <= lo <= hi <= 1")
        if self.group_size < 1:
            raise ValidationError("group_size must be >= 1")
        if self.member_seeds is not None and len(self.member_seeds) != self.group_size:
            raise ValidationError("member_seeds length must equal group_size")
        if self.member_labels is not None and len(self.member_labels) != self.group_size:
            raise ValidationError("member_labels length must equal group_size")
        if self.snapshot_stride < 0:
            raise ValidationError("snapshot_stride must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("guidance_interval", "group_window", "group_layers",
                    "member_seeds", "member_labels", "capture_layers"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerPlan":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown SamplerPlan keys: {sorted(extra)}")
        kv = dict(d)
        for key in ("guidance_interval", "group_window", "group_layers",
                    "member_seeds", "member_labels", "capture_layers"):
            if key in kv and kv[key] is not None:
                kv[key] = tuple(kv[key])
        plan = cls(**kv)
        plan.validate()
        return plan


@dataclass
class SampleTrace:
    images: np.ndarray                      # [N, H, W, Ch] in [0, 1]
    plan: SamplerPlan
    steps: int
    block_sums: list[AttentionBlockSums] = field(default_factory=list)
    snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)


def cfg_combine(e_c: np.ndarray, e_u: np.ndarray, s: float) -> np.ndarray:
    """Guided score e_c + s * (e_c - e_u); s = 0 returns e_c unchanged."""
    if e_c.shape != e_u.shape:
        raise DimensionError(f"score shapes differ: {e_c.shape} vs {e_u.shape}")
    if s == 0.0:
        return e_c
    return e_c + s * (e_c - e_u)


def respaced_levels(total_steps: int, steps: int) -> np.ndarray:
    """Ascending noise levels 0..T-1 used by a run of `steps` updates."""
    if steps > total_steps - 1:
        raise ValidationError(f"steps {steps} exceeds schedule transitions {total_steps - 1}")
    levels = np.unique(np.round(np.linspace(0, total_steps - 1, steps + 1)).astype(np.int64))
    if len(levels) != steps + 1:
        raise ValidationError("respacing collapsed duplicate levels; reduce steps")
    return levels


def ancestral_step(x: np.ndarray, eps_hat: np.ndarray, abar_hi: float, abar_lo: float,
                   noise: np.ndarray | None) -> np.ndarray:
    """One posterior update from noise level abar_hi to the cleaner abar_lo.

    The predicted clean image is clamped to +-X0_CLIP. At abar_lo == 1 the
    posterior variance is exactly zero and the result is the clamped
    prediction itself.
    """
    x0 = (x - np.sqrt(1.0 - abar_hi) * eps_hat) / np.sqrt(abar_hi)
    x0 = np.clip(x0, -X0_CLIP, X0_CLIP)
    beta_eff = 1.0 - abar_hi / abar_lo
    denom = 1.0 - abar_hi
    mean = (np.sqrt(abar_lo) * beta_eff * x0
            + np.sqrt(abar_hi / abar_lo) * (1.0 - abar_lo) * x) / denom
    var = (1.0 - abar_lo) / denom * beta_eff
    if var > 0 and noise is not None:
        return mean + np.sqrt(var) * noise
    return mean


def _member_rngs(plan: SamplerPlan) -> list[np.random.Generator]:
    if plan.member_seeds is not None:
        return [np.random.default_rng(int(s)) for s in plan.member_seeds]
    children = np.random.SeedSequence(plan.seed).spawn(plan.group_size)
    return [np.random.default_rng(c) for c in children]


def _capture_spec(plan: SamplerPlan) -> AttnCaptureSpec | None:
    if not plan.capture:
        return None
    layers = None if plan.capture_layers is None else tuple(plan.capture_layers)
    return AttnCaptureSpec(enabled=True, layers=layers)


def predict_scores(model: DenoiserModel, x: np.ndarray, level: int, plan: SamplerPlan,
                   step_fraction: float):
    """Guided per-member scores at one level.

    x: [N, H, W, Ch] current states (all members share the level and, by
    default, the label). Returns (e_tilde [N, ...], captures dict layer ->
    [N, N] or None when no capture was requested).
    """
    plan.validate()
    cfg = model.config
    n = x.shape[0]
    if n != plan.group_size:
        raise DimensionError(f"state has {n} members, plan.group_size = {plan.group_size}")
    labels = (np.array(plan.member_labels, dtype=np.int64)
              if plan.member_labels is not None
              else np.full(n, plan.label, dtype=np.int64))
    null = np.full(n, cfg.null_class, dtype=np.int64)
    t_col = np.full((n, 1), level, dtype=np.int64)
    t_row = np.full((1, n), level, dtype=np.int64)
    capture = _capture_spec(plan)

    g0, g1 = plan.group_window
    grouped = plan.mode != "baseline" and g0 <= step_fraction < g1
    a, b = plan.guidance_interval
    s = plan.cfg_scale if a <= step_fraction < b else 0.0

    def singles(lbl):
        out, _ = model.forward(x[:, None], t_col, lbl[:, None], group_on=False)
        return out.data[:, 0]

    def joint(lbl, want_capture):
        out, caps = model.forward(x[None], t_row, lbl[None], group_on=True,
                                  group_layers=plan.group_layers,
                                  capture=capture if want_capture else None)
        return out.data[0], {layer: m[0] for layer, m in caps.items()}

    captures: dict[int, np.ndarray] | None = None
    with no_grad():
        if plan.mode == "groupdiff_f" and grouped:
            e_c, _ = joint(labels, want_capture=False)
        else:
            e_c = singles(labels)
        need_uncond = s != 0.0 or capture is not None
        if need_uncond:
            if grouped:
                e_u, captures = joint(null, want_capture=capture is not None)
            else:
                e_u = singles(null)
                if capture is not None:
                    layers = capture.layer_set(cfg.depth)
                    captures = {layer: np.eye(n) for layer in layers}
            e_tilde = cfg_combine(e_c, e_u, s)
        else:
            e_tilde = e_c
            if capture is not None:
                captures = {layer: np.eye(n) for layer in capture.layer_set(cfg.depth)}
    return e_tilde, captures


def generate(model: DenoiserModel, schedule: NoiseSchedule, plan: SamplerPlan) -> SampleTrace:
    """Run the full denoising trajectory for one group.

    Deterministic given (plan, model parameters): member i's noise stream
    depends only on its seed. Raises NumericError with the step index if
    the state diverges.
    """
    plan.validate()
    cfg = model.config
    if plan.label >= cfg.num_classes or plan.label < 0:
        raise ValidationError(f"label {plan.label} outside [0, {cfg.num_classes})")
    levels = respaced_levels(schedule.total_steps, plan.steps)
    n = plan.group_size
    rngs = _member_rngs(plan)
    shape = (cfg.image_size, cfg.image_size, cfg.channels)
    x = np.stack([r.standard_normal(shape) for r in rngs])
    n_steps = len(levels) - 1
    trace = SampleTrace(images=np.empty(0), plan=plan, steps=n_steps)
    for step_idx in range(n_steps):
        hi = int(levels[n_steps - step_idx])
        lo = int(levels[n_steps - step_idx - 1])
        u = step_idx / n_steps
        e_tilde, captures = predict_scores(model, x, hi, plan, u)
        if captures is not None:
            for layer, mat in sorted(captures.items()):
                trace.block_sums.append(AttentionBlockSums(layer=layer, step=step_idx,
                                                           matrix=mat))
        noise = None
        if lo > 0:
            noise = np.stack([r.standard_normal(shape) for r in rngs])
        x = ancestral_step(x, e_tilde, schedule.alpha_bars[hi], schedule.alpha_bars[lo],
                           noise)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"sampling diverged at step {step_idx} (level {hi} -> {lo})")
        if plan.snapshot_stride and (step_idx % plan.snapshot_stride == 0
                                     or step_idx == n_steps - 1):
            trace.snapshots.append((step_idx, x.copy()))
    trace.images = to_unit(x)
    return trace


# -- trace file format (GDT1) ---------------------------------------------------
# magic | u32 header_len | JSON header | images f32 | block records | snapshots
# block record: u32 step | u32 layer | N*N f64; snapshot: u32 step | N*H*W*Ch f32

def save_trace(trace: SampleTrace, path) -> None:
    n, h, w, ch = trace.images.shape
    header = {
        "plan": trace.plan.to_dict(),
        "steps": trace.steps,
        "shape": [n, h, w, ch],
        "num_blocks": len(trace.block_sums),
        "num_snapshots": len(trace.snapshots),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(TRACE_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(trace.images, dtype="<f4").tobytes())
        for rec in trace.block_sums:
            f.write(struct.pack("<II", rec.step, rec.layer))
            f.write(np.ascontiguousarray(rec.matrix, dtype="<f8").tobytes())
        for step, snap in trace.snapshots:
            f.write(struct.pack("<I", step))
            f.write(np.ascontiguousarray(snap, dtype="<f4").tobytes())


def load_trace(path) -> SampleTrace:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TRACE_MAGIC:
            raise ValidationError(f"not a trace file (magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        n, h, w, ch = header["shape"]
        plan = SamplerPlan.from_dict(header["plan"])
        images = np.frombuffer(f.read(n * h * w * ch * 4), dtype="<f4").reshape(n, h, w, ch).copy()
        trace = SampleTrace(images=images, plan=plan, steps=header["steps"])
        for _ in range(header["num_blocks"]):
            step, layer = struct.unpack("<II", f.read(8))
            mat = np.frombuffer(f.read(n * n * 8), dtype="<f8").reshape(n, n).copy()
            trace.block_sums.append(AttentionBlockSums(layer=layer, step=step, matrix=mat))
        for _ in range(header["num_snapshots"]):
            (step,) = struct.unpack("<I", f.read(4))
            snap = np.frombuffer(f.read(n * h * w * ch * 4), dtype="<f4").reshape(n, h, w, ch).copy()
            trace.snapshots.append((step, snap))
    return trace
