"""Deterministic training loop over anchor batches.

Each iteration samples a batch of anchors and makes one all-or-none
conditioning-dropout decision for the batch. Whether the batch trains as
joint groups or as independent single images depends on the mode:

* baseline     - always single images (dropout only blanks the labels);
* groupdiff_f  - always groups of N, labels kept unless dropped;
* groupdiff_l  - groups of N only for the dropped (unconditional) batches,
                 single images otherwise.

baseline and groupdiff_l therefore consume the RNG stream identically, so
with dropout probability 0 the two modes produce bitwise-identical
trajectories; grouping is the only difference between them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ToyDataset
from .diffusion import (GroupNoisePolicy, NoiseSchedule, forward_noising,
                        group_loss_batch, label_dropout, sample_group_timesteps,
                        to_signed)
from .errors import NumericError, ValidationError
from .grouping import DatasetIndex, GroupSpec, assemble_group
from .model import DenoiserModel
from .optim import AdamW
from .sampler import SAMPLER_MODES


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_groups: int = 16
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    log_every: int = 50

    def validate(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.batch_groups < 1:
            raise ValidationError("batch_groups must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")


def train_model(model: DenoiserModel, dataset: ToyDataset, index: DatasetIndex,
                schedule: NoiseSchedule, group_spec: GroupSpec,
                policy: GroupNoisePolicy, tconf: TrainConfig, mode: str,
                seed: int = 0, fixed_anchors: np.ndarray | None = None,
                progress=None) -> list[dict]:
    """Train in place; returns per-logged-iteration rows (iter, loss, lr).

    fixed_anchors pins every iteration to the same anchor positions (used
    by smoke tests); normal runs draw anchors uniformly. Raises
    NumericError with the iteration index if the loss diverges.
    """
    if mode not in SAMPLER_MODES:
        raise ValidationError(f"mode must be one of {SAMPLER_MODES}")
    tconf.validate()
    group_spec.validate()
    policy.validate()
    cfg = model.config
    if len(dataset) < group_spec.group_size:
        raise ValidationError("dataset smaller than one group")
    rng = np.random.default_rng(seed)
    opt = AdamW(model.parameters(), lr=tconf.lr, betas=tconf.betas,
                weight_decay=tconf.weight_decay)
    signed = to_signed(dataset.pixel_array()).astype(cfg.np_dtype)
    labels_all = dataset.labels()
    ids = index.ids
    pos_of = {int(i): p for p, i in enumerate(ids)}
    rows: list[dict] = []
    b = tconf.batch_groups
    n = group_spec.group_size
    for it in range(tconf.iterations):
        if fixed_anchors is not None:
            anchors = fixed_anchors
        else:
            anchors = rng.integers(0, len(dataset), size=b)
        batch_labels, dropped = label_dropout(labels_all[anchors],
                                              policy.label_dropout_p, rng,
                                              cfg.null_class)
        grouped = mode == "groupdiff_f" or (mode == "groupdiff_l" and dropped)
        if grouped:
            member_pos = np.empty((b, n), dtype=np.int64)
            for g, a in enumerate(anchors):
                member_ids = assemble_group(int(ids[a]), group_spec, index, rng)
                member_pos[g] = [pos_of[m] for m in member_ids]
            x0 = signed[member_pos]
            if dropped:
                lab = np.full((b, n), cfg.null_class, dtype=np.int64)
            else:
                lab = labels_all[member_pos]
            t = np.stack([sample_group_timesteps(n, policy, schedule, rng)
                          for _ in range(b)])
            group_on = True
        else:
            x0 = signed[anchors][:, None]
            lab = batch_labels[:, None]
            t = np.stack([sample_group_timesteps(1, policy, schedule, rng)
                          for _ in range(b)])
            group_on = False
        eps = rng.standard_normal(x0.shape).astype(cfg.np_dtype)
        x_t = forward_noising(x0, t, eps, schedule).astype(cfg.np_dtype)
        eps_hat, _ = model.forward(x_t, t, lab, group_on=group_on)
        loss = group_loss_batch(eps_hat, eps)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericError(f"training loss diverged at iteration {it}")
        model.zero_grad()
        loss.backward()
        opt.step()
        if it % tconf.log_every == 0 or it == tconf.iterations - 1:
            rows.append({"iter": it, "loss": loss_val, "lr": tconf.lr})
            if progress is not None:
                progress(rows[-1])
    model.meta["iterations"] = model.meta.get("iterations", 0) + tconf.iterations
    model.meta["mode"] = mode
    model.meta["train_seed"] = seed
    return rows
