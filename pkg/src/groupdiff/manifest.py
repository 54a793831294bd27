"""Tagged run manifests and the end-to-end reproduce pipeline.

A manifest is an ordered list of (tag, RunConfig). ``reproduce`` executes
each run in its own subdirectory — train, checkpoint, sample an
evaluation set, score it — and aggregates one summary row per tag. A
failing run records its error and leaves its metrics empty; aggregation
continues.
"""

from __future__ import annotations

import csv
import json
import math
import traceback
from dataclasses import dataclass, replace
from pathlib import Path

from .attn_metrics import aggregate_s_cross
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import load_dataset
from .diffusion import NoiseSchedule
from .errors import ValidationError
from .evaluate import fid_proxy, generate_eval_set, linear_probe
from .grouping import load_index
from .model import DenoiserModel
from .train import train_model

MANIFEST_VERSION = 1

SUMMARY_COLUMNS = ("tag", "fid_proxy", "s_cross", "probe_acc")


@dataclass
class ExperimentManifest:
    runs: list[tuple[str, RunConfig]]

    def validate(self):
        tags = [tag for tag, _ in self.runs]
        if len(tags) != len(set(tags)):
            raise ValidationError("manifest tags must be unique")
        for _, config in self.runs:
            config.validate()

    def to_dict(self) -> dict:
        return {"version": MANIFEST_VERSION,
                "runs": [{"tag": tag, "config": c.to_dict()} for tag, c in self.runs]}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        if set(d) - {"version", "runs"}:
            raise ValidationError(f"unknown manifest keys: {sorted(set(d) - {'version', 'runs'})}")
        if d.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
            raise ValidationError("unsupported manifest version")
        runs = []
        for entry in d.get("runs", []):
            if set(entry) - {"tag", "config"}:
                raise ValidationError("manifest run entries allow only 'tag' and 'config'")
            runs.append((entry["tag"], RunConfig.from_dict(entry["config"])))
        manifest = cls(runs=runs)
        manifest.validate()
        return manifest


def load_manifest(path) -> ExperimentManifest:
    with open(path) as f:
        return ExperimentManifest.from_dict(json.load(f))


def save_manifest(manifest: ExperimentManifest, path) -> None:
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def execute_run(config: RunConfig, out_dir: Path, progress=None) -> dict:
    """Run one config end to end; returns its summary metrics."""
    config.validate()
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(config.paths.dataset)
    index = load_index(config.paths.index)
    schedule = NoiseSchedule(config.schedule)
    model = DenoiserModel(config.model, seed=config.seeds.model_init)
    rows = train_model(model, dataset, index, schedule, config.group, config.noise,
                       config.train, config.mode, seed=config.seeds.train,
                       progress=progress)
    with open(out_dir / "train_log.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["iter", "loss", "lr"])
        writer.writeheader()
        writer.writerows(rows)
    save_checkpoint(model, out_dir / "model.gdf")

    plan = replace(config.sampling, mode=config.mode)
    capture = config.mode != "baseline" and plan.group_size >= 2
    images, traces = generate_eval_set(model, schedule, plan, config.eval_images,
                                       seed=config.seeds.sample, capture=capture)
    fid = fid_proxy(images, dataset.pixel_array())
    s_cross = math.nan
    if capture:
        records = [rec for t in traces for rec in t.block_sums]
        if records:
            s_cross = aggregate_s_cross(records)
    probe = linear_probe(model, config.probe_layer, dataset, schedule,
                         seed=config.seeds.eval)
    metrics = {"fid_proxy": fid, "s_cross": s_cross, "probe_acc": probe.accuracy}
    with open(out_dir / "metrics.json", "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
    return metrics


def reproduce(manifest: ExperimentManifest, out_dir, progress=None) -> list[dict]:
    """Execute every tagged run; write summary.csv; never stop on one failure."""
    manifest.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for tag, config in manifest.runs:
        run_dir = out_dir / tag
        row = {"tag": tag, "fid_proxy": "", "s_cross": "", "probe_acc": ""}
        try:
            metrics = execute_run(config, run_dir, progress=progress)
            for key, value in metrics.items():
                row[key] = "" if isinstance(value, float) and math.isnan(value) else value
        except Exception as exc:  # noqa: BLE001 - failures are per-run data
            run_dir.mkdir(parents=True, exist_ok=True)
            with open(run_dir / "error.txt", "w") as f:
                f.write(f"{exc}\n\n{traceback.format_exc()}")
        summary.append(row)
    with open(out_dir / "summary.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(SUMMARY_COLUMNS))
        writer.writeheader()
        writer.writerows(summary)
    return summary
