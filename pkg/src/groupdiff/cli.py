"""Command-line front end.

Subcommands: dataset gen, index build, train, sample, analyze attn,
analyze cross-condition, eval fid, eval probe, eval sweep, reproduce.
Outputs are CSV (plus optional SVG line plots). Exit codes: 0 success,
2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .attn_metrics import cross_condition_probe, cross_stats
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import DatasetSpec, generate_dataset, load_dataset, save_dataset
from .diffusion import NoiseSchedule, ScheduleConfig
from .errors import NumericError, ValidationError
from .evaluate import cfg_sweep, fid_proxy, generate_eval_set, linear_probe
from .grouping import build_index, load_index, save_index
from .manifest import load_manifest, reproduce
from .model import DenoiserModel
from .sampler import SamplerPlan, generate, load_trace, save_trace
from .train import train_model


def _parse_window(text: str) -> tuple[float, float]:
    lo, _, hi = text.partition(":")
    try:
        return float(lo), float(hi)
    except ValueError:
        raise ValidationError(f"expected lo:hi, got {text!r}") from None


def _parse_layers(text: str):
    if text in ("all", ""):
        return None
    if ":" in text:
        lo, _, hi = text.partition(":")
        return tuple(range(int(lo), int(hi)))
    return tuple(int(x) for x in text.split(","))


def _schedule_for(model) -> NoiseSchedule:
    stored = model.meta.get("schedule")
    if stored:
        return NoiseSchedule(ScheduleConfig(**stored))
    return NoiseSchedule()


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)


def _plan_from_args(args, capture: bool = False) -> SamplerPlan:
    return SamplerPlan(
        mode=args.mode,
        steps=args.steps,
        cfg_scale=args.cfg,
        guidance_interval=_parse_window(args.guidance_interval),
        group_window=_parse_window(args.group_window),
        group_layers=_parse_layers(args.group_layers),
        group_size=args.group_size,
        label=args.label,
        seed=args.seed,
        capture=capture or args.capture,
        snapshot_stride=getattr(args, "snapshot_stride", 0),
    )


def _add_plan_args(p, default_mode="groupdiff_l"):
    p.add_argument("--mode", default=default_mode,
                   choices=["baseline", "groupdiff_f", "groupdiff_l"])
    p.add_argument("--group-size", type=int, default=4)
    p.add_argument("--cfg", type=float, default=1.5)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--group-window", default="0:1")
    p.add_argument("--group-layers", default="all")
    p.add_argument("--guidance-interval", default="0:1")
    p.add_argument("--label", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--capture", action="store_true")


def cmd_dataset_gen(args) -> int:
    spec = DatasetSpec(num_classes=args.classes, images_per_class=args.per_class,
                       image_size=args.image_size, seed=args.seed,
                       similarity_structure=args.similarity)
    dataset = generate_dataset(spec)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} images to {args.out}")
    return 0


def cmd_index_build(args) -> int:
    dataset = load_dataset(args.dataset)
    index = build_index(dataset, tau=args.tau)
    save_index(index, args.out)
    print(f"indexed {len(index)} images (tau={args.tau}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.out_dir:
        config = replace(config, paths=replace(config.paths, out_dir=args.out_dir))
    if args.iterations is not None:
        config = replace(config, train=replace(config.train, iterations=args.iterations))
    config.validate()
    out_dir = Path(config.paths.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(config.paths.dataset)
    index = load_index(config.paths.index)
    schedule = NoiseSchedule(config.schedule)
    model = DenoiserModel(config.model, seed=config.seeds.model_init)
    model.meta["schedule"] = asdict(config.schedule)
    rows = train_model(model, dataset, index, schedule, config.group, config.noise,
                       config.train, config.mode, seed=config.seeds.train,
                       progress=lambda r: print(f"iter {r['iter']:6d} loss {r['loss']:.5f}"))
    _write_csv(out_dir / "train_log.csv", rows, ["iter", "loss", "lr"])
    ckpt = out_dir / "model.gdf"
    save_checkpoint(model, ckpt)
    if args.plot and rows:
        from .svgplot import line_plot_svg
        line_plot_svg({"loss": ([r["iter"] for r in rows], [r["loss"] for r in rows])},
                      out_dir / "train_loss.svg", title="training loss",
                      x_label="iteration", y_label="loss")
    print(f"checkpoint -> {ckpt}")
    return 0


def cmd_sample(args) -> int:
    model = load_checkpoint(args.ckpt)
    schedule = _schedule_for(model)
    plan = _plan_from_args(args)
    plan.validate()
    trace = generate(model, schedule, plan)
    save_trace(trace, args.out)
    print(f"trace with {trace.images.shape[0]} images -> {args.out}")
    return 0


def cmd_analyze_attn(args) -> int:
    trace = load_trace(args.trace)
    if not trace.block_sums:
        raise ValidationError("trace has no attention records (sample with --capture)")
    rows = []
    for rec in trace.block_sums:
        for st in cross_stats(rec.matrix):
            rows.append({
                "step": rec.step, "layer": rec.layer, "image": st.image,
                "p_self": f"{st.p_self:.8f}",
                "p_cross_mean": f"{st.cross_mean:.8f}",
                "p_cross_max": f"{st.cross_max:.8f}",
                "s_cross": "" if st.s_cross is None else f"{st.s_cross:.8f}",
            })
    _write_csv(args.out, rows,
               ["step", "layer", "image", "p_self", "p_cross_mean", "p_cross_max", "s_cross"])
    if args.plot:
        from .attn_metrics import step_profile
        from .svgplot import line_plot_svg
        steps, mean_curve, max_curve = step_profile(trace)
        line_plot_svg({"p_cross_mean": (steps, mean_curve),
                       "p_cross_max": (steps, max_curve)},
                      Path(args.out).with_suffix(".svg"),
                      title="cross-attention over denoising",
                      x_label="step", y_label="mass")
    print(f"{len(rows)} rows -> {args.out}")
    return 0


def cmd_analyze_cross_condition(args) -> int:
    model = load_checkpoint(args.ckpt)
    schedule = _schedule_for(model)
    plan = _plan_from_args(args)
    result = cross_condition_probe(model, schedule, plan, args.new_class,
                                   require_trained=not args.allow_untrained)
    rows = []
    for member in range(plan.group_size):
        rows.append({
            "member": member,
            "attention_received": f"{result.attention_received[member]:.8f}",
            "anchor_delta": f"{result.deltas[member]:.8f}",
            "rank": "" if member == 0 else result.ranking.index(member),
        })
    _write_csv(args.out, rows, ["member", "attention_received", "anchor_delta", "rank"])
    print(f"probe rows -> {args.out}")
    return 0


def _load_images_for_fid(path: Path) -> np.ndarray:
    if path.is_dir():
        traces = sorted(path.glob("*.gdt"))
        if not traces:
            raise ValidationError(f"no .gdt traces in {path}")
        return np.concatenate([load_trace(t).images for t in traces], axis=0)
    return load_trace(path).images


def cmd_eval_fid(args) -> int:
    gen = _load_images_for_fid(Path(args.gen))
    ref = load_dataset(args.ref).pixel_array()
    fid = fid_proxy(gen, ref)
    _write_csv(args.out, [{"fid_proxy": f"{fid:.8f}", "generated": len(gen),
                           "reference": len(ref)}],
               ["fid_proxy", "generated", "reference"])
    print(f"fid_proxy {fid:.5f} -> {args.out}")
    return 0


def cmd_eval_probe(args) -> int:
    model = load_checkpoint(args.ckpt)
    schedule = _schedule_for(model)
    dataset = load_dataset(args.dataset)
    result = linear_probe(model, args.layer, dataset, schedule,
                          noise_time=args.noise_time, seed=args.seed)
    print(f"layer {result.layer} probe accuracy {result.accuracy:.4f} "
          f"(train {result.train_size} / test {result.test_size})")
    return 0


def cmd_eval_sweep(args) -> int:
    model = load_checkpoint(args.ckpt)
    schedule = _schedule_for(model)
    dataset = load_dataset(args.dataset)
    lo, _, rest = args.grid.partition(":")
    hi, _, step = rest.partition(":")
    scales = np.arange(float(lo), float(hi) + 1e-9, float(step or 0.1))
    plan = _plan_from_args(args)
    rows = cfg_sweep(model, schedule, plan, scales, dataset.pixel_array(),
                     count=args.count, seed=args.seed)
    out_rows = [{"scale": f"{r['scale']:.3f}", "fid": f"{r['fid']:.8f}",
                 "is_argmin": int(r["is_argmin"])} for r in rows]
    _write_csv(args.out, out_rows, ["scale", "fid", "is_argmin"])
    if args.plot:
        from .svgplot import line_plot_svg
        line_plot_svg({"fid": ([r["scale"] for r in rows], [r["fid"] for r in rows])},
                      Path(args.out).with_suffix(".svg"), title="guidance sweep",
                      x_label="scale", y_label="fid_proxy")
    best = next(r for r in rows if r["is_argmin"])
    print(f"best scale {best['scale']:.2f} (fid {best['fid']:.5f}) -> {args.out}")
    return 0


def cmd_reproduce(args) -> int:
    manifest = load_manifest(args.manifest)
    summary = reproduce(manifest, args.out_dir)
    print(f"{len(summary)} runs -> {Path(args.out_dir) / 'summary.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupdiff",
                                     description="Group-wise joint denoising toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset management").add_subparsers(
        dest="subcommand", required=True)
    gen = ds.add_parser("gen", help="generate a toy dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--classes", type=int, default=8)
    gen.add_argument("--per-class", type=int, default=32)
    gen.add_argument("--image-size", type=int, default=16)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--similarity", type=float, default=0.35)
    gen.set_defaults(func=cmd_dataset_gen)

    idx = sub.add_parser("index", help="similarity index").add_subparsers(
        dest="subcommand", required=True)
    ib = idx.add_parser("build", help="build an index from a dataset")
    ib.add_argument("--dataset", required=True)
    ib.add_argument("--tau", type=float, default=0.7)
    ib.add_argument("--out", required=True)
    ib.set_defaults(func=cmd_index_build)

    tr = sub.add_parser("train", help="train from a run config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out-dir", default="")
    tr.add_argument("--iterations", type=int, default=None)
    tr.add_argument("--plot", action="store_true")
    tr.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="generate a group trace")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--snapshot-stride", type=int, default=0)
    _add_plan_args(sp)
    sp.set_defaults(func=cmd_sample)

    an = sub.add_parser("analyze", help="trace analysis").add_subparsers(
        dest="subcommand", required=True)
    aa = an.add_parser("attn", help="attention statistics from a trace")
    aa.add_argument("--trace", required=True)
    aa.add_argument("--out", required=True)
    aa.add_argument("--plot", action="store_true")
    aa.set_defaults(func=cmd_analyze_attn)
    cc = an.add_parser("cross-condition", help="condition-replacement probe")
    cc.add_argument("--ckpt", required=True)
    cc.add_argument("--new-class", type=int, required=True)
    cc.add_argument("--out", required=True)
    cc.add_argument("--allow-untrained", action="store_true")
    _add_plan_args(cc)
    cc.set_defaults(func=cmd_analyze_cross_condition)

    ev = sub.add_parser("eval", help="evaluation").add_subparsers(
        dest="subcommand", required=True)
    ef = ev.add_parser("fid", help="fid-proxy of a trace (or trace dir) vs a dataset")
    ef.add_argument("--gen", required=True)
    ef.add_argument("--ref", required=True)
    ef.add_argument("--out", required=True)
    ef.set_defaults(func=cmd_eval_fid)
    ep = ev.add_parser("probe", help="linear probe on denoiser features")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--layer", type=int, default=2)
    ep.add_argument("--dataset", required=True)
    ep.add_argument("--noise-time", type=float, default=0.5)
    ep.add_argument("--seed", type=int, default=0)
    ep.set_defaults(func=cmd_eval_probe)
    es = ev.add_parser("sweep", help="guidance-scale sweep")
    es.add_argument("--ckpt", required=True)
    es.add_argument("--dataset", required=True)
    es.add_argument("--grid", default="1.0:3.0:0.1")
    es.add_argument("--count", type=int, default=64)
    es.add_argument("--out", required=True)
    es.add_argument("--plot", action="store_true")
    _add_plan_args(es)
    es.set_defaults(func=cmd_eval_sweep)

    rp = sub.add_parser("reproduce", help="run a tagged experiment manifest")
    rp.add_argument("--manifest", required=True)
    rp.add_argument("--out-dir", required=True)
    rp.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
