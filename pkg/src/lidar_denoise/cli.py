"""Command-line entry point: ``lidar-denoise <subcommand> ...``.

Every subcommand prints a JSON summary on stdout. Exit codes: 0 success,
1 usage error, 2 data or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment as aug
from . import eval as ev
from . import filters as flt
from .autolabel import AutolabelParams, accumulate_reference, label_clutter, load_reference_frames, reference_self_check
from .core import FrameDecodeError, Label, SensorModel, read_frame, write_frame
from .synth import DatasetManifest, generate_dataset, load_split

log = logging.getLogger("lidar_denoise")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers -----------------------------------------------------------------


def _load_config(path):
    if not path:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return doc


def _merge(config: dict, args, keys):
    """Config document values, overridden by any flag the user actually set."""
    out = dict(config)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _frame_paths(inputs):
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.lri")))
        elif p.exists():
            paths.append(p)
        else:
            raise FileNotFoundError(f"{p}: no such file or directory")
    if not paths:
        raise ValueError("no input frames found")
    return paths


def _map(fn, items, workers):
    """Order-preserving map; the result does not depend on the worker count."""
    items = list(items)
    if workers and workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _sensor(config):
    return SensorModel.from_dict(config["sensor"]) if config.get("sensor") else SensorModel()


def _emit(summary):
    print(json.dumps(summary, indent=2, sort_keys=True))


# --- subcommands -------------------------------------------------------------


def cmd_synth(args):
    cfg = _load_config(args.config)
    if args.scenes is not None:
        builder = args.builder or "plaza"
        cfg["scenes"] = [{"builder": builder, "seed": k, "name": f"{builder}{k:03d}"} for k in range(args.scenes)]
    for key in ("reference_frames", "frames_per_preset", "repetitions", "clear_frames", "noise_sigma"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    if args.preset:
        cfg["weather"] = list(args.preset)
    if not cfg.get("scenes"):
        raise UsageError("synth needs --scenes N or a config with a 'scenes' list")
    manifest = DatasetManifest.from_dict(cfg)
    path = generate_dataset(manifest, args.out, seed=args.seed)
    doc = json.loads(path.read_text())
    return {"dataset": str(path), "frames": len(doc["frames"]), "splits": doc["splits"]}


def _augment_one(job):
    src, out, params = job
    img, _ = read_frame(src)
    res, labels = aug.augment(img, params)
    write_frame(out, res, labels)
    return {"frame": str(out), **{c.name: int(np.count_nonzero(labels == c)) for c in Label}}


def cmd_augment(args):
    cfg = _load_config(args.config)
    if args.preset:
        params = aug.preset(args.preset, seed=args.seed)
    elif cfg:
        params = aug.params_from_json(json.dumps(cfg), seed=args.seed)
    else:
        raise UsageError("augment needs --preset or --config")
    overrides = {k: getattr(args, k) for k in ("beta", "scatter_rate") if getattr(args, k) is not None}
    params = replace(params, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for k, src in enumerate(_frame_paths(args.input)):
        # distinct, reproducible stream per input frame
        jobs.append((src, out / src.name, replace(params, seed=int(np.random.SeedSequence([params.seed, k])
                                                                        .generate_state(1)[0]))))
    frames = _map(_augment_one, jobs, args.workers)
    return {"params": params.to_dict(), "frames": frames,
            "clamp_probability": aug.lognormal_clamp_probability(params.clutter_intensity)}


def cmd_autolabel(args):
    cfg = _load_config(args.config)
    opts = _merge(cfg, args, ("delta_r", "weather_class"))
    params = AutolabelParams(delta_r=float(opts.get("delta_r", 0.35)),
                             weather_class=Label[str(opts.get("weather_class", "FOG")).upper()])
    ref_frames = []
    for r in args.reference:
        if r.endswith(".json"):
            ref_frames.extend(load_reference_frames(r))
        else:
            ref_frames.extend(read_frame(p)[0] for p in _frame_paths([r]))
    if args.self_check:
        rep = reference_self_check(ref_frames, params, crop_width=args.crop_width)
        return {"self_check": rep.to_dict()}
    if not args.input or not args.out:
        raise UsageError("autolabel needs --input and --out (or --self-check)")
    ref = accumulate_reference(ref_frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for src in _frame_paths(args.input):
        img, _ = read_frame(src)
        labels = label_clutter(img, ref, params)
        write_frame(out / src.name, img, labels)
        frames.append({"frame": str(out / src.name), "clutter": int(np.count_nonzero(labels == params.weather_class)),
                       "valid": int(np.count_nonzero(labels == Label.VALID))})
    return {"reference_frames": ref.frame_count, "delta_r": params.delta_r, "frames": frames}


def _filter_one(job):
    src, out, method, opts, sensor, clutter = job
    img, _ = read_frame(src)
    if method == "dror":
        mask = flt.dror_filter(img, sensor, flt.DrorParams(**opts))
    elif method == "ror":
        mask = flt.ror_filter(img, sensor, float(opts.get("radius", 0.2)), int(opts.get("k_min", 3)))
    else:
        mask = flt.sor_filter(img, sensor, int(opts.get("k", 8)), float(opts.get("std_multiplier", 1.0)))
    write_frame(out, img, flt.mask_to_labels(mask, clutter))
    return {"frame": str(out), "clutter": int(np.count_nonzero(mask == flt.Flag.CLUTTER)),
            "keep": int(np.count_nonzero(mask == flt.Flag.KEEP))}


def cmd_filter(args):
    cfg = _load_config(args.config)
    opts = _merge(cfg, args, ("alpha", "radius_multiplier", "min_neighbors", "min_search_radius",
                              "radius", "k_min", "k", "std_multiplier"))
    sensor = _sensor(opts)
    opts.pop("sensor", None)
    allowed = {"dror": ("alpha", "radius_multiplier", "min_neighbors", "min_search_radius"),
               "ror": ("radius", "k_min"), "sor": ("k", "std_multiplier")}[args.method]
    opts = {k: v for k, v in opts.items() if k in allowed}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clutter = Label[args.clutter_class.upper()]
    jobs = [(src, out / src.name, args.method, opts, sensor, clutter) for src in _frame_paths(args.input)]
    return {"method": args.method, "params": opts, "frames": _map(_filter_one, jobs, args.workers)}


def _net_spec(cfg):
    from .nnet import WeatherNetSpec

    spec = WeatherNetSpec()
    kw = {}
    if "trunk_widths" in cfg:
        kw["trunk_widths"] = tuple(int(w) for w in cfg["trunk_widths"])
    for k in ("final_width", "dropout", "distance_scale"):
        if k in cfg:
            kw[k] = cfg[k]
    return replace(spec, **kw)


def cmd_train(args):
    from .nnet import WeatherNet, desk_config, save_checkpoint, tile_crops, train
    from .nnet.train import TrainConfig

    cfg = _load_config(args.config)
    if args.widths:
        cfg["trunk_widths"] = [int(w) for w in args.widths.split(",")]
    opts = _merge(cfg, args, ("epochs", "batch_size", "lr", "lr_decay", "reduction", "final_width",
                              "crop_width", "dtype", "max_frames", "max_seconds"))
    if args.class_weights:
        opts["class_weights"] = [float(w) for w in args.class_weights.split(",")]
    spec = _net_spec(opts)
    base = desk_config() if opts.get("preset", args.preset) == "desk" else TrainConfig()
    fields = {k: opts[k] for k in ("epochs", "batch_size", "lr", "lr_decay", "reduction", "dtype", "max_seconds")
              if k in opts}
    if "class_weights" in opts:
        fields["class_weights"] = tuple(opts["class_weights"])
    out = Path(args.out)
    config = replace(base, seed=args.seed, checkpoint_dir=str(out / "checkpoints"), **fields)
    samples = [(img, lab) for img, lab, _ in load_split(args.dataset, "train")]
    if opts.get("max_frames"):
        samples = samples[: int(opts["max_frames"])]
    crops = tile_crops(samples, int(opts.get("crop_width", 100)))
    val = None
    if args.validate:
        val = [(img, lab) for img, lab, _ in load_split(args.dataset, "val")] or None
    net = WeatherNet(spec, seed=args.seed)
    result = train(crops, net, config, validation=val)
    epoch = result.best_epoch or len(result.history)
    save_checkpoint(out / "final.ckpt", result.net, epoch, args.seed)
    (out / "history.json").write_text(json.dumps(result.history, indent=1) + "\n")
    return {"checkpoint": str(out / "final.ckpt"), "params": result.net.param_count(), "crops": len(crops),
            "epoch": epoch, "history": result.history}


def cmd_predict(args):
    from .nnet import load_checkpoint, predict_labels
    from .nnet.train import denoise

    net, header = load_checkpoint(args.checkpoint)
    net = net.astype(np.float32)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for src in _frame_paths(args.input):
        img, _ = read_frame(src)
        labels = predict_labels(net, [img])[0]
        target = denoise(img, labels) if args.denoised else img
        write_frame(out / src.name, target, labels if not args.denoised else target.no_return_labels())
        frames.append({"frame": str(out / src.name),
                       **{c.name: int(np.count_nonzero(labels == c)) for c in Label}})
    return {"checkpoint": str(args.checkpoint), "frames": frames}


def cmd_eval(args):
    preds = _frame_paths([args.pred])
    gt_dir = Path(args.gt)
    pairs = []
    for p in preds:
        g = gt_dir / p.name
        if not g.exists():
            raise FileNotFoundError(f"{g}: ground truth for {p.name} missing")
        _, pl = read_frame(p)
        _, gl = read_frame(g)
        if pl is None or gl is None:
            raise ValueError(f"{p.name}: frame has no label channel")
        pairs.append((pl, gl))
    if args.binary:
        masks = [np.where(pl == Label.NO_RETURN, flt.Flag.NO_RETURN,
                          np.where(pl == Label.VALID, flt.Flag.KEEP, flt.Flag.CLUTTER)).astype(np.uint8)
                 for pl, _ in pairs]
        as_rain, as_fog = ev.binary_clutter_confusions(masks, [g for _, g in pairs])
        rep = ev.binary_clutter_iou(as_rain, as_fog)
        conf = {"as_rain": as_rain.counts.tolist(), "as_fog": as_fog.counts.tolist()}
    else:
        c = ev.confusion([p for p, _ in pairs], [g for _, g in pairs])
        rep = ev.iou_scores(c)
        conf = c.counts.tolist()
    return {"frames": len(pairs), "iou": rep.to_dict(), "mean_iou": rep.mean, "confusion": conf}


def _sweep_ratio_points(samples):
    """Mean clutter ratio per fog visibility found in a dataset split."""
    by_vis = {}
    for _, lab, entry in samples:
        if entry.get("weather", "").startswith("fog"):
            by_vis.setdefault(entry["visibility"], []).append(ev.degradation_report(lab).clutter_ratio)
    return [(v, float(aug.beta_from_visibility(v)), float(np.mean(r))) for v, r in sorted(by_vis.items())]


def cmd_report(args):
    from .nnet import load_checkpoint, predict_labels

    sensor = _sensor(json.loads(Path(args.dataset).read_text()))
    samples = load_split(args.dataset, args.split)
    if not samples:
        raise ValueError(f"split {args.split!r} is empty")
    images = [s[0] for s in samples]
    gts = [s[1] for s in samples]
    results = []

    t = time.perf_counter()
    masks = [flt.dror_filter(img, sensor) for img in images]
    dror_ms = 1e3 * (time.perf_counter() - t) / len(images)
    as_rain, as_fog = ev.binary_clutter_confusions(masks, gts)
    dror = ev.binary_clutter_iou(as_rain, as_fog)
    results.append(("DROR", dror, None, dror_ms if args.timing else None))

    summary = {"split": args.split, "frames": len(samples), "dror": dror.to_dict()}
    if args.checkpoint:
        net, _ = load_checkpoint(args.checkpoint)
        net = net.astype(np.float32)
        t = time.perf_counter()
        preds = predict_labels(net, images)
        net_ms = 1e3 * (time.perf_counter() - t) / len(images)
        rep = ev.iou_scores(ev.confusion(preds, gts))
        results.append(("WeatherNet", rep, net.param_count(), net_ms if args.timing else None))
        summary["weathernet"] = rep.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(ev.format_table(results))
    (out / "table.csv").write_text(ev.table_csv(results))
    points = _sweep_ratio_points(samples)
    (out / "ratio_visibility.dat").write_text(ev.ratio_curve_dat(points))
    lines = ["visibility_m,beta,clutter_ratio"] + [f"{v:.6g},{b:.6g},{r:.6f}" for v, b, r in points]
    (out / "ratio_visibility.csv").write_text("\n".join(lines) + "\n")
    summary["files"] = sorted(str(p) for p in out.iterdir())
    summary["table"] = ev.table_rows(results)
    return summary


# --- parser ------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="lidar-denoise", description="Lidar weather de-noising toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
        sp.add_argument("--workers", type=int, default=1, help="worker processes; results do not depend on it")
        sp.add_argument("--config", help="JSON parameter document; flags override its fields")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic labelled dataset"))
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, help="number of procedural scenes")
    s.add_argument("--builder", choices=["plaza", "road", "chamber"])
    s.add_argument("--preset", action="append", help="weather preset (repeatable)")
    s.add_argument("--reference-frames", dest="reference_frames", type=int)
    s.add_argument("--frames-per-preset", dest="frames_per_preset", type=int)
    s.add_argument("--repetitions", type=int)
    s.add_argument("--clear-frames", dest="clear_frames", type=int)
    s.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    s.set_defaults(func=cmd_synth)

    s = common(sub.add_parser("augment", help="add fog or rain to clear frames"))
    s.add_argument("--input", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--preset", help="rain, rain15, rain33, rain55 or fog:V=<m>")
    s.add_argument("--beta", type=float)
    s.add_argument("--scatter-rate", dest="scatter_rate", type=float)
    s.set_defaults(func=cmd_augment)

    s = common(sub.add_parser("autolabel", help="label weather clutter against clear reference frames"))
    s.add_argument("--reference", nargs="+", required=True, help="reference manifest (.json) or frames")
    s.add_argument("--input", nargs="+")
    s.add_argument("--out")
    s.add_argument("--delta-r", dest="delta_r", type=float)
    s.add_argument("--weather-class", dest="weather_class", choices=["rain", "fog", "RAIN", "FOG"])
    s.add_argument("--self-check", dest="self_check", action="store_true")
    s.add_argument("--crop-width", dest="crop_width", type=int, default=400)
    s.set_defaults(func=cmd_autolabel)

    s = common(sub.add_parser("filter", help="run a geometric outlier filter"))
    s.add_argument("--method", choices=["dror", "ror", "sor"], default="dror")
    s.add_argument("--input", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--clutter-class", dest="clutter_class", choices=["rain", "fog"], default="fog")
    s.add_argument("--alpha", type=float)
    s.add_argument("--radius-multiplier", dest="radius_multiplier", type=float)
    s.add_argument("--min-neighbors", dest="min_neighbors", type=int)
    s.add_argument("--min-search-radius", dest="min_search_radius", type=float)
    s.add_argument("--radius", type=float)
    s.add_argument("--k-min", dest="k_min", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--std-multiplier", dest="std_multiplier", type=float)
    s.set_defaults(func=cmd_filter)

    s = common(sub.add_parser("train", help="train WeatherNet on a dataset's train split"))
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=["desk", "published"], default="desk")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--lr-decay", dest="lr_decay", type=float)
    s.add_argument("--reduction", choices=["mean", "sum"])
    s.add_argument("--widths", help="comma-separated trunk widths, e.g. 16,16,16,16")
    s.add_argument("--final-width", dest="final_width", type=int)
    s.add_argument("--class-weights", dest="class_weights", help="comma-separated VALID,RAIN,FOG weights")
    s.add_argument("--crop-width", dest="crop_width", type=int)
    s.add_argument("--dtype", choices=["float32", "float64"])
    s.add_argument("--max-frames", dest="max_frames", type=int)
    s.add_argument("--max-seconds", dest="max_seconds", type=float,
                   help="wall-clock training budget; stops before an epoch that would exceed it")
    s.add_argument("--validate", action="store_true",
                   help="score the val split after every epoch and keep the best epoch")
    s.set_defaults(func=cmd_train)

    s = common(sub.add_parser("predict", help="label frames with a trained checkpoint"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--denoised", action="store_true", help="write de-noised frames instead of labels")
    s.set_defaults(func=cmd_predict)

    s = common(sub.add_parser("eval", help="IoU of predicted label frames against ground truth"))
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--binary", action="store_true", help="score any clutter prediction as rain and as fog in turn")
    s.set_defaults(func=cmd_eval)

    s = common(sub.add_parser("report", help="results table and clutter-ratio curve for one split"))
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--timing", action="store_true", help="include wall-clock runtimes (not reproducible)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        summary = args.func(args)
    except UsageError as e:
        print(f"lidar-denoise {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"lidar-denoise {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FrameDecodeError, ValueError, KeyError, OSError, json.JSONDecodeError) as e:
        print(f"lidar-denoise {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    _emit(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
