"""Command-line entry point: ``trajmoment <command> [options]``.

Exit codes: 0 success, 1 internal error, 2 invalid input.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, apply_overrides, read_kv_file

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2


class UnknownQid(KeyError):
    pass


def _common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=None, help="torch threads (default: all cores)")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajmoment", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert raw trial logs into the dataset format")
    p.add_argument("input_dir")
    p.add_argument("--fps", type=int, default=5)
    p.add_argument("--format", choices=("auto", "flat", "alfred"), default="auto")
    p.add_argument("--field-map", help="key = value file renaming raw json fields")
    p.add_argument("--annotation", type=int, default=0, help="ALFRED annotation set to use")
    _common(p)

    p = sub.add_parser("synth", help="generate a synthetic dataset with features")
    _common(p)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("dataset", help="queries jsonl file")
    p.add_argument("--trajectories", help="trajectories jsonl (default: alongside dataset)")
    _common(p, out_required=False)

    for name, help_ in (("train", "train a localizer"), ("ablate-features", "trajectory definition ablation"),
                        ("ablate-datasize", "training set size sweep")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--features", help="features root (default: $TRAJMOMENT_CACHE or DATA/features)")
        p.add_argument("--contrastive", action="store_true", default=None)
        p.add_argument("--feature-mode", choices=("video_only", "video_plus_actions"))
        p.add_argument("--epochs", type=int)
        _common(p)
        if name != "train":
            p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
        if name == "ablate-datasize":
            p.add_argument("--percentages", help="comma-separated percentages")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--features")
    p.add_argument("--split", choices=("train", "val", "test"), default=None)
    _common(p)

    p = sub.add_parser("predict", help="timeline figure for one query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--features")
    p.add_argument("--qid", required=True)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out-svg", required=True)
    _common(p, out_required=False)
    return ap


# ---------------------------------------------------------------------------


def _load_config(args) -> dict:
    values = read_kv_file(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return values


def _check_keys(values, *objs):
    known = {f.name for o in objs for f in dataclasses.fields(o)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def _resolve_training(args):
    from .objective import LossWeights
    from .trainer import PROFILES

    values = _load_config(args)
    prof = PROFILES[args.profile]
    mc, tc, w = prof["model"], prof["train"], LossWeights()
    _check_keys(values, mc, tc, w)
    mc, tc, w = apply_overrides(mc, values), apply_overrides(tc, values), apply_overrides(w, values)
    flags = {}
    if getattr(args, "contrastive", None):
        flags["contrastive"] = True
    if getattr(args, "feature_mode", None):
        flags["feature_mode"] = args.feature_mode
    if getattr(args, "epochs", None):
        flags["epochs"] = args.epochs
    tc = dataclasses.replace(tc, **flags)
    return mc, tc, w, values


def _features_root(args):
    if getattr(args, "features", None):
        return args.features
    env = os.environ.get("TRAJMOMENT_CACHE")
    if env:
        return env
    return None


def _load_data(args, seed=0):
    from .trainer import DataSplits
    return DataSplits.load(args.data, seed=seed, features_root=_features_root(args))


def _write_manifest(out_dir, args, config, outputs, seeds, started):
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "inputs": {k: v for k, v in vars(args).items() if k in ("input_dir", "data", "features", "checkpoint",
                                                                 "dataset", "config")},
        "outputs": sorted(str(o) for o in outputs),
        "seeds": list(seeds),
        "version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _asdict_all(**objs):
    return {k: dataclasses.asdict(v) for k, v in objs.items()}


# ---------------------------------------------------------------------------


def cmd_convert(args, started):
    from .convert import EmptyDataset, convert_all, load_field_map, read_trials, write_dataset

    field_map = load_field_map(args.field_map) if args.field_map else None
    if not Path(args.input_dir).is_dir():
        raise FileNotFoundError(f"input directory {args.input_dir} does not exist")
    trials = read_trials(args.input_dir, args.format, field_map, args.annotation)
    if not trials:
        raise EmptyDataset(f"no trial files under {args.input_dir}")
    trajs, queries = convert_all(trials, args.fps)
    if not queries:
        raise EmptyDataset("trials contain no instructions")
    write_dataset(args.out, trajs, queries)
    out = Path(args.out)
    _write_manifest(out, args, {"fps": args.fps, "format": args.format, "field_map": field_map,
                                "annotation": args.annotation},
                    [out / "dataset.jsonl", out / "trajectories.jsonl", out / "stats.json"], [], started)
    print(f"converted {len(trajs)} trajectories, {len(queries)} queries -> {out}")


def cmd_synth(args, started):
    from .features import SynthConfig, synth_generate

    values = _load_config(args)
    cfg = SynthConfig()
    _check_keys(values, cfg)
    cfg = apply_overrides(cfg, values)
    ds = synth_generate(cfg)
    ds.save(args.out)
    _write_manifest(args.out, args, dataclasses.asdict(cfg), ["train.jsonl", "val.jsonl", "test.jsonl",
                                                              "trajectories.jsonl", "features/"],
                    [cfg.seed], started)
    print(f"synthesized {len(ds.trajectories)} trajectories, {len(ds.queries)} queries -> {args.out}")


def cmd_stats(args, started):
    from .convert import dataset_stats, load_queries, load_trajectories

    queries = load_queries(args.dataset)
    tpath = args.trajectories or Path(args.dataset).with_name("trajectories.jsonl")
    vids = {q.vid for q in queries}
    trajs = [t for t in load_trajectories(tpath) if t.vid in vids]
    report = json.dumps(dataset_stats(trajs, queries).to_json(), indent=2)
    print(report)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "stats.json").write_text(report + "\n")
        _write_manifest(args.out, args, {"trajectories": str(tpath)}, [Path(args.out) / "stats.json"], [], started)


def cmd_train(args, started):
    from .metrics import write_eval_report
    from .model import save_checkpoint
    from .trainer import build_examples, evaluate_examples, train, _configs_for

    mc, tc, w, _ = _resolve_training(args)
    data = _load_data(args, tc.seed)
    mc = _configs_for(data, tc.feature_mode, mc)
    mode = tc.feature_mode
    tr = build_examples(data.train, data.store, mode)
    va = build_examples(data.val, data.store, mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, tlog = train(tr, va, mc, tc, w, log_path=out / "train_log.jsonl")
    save_checkpoint(model, out / "checkpoint.trjc", {"train": dataclasses.asdict(tc),
                                                      "weights": dataclasses.asdict(w),
                                                      "best_epoch": tlog.best_epoch})
    outputs = [out / "checkpoint.trjc", out / "train_log.jsonl"]
    split = data.eval_split
    if split:
        report, per_query = evaluate_examples(model, build_examples(split, data.store, mode), tc.eval_batch_size)
        write_eval_report(out / "eval_report.json", report, per_query)
        outputs.append(out / "eval_report.json")
        print(json.dumps(report.values(), indent=2))
    _write_manifest(out, args, _asdict_all(model=mc, train=tc, weights=w), outputs, [tc.seed], started)


def _checkpoint_mode(extra):
    return extra.get("train", {}).get("feature_mode", "video_plus_actions")


def cmd_eval(args, started):
    from .metrics import write_eval_report
    from .model import load_checkpoint
    from .trainer import build_examples, evaluate_examples

    model, extra = load_checkpoint(args.checkpoint)
    data = _load_data(args)
    split = getattr(data, args.split) if args.split else data.eval_split
    if not split:
        raise ValueError("evaluation split is empty")
    report, per_query = evaluate_examples(model, build_examples(split, data.store, _checkpoint_mode(extra)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_report(out / "eval_report.json", report, per_query)
    print(json.dumps(report.values(), indent=2))
    _write_manifest(out, args, {"checkpoint_extra": extra, "split": args.split or "test"},
                    [out / "eval_report.json"], [], started)


def _seeds(args):
    if args.seeds:
        return [int(s) for s in str(args.seeds).split(",") if s.strip()]
    return [0, 1, 2, 3, 4]


def cmd_ablate_features(args, started):
    from .trainer import ablate_features, format_rows, table2_json

    mc, tc, w, _ = _resolve_training(args)
    seeds = _seeds(args)
    data = _load_data(args)
    rows = ablate_features(data, mc, tc, seeds, weights=w)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table2.json").write_text(json.dumps(table2_json(rows), indent=2, sort_keys=True) + "\n")
    text = format_rows(rows, "Trajectory definition ablation")
    (out / "table2.txt").write_text(text + "\n")
    print(text)
    _write_manifest(out, args, _asdict_all(model=mc, train=tc, weights=w), [out / "table2.json"], seeds, started)


def cmd_ablate_datasize(args, started):
    from .figures import sweep_plot
    from .trainer import SweepSpec, ablate_datasize, format_rows, table3_json

    mc, tc, w, values = _resolve_training(args)
    seeds = _seeds(args)
    pcts = SweepSpec().percentages
    if args.percentages:
        pcts = tuple(float(p) for p in args.percentages.split(",") if p.strip())
    contrastive = bool(args.contrastive) if args.contrastive is not None else True
    spec = SweepSpec(percentages=pcts, seeds=tuple(seeds), train=tc, feature_mode=tc.feature_mode,
                     contrastive=contrastive)
    data = _load_data(args)
    rows = ablate_datasize(spec, data, mc, w)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table3.json").write_text(json.dumps(table3_json(rows), indent=2, sort_keys=True) + "\n")
    plot_rows = []
    with open(out / "sweep.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["percentage", "trajectories", "r1_at_05_mean", "r1_at_05_std", "map_at_05_mean",
                     "map_at_05_std"])
        for p, r in rows.items():
            m = r["mean_std"]
            wr.writerow([f"{p:g}", r["trajectories"], f"{m.r1_at_05:.4f}", f"{m.std['r1_at_05']:.4f}",
                         f"{m.map_at_05:.4f}", f"{m.std['map_at_05']:.4f}"])
            plot_rows.append({"percentage": p, "r1_at_05": m.r1_at_05, "map_at_05": m.map_at_05})
    (out / "sweep.svg").write_text(sweep_plot(plot_rows))
    text = format_rows(rows, "Training data size sweep")
    (out / "table3.txt").write_text(text + "\n")
    print(text)
    _write_manifest(out, args, {**_asdict_all(model=mc, train=tc, weights=w), "percentages": list(pcts),
                                "contrastive": contrastive},
                    [out / "table3.json", out / "sweep.csv", out / "sweep.svg"], seeds, started)


def cmd_predict(args, started):
    from .core import span_from_center_width
    from .figures import prediction_timeline
    from .model import load_checkpoint
    from .trainer import build_examples

    model, extra = load_checkpoint(args.checkpoint)
    data = _load_data(args)
    match = [q for q in data.train + data.val + data.test if q.qid == args.qid]
    if not match:
        raise UnknownQid(args.qid)
    q = match[0]
    ex = build_examples([q], data.store, _checkpoint_mode(extra))[0]
    out = model.predict(ex.traj, ex.query)
    order = sorted(range(len(out.spans)), key=lambda i: (-out.class_probs[i, 0], i))[:args.top_k]
    preds = []
    for i in order:
        c, w = (float(v) for v in out.spans[i])
        preds.append({"span": span_from_center_width(c, max(w, 1e-9), q.duration).as_list(),
                      "confidence": float(out.class_probs[i, 0])})
    payload = {
        "qid": q.qid, "vid": q.vid, "query": q.query, "duration": q.duration,
        "gt": q.relevant_windows[0].as_list(), "predictions": preds,
        "saliency": [float(s) for s in out.saliency],
    }
    svg_path = Path(args.out_svg)
    svg_path.parent.mkdir(parents=True, exist_ok=True)
    svg_path.write_text(prediction_timeline(payload))
    svg_path.with_suffix(".json").write_text(json.dumps(payload, indent=2) + "\n")
    if args.out:
        _write_manifest(args.out, args, {"qid": args.qid, "top_k": args.top_k},
                        [svg_path, svg_path.with_suffix(".json")], [], started)
    print(f"wrote {svg_path}")


COMMANDS = {
    "convert": cmd_convert,
    "synth": cmd_synth,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-features": cmd_ablate_features,
    "ablate-datasize": cmd_ablate_datasize,
    "predict": cmd_predict,
}


def _input_errors():
    from .convert import EmptyDataset as ConvertEmpty, ValidationError
    from .features import FeatureError
    from .metrics import EmptyDataset as MetricsEmpty
    from .trainer import DataFeatureMismatch, PercentageTooSmall
    return (ConfigError, ConvertEmpty, MetricsEmpty, ValidationError, FeatureError, DataFeatureMismatch,
            PercentageTooSmall, UnknownQid, FileNotFoundError, json.JSONDecodeError, ValueError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        import torch
        torch.set_num_threads(args.threads or os.cpu_count() or 1)
        COMMANDS[args.command](args, started)
    except _input_errors() as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
