"""Command-line entry points: synth, extract, train, eval and score.

Exit codes are 0 on success, 1 for usage and configuration errors and 2 for
data errors. Options may also come from a plain-text ``key=value`` file
given with ``--config``; keys are the long option names with dashes or
underscores, and flags on the command line win over the file. Every run
logs its fully resolved options to stderr. ``SELD3D_THREADS`` caps the
number of clips processed in parallel (default 1).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import features as feat
from . import metrics, model as M, simulate as sim
from .core import ClipSpec, ParseError, RangeError, read_metadata, write_metadata
from .features import FeatureTensor
from .tensorio import FormatError, load_tensor, read_wav, save_tensor

log = logging.getLogger("seld3d")

REPORT_SCHEMA = 1
REPORT_FIELDS = (("er", "ER"), ("f1", "F1"), ("doa_error", "DOA_error"),
                 ("recall", "recall"), ("dist_error", "dist_error"))


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def n_threads():
    try:
        return max(1, int(os.environ.get("SELD3D_THREADS", "1")))
    except ValueError:
        raise UsageError("SELD3D_THREADS must be an integer")


def _map(fn, items):
    items = list(items)
    n = min(n_threads(), max(1, len(items)))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _hidden(text):
    try:
        sizes = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer sizes {text!r}")
    if not sizes:
        raise argparse.ArgumentTypeError("need at least one hidden layer")
    return sizes


def _bool(text):
    if isinstance(text, bool):
        return text
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="seld3d", description="Synthetic SELD data, features, training and scoring.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="key=value file with option defaults")
        sp.add_argument("-v", "--verbose", action="store_true", help="more logging")

    s = sub.add_parser("synth", help="render a synthetic dataset", formatter_class=fmt)
    common(s)
    s.add_argument("--out", type=Path, required=True, help="output dataset directory")
    s.add_argument("--clips", type=int, default=10, help="number of clips")
    s.add_argument("--seed", type=int, default=0, help="base seed")
    s.add_argument("--format", choices=sorted(feat.SPECS), default="foa", help="audio format")
    s.add_argument("--events", type=int, default=4, help="events per clip")
    s.add_argument("--min-frames", type=int, default=5, help="shortest event in label frames")
    s.add_argument("--max-frames", type=int, default=30, help="longest event in label frames")
    s.add_argument("--moving-fraction", type=float, default=0.0, help="share of moving events")
    s.add_argument("--snr-db", type=float, default=40.0, help="source to diffuse noise ratio")
    s.add_argument("--same-class-overlap", type=_bool, default=True,
                   help="allow overlapping events of one class (multi-task targets need false)")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("extract", help="compute feature tensors", formatter_class=fmt)
    common(e)
    e.add_argument("--data", type=Path, required=True, help="dataset directory with manifest.csv, or a WAV folder")
    e.add_argument("--out", type=Path, help="feature directory (default DATA/features_FORMAT)")
    e.add_argument("--format", choices=sorted(feat.SPECS), default="foa", help="audio format")
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="train the baseline model", formatter_class=fmt)
    common(t)
    t.add_argument("--data", type=Path, required=True, help="dataset directory with manifest.csv")
    t.add_argument("--out", type=Path, required=True, help="run directory for checkpoint and log")
    t.add_argument("--format", choices=sorted(feat.SPECS), default="foa", help="audio format")
    t.add_argument("--method", choices=("multi-accddoa", "mt"), default="multi-accddoa",
                   help="output format")
    t.add_argument("--loss", choices=("mse", "mae", "mspe", "mape"), default="mse",
                   help="multi-ACCDDOA base loss")
    t.add_argument("--dist-loss", choices=("mse", "mae", "mspe", "mape"), default="mse",
                   help="multi-task distance branch loss")
    t.add_argument("--dist-weight", type=float, default=1.0, help="weight of the distance term")
    t.add_argument("--context", type=int, default=2, help="feature frames on each side")
    t.add_argument("--hidden", type=_hidden, default=(256, 256), help="hidden layer sizes")
    t.add_argument("--leak", type=float, default=0.01, help="hidden leaky ReLU slope")
    t.add_argument("--head-scale", type=float, default=1.0, help="output layer init scale")
    t.add_argument("--epochs", type=int, default=250, help="maximum epochs")
    t.add_argument("--patience", type=int, default=75, help="early stopping patience")
    t.add_argument("--batch-size", type=int, default=256, help="frames per batch")
    t.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    t.add_argument("--weight-decay", type=float, default=0.0, help="decoupled weight decay")
    t.add_argument("--augment", type=_bool, default=False, help="random FOA rotations")
    t.add_argument("--seed", type=int, default=0, help="initialisation and shuffling seed")
    t.add_argument("--val-fraction", type=float, default=0.2, help="trailing share of clips for validation")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="score a checkpoint on a dataset, or CSV predictions",
                       formatter_class=fmt)
    common(v)
    v.add_argument("--checkpoint", type=Path, help="trained model (with --data)")
    v.add_argument("--data", type=Path, help="dataset directory with manifest.csv")
    v.add_argument("--subset", choices=("all", "train", "val"), default="all",
                   help="clips to evaluate, split as in training")
    v.add_argument("--val-fraction", type=float, default=0.2, help="trailing share of clips for validation")
    v.add_argument("--refs", type=Path, help="reference CSV directory (instead of a checkpoint)")
    v.add_argument("--preds", type=Path, help="prediction CSV directory")
    v.add_argument("--write-preds", type=Path, help="write predicted CSVs here")
    _report_args(v)
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("score", help="score prediction CSVs against references", formatter_class=fmt)
    common(c)
    c.add_argument("--refs", type=Path, required=True, help="reference CSV directory")
    c.add_argument("--preds", type=Path, required=True, help="prediction CSV directory")
    _report_args(c)
    c.set_defaults(func=cmd_score)
    p.commands = {"synth": s, "extract": e, "train": t, "eval": v, "score": c}
    return p


def _report_args(sp):
    sp.add_argument("--json", type=Path, help="write the JSON report here")
    sp.add_argument("--no-ci", action="store_true", help="skip jackknife intervals")
    sp.add_argument("--significance", type=float, default=0.05, help="interval significance level")


def apply_config_file(parser, argv):
    """Parse ``argv``; values from ``--config`` fill in anything not given as a flag."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sp = parser.commands[args.command]
    try:
        text = args.config.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}")
    actions = {a.dest: a for a in sp._actions if a.option_strings}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in actions or key in ("config", "help"):
            raise UsageError(f"{args.config}:{n}: unknown or malformed entry {line!r}")
        act = actions[key]
        val = val.strip()
        try:
            if act.const is True and act.nargs == 0:
                values[key] = _bool(val)
            else:
                values[key] = act.type(val) if act.type else val
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{args.config}:{n}: {exc}")
        if act.choices is not None and values[key] not in act.choices:
            raise UsageError(f"{args.config}:{n}: {key} must be one of {sorted(act.choices)}")
    sp.set_defaults(**values)
    return parser.parse_args(argv)


def log_config(args):
    for k, v in sorted(vars(args).items()):
        if k != "func":
            log.info("config %s=%s", k, v)


def _resolved_text(args):
    return "".join(f"{k}={v}\n" for k, v in sorted(vars(args).items()) if k != "func")


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    cfg = sim.SceneConfig(seed=args.seed, n_events=args.events,
                          event_frames=(args.min_frames, args.max_frames),
                          moving_fraction=args.moving_fraction, snr_db=args.snr_db,
                          same_class_overlap=args.same_class_overlap)
    try:
        cfg.validate()
    except sim.ConfigError as exc:
        raise UsageError(str(exc))
    rows = sim.synth_dataset(cfg, args.clips, args.out, fmt=args.format)
    (args.out / "synth_config.txt").write_text(_resolved_text(args), encoding="utf-8")
    log.info("wrote %d clips to %s", len(rows), args.out)
    return 0


def _audio_items(data: Path, fmt):
    if (data / "manifest.csv").exists():
        return [(cid, wav) for cid, _, wav, _ in sim.read_manifest(data)]
    if data.is_dir():
        return [(p.stem, p) for p in sorted(data.glob("*.wav"))]
    raise DataError(f"{data} is neither a dataset nor a WAV folder")


def _load_audio(path, fmt):
    sr, audio = read_wav(path)
    clip = ClipSpec()
    if sr != clip.sample_rate:
        raise DataError(f"{path}: sample rate {sr}, expected {clip.sample_rate}")
    return audio


def cmd_extract(args):
    items = _audio_items(args.data, args.format)
    out = args.out or args.data / f"features_{args.format}"
    out.mkdir(parents=True, exist_ok=True)

    def one(item):
        cid, wav = item
        target = out / f"{cid}.s3dt"
        if target.exists():
            return cid, "skipped"
        try:
            f = feat.extract(_load_audio(wav, args.format), args.format)
        except (OSError, ValueError, DataError) as exc:
            return cid, f"failed: {exc}"
        tmp = target.with_suffix(".tmp")
        save_tensor(f.data, tmp)
        tmp.replace(target)
        return cid, "written"

    results = _map(one, items)
    failed = [(c, s) for c, s in results if s.startswith("failed")]
    for cid, status in failed:
        log.error("%s %s", cid, status)
    log.info("%d written, %d skipped, %d failed",
             sum(s == "written" for _, s in results), sum(s == "skipped" for _, s in results), len(failed))
    if failed:
        raise DataError(f"{len(failed)} clip(s) failed")
    return 0


def _dataset_clips(data: Path, fmt):
    """``(clip_id, FeatureTensor, events)`` per manifest row; cached features are reused."""
    if not (data / "manifest.csv").exists():
        raise DataError(f"{data} has no manifest.csv")
    cache = data / f"features_{fmt}"

    def one(row):
        cid, _, wav, csv_path = row
        cached = cache / f"{cid}.s3dt"
        spec = feat.SPECS[fmt]
        if cached.exists():
            arr = load_tensor(cached)
            if arr.shape != spec.shape:
                raise DataError(f"{cached}: shape {arr.shape}, expected {spec.shape}")
            f = FeatureTensor(spec, arr)
        else:
            f = feat.extract(_load_audio(wav, fmt), fmt)
        return cid, f, read_metadata(csv_path)
    return _map(one, sim.read_manifest(data))


def split_clips(n, val_fraction):
    if not 0 < val_fraction < 1:
        raise UsageError("val-fraction must be in (0, 1)")
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise DataError(f"need more than {n_val} clips to split off a validation set")
    return n - n_val


def cmd_train(args):
    cfg = M.ModelConfig(fmt=args.format, method=args.method, context=args.context,
                        hidden=tuple(args.hidden), seed=args.seed, lr=args.lr,
                        max_epochs=args.epochs, patience=args.patience, batch_size=args.batch_size,
                        loss=args.loss, dist_loss=args.dist_loss, dist_weight=args.dist_weight,
                        weight_decay=args.weight_decay, augment=args.augment,
                        leak=args.leak, head_scale=args.head_scale)
    try:
        cfg.validate()
        model = M.init_model(cfg)
    except (M.ConfigError, ValueError) as exc:
        raise UsageError(str(exc))
    clips = _dataset_clips(args.data, args.format)
    n_train = split_clips(len(clips), args.val_fraction)
    pairs = [(f, ev) for _, f, ev in clips]
    try:
        tr = M.build_frame_data(pairs[:n_train], cfg)
        va = M.build_frame_data(pairs[n_train:], cfg)
    except (ValueError, M.EmptyDataset) as exc:
        raise DataError(str(exc))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    ckpt = M.train(model, tr, va, log_path=args.out / "train_log.csv", verbose=args.verbose)
    M.save_checkpoint(ckpt, args.out / "model.s3dc")
    log.info("best epoch %d, validation loss %.6g", ckpt.epoch, ckpt.best_val_loss)
    return 0


def _csv_pairs(refs: Path, preds: Path):
    if not refs.is_dir() or not preds.is_dir():
        raise DataError("--refs and --preds must be directories")
    ref_files = {p.name: p for p in sorted(refs.glob("*.csv"))}
    if not ref_files:
        raise DataError(f"no CSV files in {refs}")
    missing = [n for n in ref_files if not (preds / n).exists()]
    if missing:
        raise DataError(f"predictions missing for {len(missing)} clip(s), e.g. {missing[0]}")
    return [(n, read_metadata(p), read_metadata(preds / n)) for n, p in ref_files.items()]


def _score_pairs(pairs, args):
    clip = ClipSpec()
    counts = []
    for i, (name, refs, preds) in enumerate(pairs):
        try:
            counts.append(metrics.score_segments(refs, preds, clip.label_frames, clip_id=i))
        except metrics.GridMismatch as exc:
            raise DataError(f"{name}: {exc}")
    try:
        use_ci = not args.no_ci and len(counts) >= 2
        if not args.no_ci and len(counts) < 2:
            log.warning("jackknife needs two clips; reporting without intervals")
        scores = metrics.evaluate(counts, ci=use_ci, significance=args.significance)
    except metrics.EmptyReference as exc:
        raise DataError(str(exc))
    report = make_report(scores, len(counts), args.significance if use_ci else None)
    print(format_report(report))
    if args.json:
        args.json.parent.mkdir(parents=True, exist_ok=True)
        args.json.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def _num(x):
    x = float(x)
    return None if math.isnan(x) else x


def make_report(scores: metrics.Scores, n_clips, significance=None):
    report = {"schema": REPORT_SCHEMA, "n_clips": n_clips}
    for key, field_name in REPORT_FIELDS:
        report[key] = _num(getattr(scores, field_name))
    report["ci"] = {key: [_num(scores.ci[f][1]), _num(scores.ci[f][2])]
                    for key, f in REPORT_FIELDS if f in scores.ci}
    report["significance"] = significance
    return report


def format_report(report):
    head = f"{'metric':<12}{'value':>10}  interval"
    lines = [head]
    for key, _ in REPORT_FIELDS:
        v = report[key]
        val = "nan" if v is None else f"{v:.4f}"
        ci = report["ci"].get(key)
        rng = "" if ci is None else "[" + ", ".join("nan" if c is None else f"{c:.4f}" for c in ci) + "]"
        lines.append(f"{key:<12}{val:>10}  {rng}")
    lines.append(f"clips: {report['n_clips']}")
    return "\n".join(lines)


def cmd_score(args):
    return _score_pairs(_csv_pairs(args.refs, args.preds), args)


def cmd_eval(args):
    if args.refs or args.preds:
        if not (args.refs and args.preds) or args.checkpoint:
            raise UsageError("use --refs with --preds, or --checkpoint with --data")
        return _score_pairs(_csv_pairs(args.refs, args.preds), args)
    if not (args.checkpoint and args.data):
        raise UsageError("use --refs with --preds, or --checkpoint with --data")
    try:
        ckpt = M.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise DataError(f"{args.checkpoint}: {exc}")
    model = ckpt.model()
    clips = _dataset_clips(args.data, model.cfg.fmt)
    if args.subset != "all":
        n_train = split_clips(len(clips), args.val_fraction)
        clips = clips[:n_train] if args.subset == "train" else clips[n_train:]
    pairs = [(cid, events, M.predict_to_events(model, f)) for cid, f, events in clips]
    if args.write_preds:
        args.write_preds.mkdir(parents=True, exist_ok=True)
        for cid, _, preds in pairs:
            write_metadata(preds, args.write_preds / f"{cid}.csv")
    return _score_pairs(pairs, args)


def main(argv=None):
    parser = build_parser()
    try:
        args = apply_config_file(parser, argv)
    except UsageError as exc:
        print(f"seld3d: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    log_config(args)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return 1
    except (DataError, ParseError, RangeError, FormatError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
