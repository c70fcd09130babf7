"""Command-line entry point: ``trt <command> [options]``.

Exit codes: 0 ok, 2 usage/config error, 3 data error, 4 model mismatch.
Every command writes its fully resolved configuration as
``<command>.config.json`` next to its outputs. ``--config file.json``
supplies defaults that explicit flags override.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import anomaly, data, features, models, optim, regularity
from .errors import ArchError, FormatError, IoError, NoData, SpecError, WrongModel

log = logging.getLogger("tempreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4


class UsageError(Exception):
    pass


class ModelMismatch(Exception):
    pass


# -- argument parsing ------------------------------------------------------------

def _strides(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad stride list {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"bad stride list {text!r}")
    return vals


def _anomaly(text: str) -> dict:
    """``START:END[:BEHAVIOUR[:M1,M2...]]``"""
    parts = str(text).split(":")
    try:
        seg = {"start": int(parts[0]), "end": int(parts[1])}
    except (IndexError, ValueError):
        raise argparse.ArgumentTypeError(f"anomaly must look like START:END[:BEHAVIOUR], got {text!r}")
    seg["behavior"] = parts[2] if len(parts) > 2 else "speed4"
    if len(parts) > 3:
        seg["movers"] = [int(m) for m in parts[3].split(",")]
    return seg


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of defaults; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="trt", description="Learn temporal regularity in video with autoencoders.")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {}

    p = cmds["gen-synth"] = sub.add_parser("gen-synth", help="write a synthetic video and its labels")
    _common(p)
    p.add_argument("--out")
    scene = data.SceneSpec()
    p.add_argument("--len", dest="length", type=int, default=scene.length)
    p.add_argument("--height", type=int, default=scene.height)
    p.add_argument("--width", type=int, default=scene.width)
    p.add_argument("--movers", type=int, default=scene.movers)
    p.add_argument("--radius", type=float, default=scene.radius, help="blob Gaussian sigma in pixels")
    p.add_argument("--background", type=float, default=scene.background)
    p.add_argument("--t0", type=int, default=0, help="clock offset into the scene")
    p.add_argument("--anomaly", type=_anomaly, action="append", default=None,
                   help="irregular segment START:END[:speed4|reverse|teleport[:MOVERS]]")
    p.add_argument("--format", choices=["pgm", "raw"], default="pgm")

    p = cmds["extract-features"] = sub.add_parser("extract-features", help="dump HOG+HOF grid descriptors")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--L", type=int, default=15)
    p.add_argument("--grid-step", type=int, default=5)
    p.add_argument("--flow-iters", type=int, default=100)
    p.add_argument("--alpha", type=float, default=0.05)

    p = cmds["train"] = sub.add_parser("train", help="train an autoencoder")
    _common(p)
    p.add_argument("--model", choices=["conv", "fc"], default="conv")
    p.add_argument("--preset", choices=["paper", "tiny"], default="tiny")
    p.add_argument("--data", nargs="+", help="frame directories (conv) or descriptor CSVs (fc)")
    p.add_argument("--out")
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--filters", type=_strides, default=None, help="conv filter counts, e.g. 16,8,4")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--lr-patience", type=int, default=1000)
    p.add_argument("--lr-drop", type=float, default=0.1)
    p.add_argument("--sample-stride", type=int, default=2)
    p.add_argument("--strides", type=_strides, default=(1, 2, 3))
    p.add_argument("--L", type=int, default=15)
    p.add_argument("--precision", choices=["single", "double"], default="single")

    p = cmds["score"] = sub.add_parser("score", help="per-frame regularity scores")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="frame directory (conv) or descriptor CSV (fc)")
    p.add_argument("--out")
    p.add_argument("--preset", choices=["paper", "tiny"], default=None)
    p.add_argument("--L", type=int, default=15)

    p = cmds["detect"] = sub.add_parser("detect", help="abnormal events from a score CSV")
    _common(p)
    p.add_argument("--scores")
    p.add_argument("--out")
    p.add_argument("--persistence", type=float, default=None, help="default: 0.2 x score range")
    p.add_argument("--window", type=int, default=50)

    p = cmds["eval"] = sub.add_parser("eval", help="compare events and scores with ground truth")
    _common(p)
    p.add_argument("--events")
    p.add_argument("--labels")
    p.add_argument("--scores")
    p.add_argument("--out")

    p = cmds["synth-regular"] = sub.add_parser("synth-regular", help="regular-frame synthesis and regularity map")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--preset", choices=["paper", "tiny"], default=None)

    p = cmds["predict"] = sub.add_parser("predict", help="predict past and future frames from one frame")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--frame")
    p.add_argument("--out")
    p.add_argument("--preset", choices=["paper", "tiny"], default=None)
    return parser, cmds


REQUIRED = {
    "gen-synth": ["out"],
    "extract-features": ["data", "out"],
    "train": ["data", "out"],
    "score": ["checkpoint", "data", "out"],
    "detect": ["scores", "out"],
    "eval": ["events", "labels", "scores", "out"],
    "synth-regular": ["checkpoint", "data", "out"],
    "predict": ["checkpoint", "frame", "out"],
}


def parse_args(argv: list[str]):
    parser, cmds = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command in cmds:
        try:
            cfg = json.loads(Path(known.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {known.config}: {exc}")
        if not isinstance(cfg, dict):
            parser.error("config file must hold a JSON object")
        sub = cmds[known.command]
        # keys may be spelled as the flag ("batch-size", "len") or as its dest
        names = {}
        for a in sub._actions:
            names[a.dest] = a.dest
            for opt in a.option_strings:
                names[opt.lstrip("-")] = a.dest
                names[opt.lstrip("-").replace("-", "_")] = a.dest
        names.pop("help", None)
        names.pop("config", None)
        unknown = sorted(k for k in cfg if k not in names)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for k, v in cfg.items():
            dest = names[k]
            if dest in ("strides", "filters") and v is not None:
                v = _strides(",".join(str(x) for x in v) if isinstance(v, list) else v)
            if dest == "anomaly" and v is not None:
                v = [_anomaly(x) if isinstance(x, str) else x for x in v]
            defaults[dest] = v
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) in (None, [])]
    if missing:
        cmds[args.command].error(f"missing required option(s): {', '.join(missing)}")
    return args


def _resolved(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "config":
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def write_config(out_dir: Path, args) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{args.command}.config.json"
    path.write_text(json.dumps(_resolved(args), indent=1, sort_keys=True) + "\n")


def _out_dir_for_file(path: str) -> Path:
    return Path(path).resolve().parent


# -- helpers ----------------------------------------------------------------------

def _is_frame_dir(path: Path) -> bool:
    return path.is_dir() and ((path / data.RAW_META).exists() or any(path.glob("*.pgm")))


def _load_model(args) -> models.Autoencoder:
    try:
        model = models.load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise IoError(f"{args.checkpoint}: {exc}") from exc
    except FormatError as exc:
        raise ModelMismatch(str(exc)) from exc
    if getattr(args, "preset", None) and model.config.preset != args.preset:
        raise ModelMismatch(f"checkpoint preset {model.config.preset!r} != requested {args.preset!r}")
    return model


def _frames_for(model: models.Autoencoder, path, threads: int) -> data.FrameSequence:
    return data.load_frames(path, resize=tuple(model.input_shape[1:]), threads=threads)


# -- commands ---------------------------------------------------------------------

def cmd_gen_synth(args) -> None:
    spec = data.SceneSpec(
        length=args.length, height=args.height, width=args.width, movers=args.movers,
        radius=args.radius, background=args.background, t0=args.t0, irregular=args.anomaly or [],
    )
    seq, labels = data.synth_video_generate(spec, args.seed)
    out = Path(args.out)
    if args.format == "raw":
        data.save_raw(seq, out)
    else:
        data.save_frames(seq, out)
    data.write_labels(out / "labels.csv", labels, seq.ids)
    write_config(out, args)
    log.info("wrote %d frames to %s", len(seq), out)


def cmd_extract_features(args) -> None:
    seq = data.load_frames(args.data, threads=args.threads)
    descs = features.extract_grid_descriptors(seq, args.grid_step, args.L, args.flow_iters, args.alpha)
    features.write_descriptors(args.out, descs)
    write_config(_out_dir_for_file(args.out), args)
    log.info("wrote %d descriptors to %s", len(descs), args.out)


def _conv_dataset(args, cfg: models.ArchConfig) -> list:
    T, h, w = cfg.input_shape
    sampling = data.SamplingConfig(T=T, sample_stride=args.sample_stride, strides_enabled=args.strides)
    pool = []
    for k, path in enumerate(args.data):
        p = Path(path)
        if not _is_frame_dir(p):
            raise UsageError(f"{path}: conv training needs a directory of PGM frames or frames.u8")
        seq = data.load_frames(p, resize=(h, w), threads=args.threads)
        pool.extend(data.sample_cuboids(seq, sampling, source=k))
    return pool


def _fc_dataset(args) -> np.ndarray:
    vecs = []
    for path in args.data:
        p = Path(path)
        if p.is_dir() or p.suffix.lower() != ".csv":
            raise UsageError(f"{path}: --model fc needs descriptor CSV input (see extract-features)")
        vecs.extend(d.vector for d in features.read_descriptors(p, args.L))
    if not vecs:
        raise NoData("descriptor files are empty")
    return np.stack(vecs)


def cmd_train(args) -> None:
    dtype = np.float32 if args.precision == "single" else np.float64
    try:
        tcfg = optim.TrainConfig.for_model(
            "conv_ae" if args.model == "conv" else "fc_ae", batch_size=args.batch_size, learning_rate=args.lr,
            weight_decay=args.weight_decay, max_iters=args.iters, lr_patience=args.lr_patience,
            lr_drop_factor=args.lr_drop, seed=args.seed,
        )
        if args.model == "conv":
            data.SamplingConfig(T=args.T or 1, sample_stride=args.sample_stride, strides_enabled=args.strides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.model == "conv":
        cfg = models.conv_ae_config(args.preset, T=args.T, filters=list(args.filters) if args.filters else None)
        dataset = _conv_dataset(args, cfg)
        model = models.build_conv_ae(cfg, rng_seed=args.seed, dtype=dtype)
    else:
        if args.T is not None or args.filters is not None:
            raise UsageError("--T and --filters apply to the conv model only")
        cfg = models.fc_ae_config(args.preset)
        dataset = _fc_dataset(args)
        model = models.build_fc_ae(cfg, rng_seed=args.seed, dtype=dtype)
    # record the effective hyperparameters, not the None placeholders
    args.batch_size, args.lr, args.weight_decay = tcfg.batch_size, tcfg.learning_rate, tcfg.weight_decay
    log.info("training %s/%s on %d samples for %d iterations", args.model, args.preset, len(dataset), args.iters)
    result = optim.train(model, dataset, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models.save_checkpoint(model, out / "model.trae")
    with open(out / "loss.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iter", "loss"])
        for i, loss in enumerate(result.losses, 1):
            wr.writerow([i, repr(float(loss))])
    write_config(out, args)


def cmd_score(args) -> None:
    model = _load_model(args)
    if model.kind == "conv_ae":
        if not _is_frame_dir(Path(args.data)):
            raise UsageError(f"{args.data}: conv scoring needs a frame directory")
        seq = _frames_for(model, args.data, args.threads)
        series = regularity.regularity_series(seq, model, threads=args.threads)
    else:
        if Path(args.data).is_dir():
            raise UsageError(f"{args.data}: fc scoring needs a descriptor CSV")
        series = regularity.feature_regularity_series(features.read_descriptors(args.data, args.L), model)
    regularity.write_scores(args.out, series)
    write_config(_out_dir_for_file(args.out), args)


def cmd_detect(args) -> None:
    series = regularity.read_scores(args.scores)
    if len(series) == 0:
        raise NoData(f"{args.scores}: no scores")
    minima = anomaly.persistent_minima(series.s, args.persistence)
    events = anomaly.build_events([m.index for m in minima], len(series), args.window)
    ids = series.frame_ids
    for ev in events:
        ev.start, ev.end = int(ids[ev.start]), int(ids[ev.end])
        ev.minima = [int(ids[m]) for m in ev.minima]
    anomaly.write_events(args.out, events)
    write_config(_out_dir_for_file(args.out), args)


def cmd_eval(args) -> None:
    events = anomaly.read_events(args.events)
    label_ids, labels = data.read_labels(args.labels)
    series = regularity.read_scores(args.scores)
    lookup = dict(zip(label_ids.tolist(), labels.tolist()))
    missing = [int(i) for i in series.frame_ids if int(i) not in lookup]
    if missing:
        raise NoData(f"labels lack frames {missing[:5]}...")
    scored_labels = np.array([lookup[int(i)] for i in series.frame_ids])
    correct, fa, missed = anomaly.match_events(events, anomaly.label_intervals(labels, label_ids))
    auc, eer = anomaly.roc_auc_eer(series.s, scored_labels)
    report = anomaly.EvalReport(correct, fa, missed, auc, eer)
    anomaly.write_report(args.out, report)
    write_config(_out_dir_for_file(args.out), args)


def cmd_synth_regular(args) -> None:
    model = _load_model(args)
    if model.kind != "conv_ae":
        raise WrongModel("regular-frame synthesis needs a conv model")
    seq = _frames_for(model, args.data, args.threads)
    field = regularity.frame_error_field(model, seq, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_pgm(out / "regular.pgm", regularity.synthesize_from_field(seq.frames, field.e))
    data.write_pgm(out / "map.pgm", regularity.normalized_error_map(field.e))
    write_config(out, args)


def cmd_predict(args) -> None:
    model = _load_model(args)
    if model.kind != "conv_ae":
        raise WrongModel("prediction needs a conv model")
    frame = data.resize_bilinear(data.read_pgm(args.frame) / 255.0, tuple(model.input_shape[1:]))
    pred = regularity.predict_past_future(frame, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(pred):
        data.write_pgm(out / f"pred_{k:02d}.pgm", img)
    write_config(out, args)


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "extract-features": cmd_extract_features,
    "train": cmd_train,
    "score": cmd_score,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "synth-regular": cmd_synth_regular,
    "predict": cmd_predict,
}
# commands whose --out names a file rather than a directory
FILE_OUTPUT = {"extract-features", "score", "detect", "eval"}


def _limit_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=max(1, n))


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("TRT_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    limiter = _limit_threads(args.threads)
    try:
        if args.command in FILE_OUTPUT:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args)
    except (UsageError, SpecError, ArchError, argparse.ArgumentTypeError) as exc:
        print(f"trt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelMismatch, WrongModel) as exc:
        print(f"trt {args.command}: model mismatch: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (NoData, IoError, FormatError, OSError, ValueError, KeyError) as exc:
        print(f"trt {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
