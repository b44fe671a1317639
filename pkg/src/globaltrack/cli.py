"""``globaltrack`` command line: train, track, eval, proposals.

Exit codes: 0 ok, 1 usage/config error, 2 missing dataset, 3 checkpoint does
not match the configuration, 4 evaluation inputs missing or misaligned.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import config as cfgmod
from .data import load_image, read_sequence_dir, resize_normalize
from .evaluation import ALL_METRICS, EvalRun, SequenceRun, evaluate_run, format_report
from .geometry import xywh_to_xyxy, xyxy_to_xywh
from .model import GlobalTrack
from .modelcore import CheckpointError
from .tracker import GlobalTracker, read_results, write_results
from .training import NonFiniteLossError, train

log = logging.getLogger("globaltrack")

DEVICE_ENV = "GLOBALTRACK_DEVICE"
PROPOSALS_HEADER = "# globaltrack-proposals v1"

EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT, EXIT_EVAL = 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(code, message)  # both in args so it survives pickling
        self.code, self.message = code, message

    def __str__(self):
        return self.message


# --------------------------------------------------------------------------
# shared plumbing


def _device() -> str:
    dev = os.environ.get(DEVICE_ENV, "cpu")
    if dev != "cpu":
        raise CliError(EXIT_USAGE, f"{DEVICE_ENV}={dev!r}: only 'cpu' is supported")
    return dev


def _load_cfg(args) -> dict:
    try:
        return cfgmod.load_config(args.config, args.overrides)
    except cfgmod.ConfigError as e:
        raise CliError(EXIT_USAGE, str(e)) from None


def _model_keys_given(args) -> bool:
    """True when the user pinned model shape via a config file or overrides."""
    prefixes = ("model.", "rpn.", "rcnn.", "loss.")
    return bool(args.config) or any(o.split("=", 1)[0].strip().startswith(prefixes) for o in args.overrides)


def _load_model(path, cfg: dict, check_against_cfg: bool) -> GlobalTrack:
    if not Path(path).is_file():
        raise CliError(EXIT_CHECKPOINT, f"checkpoint not found: {path}")
    try:
        model, _, _ = GlobalTrack.load(path, cfgmod.model_config(cfg) if check_against_cfg else None)
    except (CheckpointError, KeyError, TypeError, ValueError) as e:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint {path} does not match the configuration: {e}") from None
    return model


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    _device()
    torch.set_num_threads(max(1, args.workers))
    try:
        main_mix = cfgmod.mixture(cfg, "data.mixture")
        pre = cfgmod.mixture(cfg, "data.pretrain_mixture")
    except cfgmod.DatasetError as e:
        raise CliError(EXIT_DATA, str(e)) from None
    except cfgmod.ConfigError as e:
        raise CliError(EXIT_USAGE, str(e)) from None
    if main_mix is None:
        raise CliError(EXIT_DATA, "no training data: set data.mixture or synth.sequences")
    phases = [("", main_mix)]
    if pre is not None:
        phases.insert(0, ("pretrain", pre))

    torch.manual_seed(args.seed)
    model = GlobalTrack(cfgmod.model_config(cfg))
    tcfg = cfgmod.train_config(cfg)
    resize = cfgmod.resize_spec(cfg)
    echo = {k: cfgmod._fmt(v) for k, v in cfg.items()}
    out = Path(args.out)
    for name, mix in phases:
        pairs = cfgmod.training_pairs(cfg, mix, args.seed)
        try:
            result = train(model, tcfg, pairs, out / name if name else out, args.seed, resize,
                           resume=not args.no_resume, config_echo=echo)
        except NonFiniteLossError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        if result.losses:
            log.info("%s: %d steps, final loss %.6f", name or "train", result.steps, result.losses[-1])
    (out / "config.cfg").write_text(cfgmod.dump_config(cfg))
    return 0


# --------------------------------------------------------------------------
# track


def _sequence_dirs(root: Path) -> List[Path]:
    if (root / "groundtruth.txt").is_file():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "groundtruth.txt").is_file())


def _track_one(job):
    ckpt, cfg, check, seq_dir, out_dir = job
    torch.set_num_threads(1)
    model = _load_model(ckpt, cfg, check)
    seq = read_sequence_dir(seq_dir)
    init = seq.boxes[0, 0]
    if not np.all(np.isfinite(init)):
        raise CliError(EXIT_DATA, f"{seq.name}: target absent in the first frame")
    records = GlobalTracker(model, cfgmod.tracker_config(cfg)).track_sequence(seq.frames, init)
    path = Path(out_dir) / f"{seq.name}.txt"
    write_results(path, records)
    return str(path)


def cmd_track(args) -> int:
    overrides = list(args.overrides)
    if args.tau is not None:
        overrides.append(f"track.tau={args.tau}")
    args.overrides = overrides
    cfg = _load_cfg(args)
    _device()
    root = Path(args.sequences)
    if not root.is_dir():
        raise CliError(EXIT_DATA, f"sequence directory not found: {root}")
    dirs = _sequence_dirs(root)
    if not dirs:
        raise CliError(EXIT_DATA, f"no sequences with groundtruth.txt under {root}")
    check = _model_keys_given(args)
    _load_model(args.checkpoint, cfg, check)  # fail fast before fanning out
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(args.seed)
    jobs = [(args.checkpoint, cfg, check, d, out) for d in dirs]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as ex:
            paths = list(ex.map(_track_one, jobs))
    else:
        paths = [_track_one(j) for j in jobs]
    for p in paths:
        log.info("wrote %s", p)
    return 0


# --------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    _load_cfg(args)
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    bad = set(metrics) - set(ALL_METRICS)
    if bad:
        raise CliError(EXIT_USAGE, f"unknown metrics {sorted(bad)}; valid: {', '.join(ALL_METRICS)}")
    res_dir, data_dir = Path(args.results), Path(args.dataset)
    if not data_dir.is_dir():
        raise CliError(EXIT_DATA, f"dataset directory not found: {data_dir}")
    results = sorted(res_dir.glob("*.txt")) if res_dir.is_dir() else []
    if not results:
        raise CliError(EXIT_EVAL, f"no results files in {res_dir}")
    seqs = {d.name: d for d in _sequence_dirs(data_dir)}
    run, errors = EvalRun(), []
    for path in results:
        name = path.stem
        if name not in seqs:
            errors.append(f"{name}: no matching sequence in {data_dir}")
            continue
        try:
            pred, scores, present = read_results(path)
        except ValueError as e:
            errors.append(str(e))
            continue
        gt = read_sequence_dir(seqs[name]).boxes[:, 0]
        if len(pred) != len(gt):
            errors.append(f"{name}: {len(pred)} result lines for {len(gt)} frames")
            continue
        run.sequences[name] = SequenceRun(pred, scores, present, gt)
    for name in sorted(set(seqs) - {p.stem for p in results}):
        errors.append(f"{name}: no results file")
    report = evaluate_run(run, metrics) if run.sequences else {"per_sequence": {}, "aggregate": {}, "curves": {}}
    report["errors"] = errors
    text = format_report(report)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_EVAL if errors else 0


# --------------------------------------------------------------------------
# proposals


def _parse_box(s: str) -> np.ndarray:
    vals = [float(v) for v in s.split(",")]
    if len(vals) != 4:
        raise CliError(EXIT_USAGE, f"box must be x,y,w,h, got {s!r}")
    if not (vals[2] > 0 and vals[3] > 0):
        raise CliError(EXIT_USAGE, f"box width and height must be positive, got {s!r}")
    return xywh_to_xyxy(np.asarray(vals))


def format_proposals(boxes: np.ndarray, scores: np.ndarray) -> str:
    lines = [PROPOSALS_HEADER]
    for b, s in zip(xyxy_to_xywh(boxes), scores):
        lines.append(f"{b[0]:.6f},{b[1]:.6f},{b[2]:.6f},{b[3]:.6f},{s:.6f}")
    return "\n".join(lines) + "\n"


def cmd_proposals(args) -> int:
    cfg = _load_cfg(args)
    _device()
    torch.manual_seed(args.seed)
    model = _load_model(args.checkpoint, cfg, _model_keys_given(args))
    resize = cfgmod.resize_spec(cfg)
    qimg, simg = load_image(args.query_image), load_image(args.search_image)
    qbox = _parse_box(args.query_box)
    q, qscale = resize_normalize(qimg, resize)
    x, sscale = resize_normalize(simg, resize)
    with torch.no_grad():
        z = model.query_features(model.features(torch.from_numpy(q)), qbox[None] * qscale)
        xm = model.features(torch.from_numpy(x))
        dets = model.propose(z, xm, tuple(x.shape[1:]), max(args.k, 1))[0]
    k = min(args.k, len(dets))
    text = format_proposals(dets.boxes[:k] / sscale, dets.scores[:k])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    keys = "config keys (set in a file, or as trailing key=value arguments):\n" + cfgmod.help_text()
    parser = argparse.ArgumentParser(prog="globaltrack", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=keys)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help=f"config file or preset name ({', '.join(cfgmod.PRESETS)})")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1, help="parallel workers (threads for train, processes for track)")
        return p

    kw = dict(formatter_class=argparse.RawDescriptionHelpFormatter, epilog=keys)
    p = common(sub.add_parser("train", help="train a model", **kw))
    p.add_argument("--out", required=True, help="output directory for checkpoints and train.log")
    p.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints in --out")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("track", help="track every sequence in a directory", **kw))
    p.add_argument("checkpoint")
    p.add_argument("sequences", help="a sequence directory or a directory of them")
    p.add_argument("--out", required=True, help="directory for <sequence>.txt results")
    p.add_argument("--tau", type=float, help="presence threshold (overrides track.tau)")
    p.set_defaults(func=cmd_track)

    p = common(sub.add_parser("eval", help="score results against groundtruth", **kw))
    p.add_argument("results", help="directory of <sequence>.txt results")
    p.add_argument("dataset", help="directory of sequences")
    p.add_argument("--metrics", default=",".join(ALL_METRICS), help=f"comma-separated subset of {', '.join(ALL_METRICS)}")
    p.add_argument("--out", help="report path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("proposals", help="dump top-k query-guided proposals", **kw))
    p.add_argument("checkpoint")
    p.add_argument("--query-image", required=True)
    p.add_argument("--query-box", required=True, help="x,y,w,h")
    p.add_argument("--search-image", required=True)
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--out", help="output path (default stdout)")
    p.set_defaults(func=cmd_proposals)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    # key=value overrides may follow the positionals and options in any order
    args, extra = parser.parse_known_args(argv)
    bad = [a for a in extra if a.startswith("-") or "=" not in a]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    args.overrides = extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
