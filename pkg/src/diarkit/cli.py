"""``diarkit`` command line: simulate, train, infer, score, selftest.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, read_matrices, save_checkpoint
from .config import Config, ConfigError, load_config
from .features import read_wav
from .score import RttmParseError, callhome_buckets, compute_der, format_rttm, read_rttm, voxconverse_buckets
from .simulate import SpecError, build_dataset, read_manifest
from .tensor import TrainingError

log = logging.getLogger("diarkit")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _config(args) -> Config:
    return load_config(args.config) if args.config else Config()


def _require(value, what: str):
    if not value:
        raise UsageError(f"missing {what}")
    return value


# ------------------------------------------------------------------ simulate
def cmd_simulate(args) -> int:
    cfg = _config(args)
    sim = cfg.simulate if args.seed is None else replace(cfg.simulate, seed=args.seed)
    if args.split:
        sim = replace(sim, split=args.split)
    if args.n is not None:
        sim = replace(sim, n_conversations=args.n)
    out = _require(args.out or cfg.paths.dataset_dir, "output directory (--out or [paths] dataset_dir)")
    manifest = build_dataset(out, sim, jobs=args.jobs, feature_config=cfg.features)
    print(manifest)
    return EXIT_OK


# --------------------------------------------------------------------- train
def cmd_train(args) -> int:
    from .training import examples_for, load_sessions, train

    cfg = _config(args)
    training = cfg.training if args.seed is None else replace(cfg.training, seed=args.seed)
    manifest = _require(args.manifest or cfg.paths.train_manifest, "training manifest")
    out = _require(args.out or cfg.paths.checkpoint, "checkpoint path (--out or [paths] checkpoint)")
    loss_log = args.loss_log or cfg.paths.loss_log or str(Path(out).with_suffix(".loss.csv"))
    if not Path(manifest).exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")

    model = cfg.model.build()
    sessions = load_sessions(manifest, cfg.features)
    examples = examples_for(model, sessions, training.chunk_seconds, cfg.features.hop_ms / 1000.0)
    if not examples:
        raise UsageError("manifest yields no training chunks")
    steps = args.steps or training.total_steps

    def on_step(step: int, loss: float) -> None:
        if step % max(1, training.checkpoint_every) == 0 or step == steps:
            save_checkpoint(model, cfg, out)
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, loss)

    try:
        train(model, examples, training, steps=steps, log_path=loss_log, on_step=on_step)
    except TrainingError as exc:
        print(f"error: {exc}; last good checkpoint kept at {out}", file=sys.stderr)
        return EXIT_NUMERIC
    print(out)
    return EXIT_OK


# --------------------------------------------------------------------- infer
_WORKER: dict = {}


def _init_worker(checkpoint: str, cfg: Config | None) -> None:
    model, snap = load_checkpoint(checkpoint)
    _WORKER["model"] = model
    _WORKER["cfg"] = cfg or snap


def _infer_one(job):
    from .pipeline import infer_session

    session, audio_path, profiles = job
    model, cfg = _WORKER["model"], _WORKER["cfg"]
    audio, _ = read_wav(audio_path, cfg.features.sample_rate)
    if profiles is not None:
        speakers, matrix = profiles
        return infer_session(session, model, cfg.inference, audio=audio,
                             feature_config=cfg.features, profiles=matrix, speakers=speakers)
    return infer_session(session, model, cfg.inference, audio=audio, feature_config=cfg.features)


def _load_profiles(path) -> dict[str, tuple[list[str], np.ndarray]]:
    """Container entries named ``<session>/<speaker>``, one profile vector each."""
    entries, _ = read_matrices(path)
    grouped: dict[str, list[tuple[str, np.ndarray]]] = {}
    for name, vec in entries.items():
        session, _, speaker = name.partition("/")
        if not speaker:
            raise UsageError(f"profile entry {name!r} is not <session>/<speaker>")
        grouped.setdefault(session, []).append((speaker, np.asarray(vec, dtype=np.float64)))
    return {s: ([k for k, _ in rows], np.stack([v for _, v in rows])) for s, rows in grouped.items()}


def cmd_infer(args) -> int:
    from .eda import EendEdaModel

    checkpoint = _require(args.checkpoint, "--checkpoint")
    model, snap = load_checkpoint(checkpoint)
    cfg = load_config(args.config) if args.config else snap
    if args.config and cfg.model != snap.model:
        raise UsageError("config [model] section does not match the checkpoint")
    if args.audio:
        jobs = [(Path(args.audio).stem, args.audio)]
    else:
        manifest = _require(args.manifest or cfg.paths.test_manifest, "--audio or --manifest")
        jobs = [(e.session, e.audio) for e in read_manifest(manifest)]
    profiles_path = args.profiles or cfg.paths.profiles
    profiles = None
    if not isinstance(model, EendEdaModel) and not cfg.inference.first_pass:
        profiles = _load_profiles(_require(profiles_path, "profile path (first pass disabled)"))
    work = []
    for session, audio in jobs:
        prof = None
        if profiles is not None:
            if session not in profiles:
                raise UsageError(f"no profiles for session {session}")
            prof = profiles[session]
        work.append((session, audio, prof))

    if args.jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker,
                                 initargs=(checkpoint, cfg)) as pool:
            results = list(pool.map(_infer_one, work))
    else:
        _WORKER.update(model=model, cfg=cfg)
        results = [_infer_one(w) for w in work]
    text = "".join(format_rttm(segs) for segs in results)
    out = args.out or cfg.paths.output_rttm
    if out:
        Path(out).write_text(text)
        print(out)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------- score
BUCKETS = {"none": None, "voxconverse": voxconverse_buckets, "callhome": callhome_buckets}


def cmd_score(args) -> int:
    cfg = _config(args)
    collar = cfg.inference.collar if args.collar is None else args.collar
    ref = read_rttm(_require(args.ref, "--ref"))
    hyp = read_rttm(_require(args.hyp, "--hyp"))
    report = compute_der(ref, hyp, collar=collar, bucket_rule=BUCKETS[args.buckets])
    print(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_json())
    return EXIT_OK


# ------------------------------------------------------------------ selftest
def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(verbose=True)
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--jobs", type=int, default=1, help="parallel sessions")
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="diarkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--split", choices=["train", "dev", "test"])
    p.add_argument("-n", type=int, default=None, help="number of conversations")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--manifest")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--loss-log", help="per-step loss CSV (default: <out>.loss.csv)")
    p.add_argument("--steps", type=int, default=None, help="override total steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="diarize audio to RTTM")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--audio", help="single WAV file")
    p.add_argument("--profiles", help="profile container (needed when first_pass = false)")
    p.add_argument("--out", help="output RTTM (default stdout)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", parents=[common], help="compute DER")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float, default=None)
    p.add_argument("--buckets", choices=sorted(BUCKETS), default="none")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("selftest", parents=[common], help="quick numerical self-check")
    p.set_defaults(func=cmd_selftest)
    return parser


def _limit_threads():
    threads = os.environ.get("DIARKIT_THREADS")
    if not threads:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, SpecError, UsageError, RttmParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
