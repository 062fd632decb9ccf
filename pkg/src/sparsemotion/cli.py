"""Command-line entry point: synth | train-prior | train-sparse | train-seq | infer | eval.

Every command writes into its run directory (``--out``) a resolved config
snapshot (``config.json``) and an append-only JSON-lines log (``log.jsonl``).
Failures print one JSON line ``{"error": <code>, "message": ...}`` to stderr
and exit with status 2 (1 for unexpected internal errors).

The data root defaults to ``$SPARSEMOTION_DATA`` (or ``./sparsemotion_data``);
default run directories live under ``<data root>/runs/<command>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .config import load_run_config
from .errors import DataError, MissingCheckpoint, SparseMotionError
from .kinematics import default_skeleton, load_skeleton, save_skeleton

DATA_ENV = "SPARSEMOTION_DATA"


def data_root(args):
    return Path(args.data or os.environ.get(DATA_ENV) or "sparsemotion_data")


def run_dir(args, command):
    return Path(args.out) if args.out else data_root(args) / "runs" / command


def _snapshot(out: Path, args, config, **extra):
    out.mkdir(parents=True, exist_ok=True)
    snap = {"command": args.command, "seed": args.seed, "config": config,
            "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                     if k not in ("out", "data")}, **extra}
    (out / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")


def _event(out: Path, **row):
    with open(out / "log.jsonl", "a") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def _skeleton(root: Path):
    p = root / "skeleton.json"
    return load_skeleton(p) if p.is_file() else default_skeleton()


def _clips(root: Path, split):
    d = root / split
    if not d.is_dir():
        raise DataError(f"no {split} clips: directory {d} does not exist")
    clips = dataio.load_motion_dir(d)
    if not clips:
        raise DataError(f"no .motion files in {d}")
    return clips


def _need(path: Path, what):
    if not Path(path).is_file():
        raise MissingCheckpoint(f"{what} checkpoint not found: {path}")
    return Path(path)


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    from dataclasses import asdict

    out = Path(args.out) if args.out else data_root(args)
    scfg = dataio.SynthConfig.from_dict(cfg["synth"])
    skeleton = default_skeleton()
    _snapshot(out, args, {"synth": asdict(scfg)})
    (out / "log.jsonl").unlink(missing_ok=True)
    save_skeleton(skeleton, out / "skeleton.json")
    table = dataio.build_embedding_table(list(scfg.classes), scfg.embedding_seed)
    dataio.save_embedding_table(table, out / "embeddings.json")
    counts = {}
    for split in ("train", "test"):
        clips = dataio.synth_generate(scfg, args.seed, skeleton, split=split)
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("*.motion"):
            old.unlink()
        for c in clips:
            dataio.save_motion(c, d / f"{c.clip_id}.motion", skeleton.hash)
        counts[split] = len(clips)
        _event(out, event="wrote_split", split=split, clips=len(clips))
    return {"out": str(out), **counts}


def cmd_train_prior(args, cfg):
    from .prior import FullPriorTrainer, TrainConfig

    root, out = data_root(args), run_dir(args, "train-prior")
    skeleton = _skeleton(root)
    clips = _clips(root, "train")
    if args.embedding_seed is not None:
        table = dataio.build_embedding_table(sorted({c.action_label for c in clips}), args.embedding_seed)
        clips = dataio.attach_embeddings(clips, table)
    tcfg = TrainConfig.from_dict(cfg["prior"])
    _snapshot(out, args, {"prior": cfg["prior"]})
    ckpt = out / "prior.ckpt"
    tr = FullPriorTrainer(clips, skeleton, tcfg, seed=args.seed, log_path=out / "log.jsonl")
    if args.resume and ckpt.is_file():
        from .nn.optim import load_checkpoint

        tr.restore(*load_checkpoint(ckpt))
    if tr.dropped:
        _event(out, event="excluded_clips_without_embeddings", count=tr.dropped)
    tr.train(max(0, tcfg.steps - tr.step))
    tr.save(ckpt)
    return {"checkpoint": str(ckpt), "param_hash": tr.store.hash(), "steps": tr.step}


def cmd_train_sparse(args, cfg):
    from .prior import SparseEncoderTrainer, TrainConfig, load_prior

    root, out = data_root(args), run_dir(args, "train-sparse")
    prior_path = _need(args.prior or data_root(args) / "runs" / "train-prior" / "prior.ckpt", "full prior")
    d = dict(cfg["sparse"])
    if args.mode:
        d["lambda_latent"] = 1.0 if args.mode == "extended" else 0.0
    tcfg = TrainConfig.from_dict(d)
    prior, header = load_prior(prior_path)
    skeleton = _skeleton(root)
    clips = _clips(root, "train")
    _snapshot(out, args, {"sparse": d}, prior_checkpoint=str(prior_path))
    tr = SparseEncoderTrainer(clips, skeleton, prior, tcfg, seed=args.seed, log_path=out / "log.jsonl",
                              prior_hash=header["param_hash"])
    if tr.dropped:
        _event(out, event="excluded_clips_without_embeddings", count=tr.dropped)
    tr.train()
    ckpt = tr.save(out / "sparse.ckpt")
    return {"checkpoint": str(ckpt), "prior_hash": tr.prior_hash, "mode": "extended" if tcfg.lambda_latent else "paper"}


def cmd_train_seq(args, cfg):
    from .prior import load_prior, load_sparse_encoder
    from .sequence import SequenceTrainConfig, SequenceTrainer, apply_ablation

    root, out = data_root(args), run_dir(args, "train-seq")
    prior_path = _need(args.prior or root / "runs" / "train-prior" / "prior.ckpt", "full prior")
    sparse_path = _need(args.sparse or root / "runs" / "train-sparse" / "sparse.ckpt", "sparse encoder")
    tcfg = apply_ablation(SequenceTrainConfig.from_dict(cfg["sequence"]), args.ablation)
    prior, _ = load_prior(prior_path)
    encoder, _ = load_sparse_encoder(sparse_path)
    skeleton = _skeleton(root)
    clips = _clips(root, "train")
    from dataclasses import asdict

    _snapshot(out, args, {"sequence": asdict(tcfg)}, prior_checkpoint=str(prior_path),
              sparse_checkpoint=str(sparse_path))
    tr = SequenceTrainer(clips, skeleton, encoder, prior, tcfg, seed=args.seed,
                         cache_dir=out / "latent_cache", log_path=out / "log.jsonl")
    _event(out, event="latent_cache", hits=tr.cache.hits, misses=tr.cache.misses)
    tr.train()
    ckpt = tr.save(out / "sequence.ckpt")
    return {"checkpoint": str(ckpt), "ablation": args.ablation or "none"}


def _load_chain(args, root):
    from .eval import ModelChain
    from .prior import load_sparse_encoder
    from .sequence import load_sequence_model

    seq_path = _need(args.seq or root / "runs" / "train-seq" / "sequence.ckpt", "sequence model")
    model, header = load_sequence_model(seq_path)
    sparse_path = _need(args.sparse or root / "runs" / "train-sparse" / "sparse.ckpt", "sparse encoder")
    encoder, _ = load_sparse_encoder(sparse_path)
    return ModelChain(model, encoder, name=str(seq_path.parent.name)), header


def cmd_infer(args, cfg):
    from .sequence import infer_motion
    from .signals import signals_from_clip

    root, out = data_root(args), run_dir(args, "infer")
    chain, _ = _load_chain(args, root)
    skeleton = _skeleton(root)
    src = Path(args.input) if args.input else root / "test"
    if src.is_dir():
        clips = dataio.load_motion_dir(src)
    elif src.is_file():
        clips = [dataio.load_motion(src)]
    else:
        raise DataError(f"input not found: {src}")
    if not clips:
        raise DataError(f"no .motion files in {src}")
    _snapshot(out, args, {"eval": cfg["eval"]})
    written = []
    for c in clips:
        res = infer_motion(chain.model, chain.encoder, skeleton, signals_from_clip(skeleton, c),
                           exact=bool(cfg["eval"]["exact"]))
        pred = dataio.MotionClip(c.fps, res.local_rot, res.root_translation, c.action_label,
                                 clip_id=f"{c.clip_id}_pred")
        path = out / f"{c.clip_id}.motion"
        dataio.save_motion(pred, path, skeleton.hash)
        if args.csv:
            dataio.export_positions_csv(res.positions, out / f"{c.clip_id}_positions.csv", c.fps)
        written.append(path.name)
        _event(out, event="inferred", clip=c.clip_id, frames=c.n_frames)
    return {"out": str(out), "clips": len(written)}


def cmd_eval(args, cfg):
    from .eval import evaluate_dataset
    from .prior import load_prior

    root, out = data_root(args), run_dir(args, "eval")
    chain, header = _load_chain(args, root)
    eval_prior_path = _need(args.eval_prior or root / "runs" / "eval-prior" / "prior.ckpt", "evaluation prior")
    eval_prior, _ = load_prior(eval_prior_path)
    baseline = None
    if args.baseline_seq:
        from .eval import ModelChain
        from .sequence import load_sequence_model

        bmodel, _ = load_sequence_model(_need(args.baseline_seq, "baseline sequence model"))
        baseline = ModelChain(bmodel, chain.encoder, name=Path(args.baseline_seq).parent.name)
    skeleton = _skeleton(root)
    clips = _clips(root, "test")
    _snapshot(out, args, {"eval": cfg["eval"]}, eval_prior_checkpoint=str(eval_prior_path))
    chain.exact = bool(cfg["eval"]["exact"])
    report = evaluate_dataset(chain, clips, skeleton, eval_prior, training_prior_hash=header["prior_hash"],
                              baseline=baseline, window_stride=int(cfg["eval"]["window_stride"]))
    path = report.write(out)
    _event(out, event="report", **report.metrics())
    return {"report": str(path), **report.metrics()}


COMMANDS = {
    "synth": cmd_synth,
    "train-prior": cmd_train_prior,
    "train-sparse": cmd_train_sparse,
    "train-seq": cmd_train_seq,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def build_parser():
    p = argparse.ArgumentParser(prog="sparsemotion", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="run config JSON")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", help="run directory")
        s.add_argument("--data", help=f"data root (default ${DATA_ENV})")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="config override, repeatable")
        if name == "train-prior":
            s.add_argument("--embedding-seed", type=int, default=None,
                           help="rebuild label embeddings with this seed (for an evaluation prior)")
            s.add_argument("--resume", action="store_true")
        if name in ("train-sparse", "train-seq"):
            s.add_argument("--prior", help="full prior checkpoint")
        if name == "train-sparse":
            s.add_argument("--mode", choices=["paper", "extended"], default=None)
        if name == "train-seq":
            s.add_argument("--sparse", help="sparse encoder checkpoint")
            s.add_argument("--ablation", choices=["no-motion-prior", "no-motion-loss"], default=None)
        if name in ("infer", "eval"):
            s.add_argument("--seq", help="sequence model checkpoint")
            s.add_argument("--sparse", help="sparse encoder checkpoint")
        if name == "infer":
            s.add_argument("--input", help=".motion file or directory (default <data>/test)")
            s.add_argument("--csv", action="store_true", help="also write global joint positions as CSV")
        if name == "eval":
            s.add_argument("--eval-prior", help="independently trained full prior")
            s.add_argument("--baseline-seq", help="second sequence model for per-action comparison")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.seed < 0:
        args.seed = int(np.uint64(args.seed))
    try:
        cfg = load_run_config(args.config, args.set)
        result = COMMANDS[args.command](args, cfg)
    except SparseMotionError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        print(json.dumps({"error": "InternalError", "message": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
