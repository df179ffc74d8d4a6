"""Operator entry point: datagen -> train -> eval -> bench.

Every command takes an optional --config JSON file (defaults otherwise),
writes artifacts with the config echo and tool version embedded, and
exits 0 on success, 1 on usage/config errors, 2 on runtime aborts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__, config as config_mod, toyenv, training
from .bench import run_scaling_sweep
from .config import ConfigError, RunConfig
from .embedder import Vocabulary
from .policy import act_closed_loop, count_params
from .training import Dataset, TrainingAborted, config_hash


def _dataset_paths(data_dir):
    return (os.path.join(data_dir, "train.jsonl"),
            os.path.join(data_dir, "val.jsonl"),
            os.path.join(data_dir, "vocab.txt"))


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def _provenance(cfg: RunConfig):
    echo = cfg.echo()
    return {"config": echo, "config_hash": config_hash(echo), "tool_version": __version__}


def cmd_datagen(cfg: RunConfig, out_dir=None):
    """Deterministic episode files + vocabulary built from the train split."""
    data_dir = out_dir or cfg.data.dir
    os.makedirs(data_dir, exist_ok=True)
    train_eps, val_eps = toyenv.generate_dataset(
        cfg.data.n_episodes, cfg.data.seed,
        n_distractors=cfg.data.n_distractors,
        resolution=cfg.model.image_size,
        noise_scale=cfg.data.expert_noise,
    )
    train_path, val_path, vocab_path = _dataset_paths(data_dir)
    toyenv.write_episodes(train_eps, train_path)
    toyenv.write_episodes(val_eps, val_path)
    vocab = Vocabulary.from_texts([ep.instruction for ep in train_eps])
    vocab.save(vocab_path)
    meta = _provenance(cfg)
    meta.update(n_train=len(train_eps), n_val=len(val_eps), vocab_size=len(vocab),
                expert_success=float(np.mean([ep.success for ep in train_eps + val_eps])))
    _write_json(os.path.join(data_dir, "dataset_meta.json"), meta)
    print(f"datagen: {len(train_eps)} train / {len(val_eps)} val episodes -> {data_dir}")
    return data_dir


def load_dataset(cfg: RunConfig):
    train_path, val_path, vocab_path = _dataset_paths(cfg.data.dir)
    for p in (train_path, val_path, vocab_path):
        if not os.path.exists(p):
            raise ConfigError(f"missing dataset file {p}; run datagen first")
    return Dataset(
        train=toyenv.read_episodes(train_path),
        val=toyenv.read_episodes(val_path),
        vocab=Vocabulary.load(vocab_path),
    )


def resolve_model_config(cfg: RunConfig, vocab):
    """Model config with the vocabulary size grown to cover the dataset."""
    model = dataclasses.replace(cfg.model, vocab_size=max(cfg.model.vocab_size, len(vocab)))
    return model


def cmd_train(cfg: RunConfig, out_dir="out", stage1_only=False, quiet=False):
    """Two-stage training with early stopping; emits the best checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_dataset(cfg)
    train_cfg = cfg.training
    if stage1_only:
        train_cfg = dataclasses.replace(train_cfg, stage2_steps=0)
    model_cfg = resolve_model_config(cfg, dataset.vocab)

    def progress(entry):
        if not quiet:
            print("val " + json.dumps(entry), flush=True)

    result = training.train(dataset, model_cfg, train_cfg, progress=progress)

    echo = cfg.echo()
    echo["model"] = dataclasses.asdict(model_cfg)
    echo["training"] = dataclasses.asdict(train_cfg)
    prefix = os.path.join(out_dir, "checkpoint")
    training.save_checkpoint(result.params, {
        "config": echo, "step": result.step, "stage": result.stage,
        "val_loss": result.val_loss}, prefix)
    with open(os.path.join(out_dir, "train_log.jsonl"), "w") as f:
        for entry in result.log:
            f.write(json.dumps(entry) + "\n")
    print(f"train: best val L_vel {result.val_loss:.4f} at step {result.step} "
          f"(stage {result.stage}), {count_params(result.params)} params, "
          f"{result.wall_seconds:.1f}s -> {prefix}.json/.bin")
    return prefix, result


def cmd_eval(cfg: RunConfig, checkpoint_prefix, out_dir="out"):
    """Seeded rollouts + validation losses for a trained checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_dataset(cfg)
    params, manifest = training.load_checkpoint(checkpoint_prefix)
    expected = dataclasses.asdict(resolve_model_config(cfg, dataset.vocab))
    if manifest["config"].get("model") != expected:
        raise ConfigError("checkpoint model configuration does not match this config")

    rollouts = []
    for i in range(cfg.eval.n_rollouts):
        scene = toyenv.generate_scene(cfg.eval.seed + i, cfg.data.n_distractors)
        rollouts.append(act_closed_loop(
            scene, params, dataset.vocab, cfg.eval.max_steps,
            execute_steps=cfg.eval.execute_steps))

    pairs = [(i, t) for i, ep in enumerate(dataset.val) for t in range(len(ep))]
    val_vel, val_acc = training.evaluate_losses(params, dataset.vocab, dataset.val, pairs)
    times = [t for r in rollouts for t in r.chunk_times]
    report = _provenance(cfg)
    report.update(
        checkpoint_config_hash=manifest["config_hash"],
        checkpoint_step=manifest["step"],
        success_rate=float(np.mean([r.success for r in rollouts])),
        mean_steps=float(np.mean([r.steps for r in rollouts])),
        median_chunk_latency_ms=float(np.median(times) * 1e3),
        val_vel=val_vel,
        val_acc=val_acc,
        n_rollouts=len(rollouts),
    )
    _write_json(os.path.join(out_dir, "metrics.json"), report)
    print(f"eval: success {report['success_rate']:.2%} over {len(rollouts)} rollouts, "
          f"mean steps {report['mean_steps']:.1f}, "
          f"median latency {report['median_chunk_latency_ms']:.2f} ms/chunk, "
          f"val L_vel {val_vel:.4f}, val L_acc {val_acc:.4f}")
    return report


def cmd_bench(cfg: RunConfig, out_dir="out"):
    """FLOP table and wall-clock sweep for backbone vs attention."""
    os.makedirs(out_dir, exist_ok=True)
    report = run_scaling_sweep(
        cfg.model.backbone_config(), cfg.bench.lengths, cfg.bench.repeats)
    payload = _provenance(cfg)
    payload["report"] = report.as_dict()
    _write_json(os.path.join(out_dir, "scaling_report.json"), payload)
    print("L\tbackbone_flops\tbackbone_ms\tattention_flops\tattention_ms")
    for l, bf, bt, af, at in report.rows():
        print(f"{l}\t{bf}\t{bt * 1e3:.2f}\t{af}\t{at * 1e3:.2f}")
    print(f"bench: fitted exponents backbone {report.backbone_exponent:.2f}, "
          f"attention {report.attention_exponent:.2f}")
    return report


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ssmvla", description="selective state-space VLA at desk scale")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override this command's seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("datagen", help="generate episode files and vocabulary")
    common(p)
    p = sub.add_parser("train", help="two-stage behavior cloning")
    common(p)
    p.add_argument("--stage1-only", action="store_true",
                   help="skip stage 2 (velocity-only ablation)")
    p.add_argument("--lambda-acc", type=float, help="override acceleration-loss weight")
    p = sub.add_parser("eval", help="rollout evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint path prefix (without .json/.bin)")
    p = sub.add_parser("bench", help="sequence-length scaling sweep")
    common(p)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1

    try:
        cfg = config_mod.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            section = {"datagen": "data", "train": "training", "eval": "eval"}.get(args.command)
            if section:
                setattr(cfg, section, dataclasses.replace(getattr(cfg, section), seed=args.seed))
        if args.command == "train" and args.lambda_acc is not None:
            cfg.training = dataclasses.replace(cfg.training, lambda_acc=args.lambda_acc)

        if args.command == "datagen":
            cmd_datagen(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.out or "out", stage1_only=args.stage1_only)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.out or "out")
        elif args.command == "bench":
            cmd_bench(cfg, args.out or "out")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (TrainingAborted, RuntimeError) as e:
        print(f"abort: {e}", file=sys.stderr)
        return 2
    return 0
