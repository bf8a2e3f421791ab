"""Command-line entry points: data generation, training, evaluation, play.

Output layout under the run root (flag --out, or the ASKLAB_OUT
environment variable, default ./runs):

    data/<name>/         scene JSONL per split + manifest.json
    checkpoints/         <variant>_sl.pt / <variant>_rl.pt (+ .json sidecars)
    metrics/             epoch logs (JSONL), reports (JSON + CSV + PNG)
    transcripts/         per-episode JSONL dumps

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import figures, metrics, model, scenes, training

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits 2; we reserve that
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out_root(args) -> Path:
    root = args.out or os.environ.get("ASKLAB_OUT") or "runs"
    return Path(root)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="run root directory (default $ASKLAB_OUT or ./runs)")
    p.add_argument("--seed", type=int, default=0)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=model.VARIANTS, default="uniqer")
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--n-head", type=int, default=4)
    p.add_argument("--ff", type=int, default=256, dest="dim_feedforward")
    p.add_argument("--layers", type=int, default=2, dest="n_layers")
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--t-max", type=int, default=5)
    p.add_argument("--d-v", type=int, default=16)
    p.add_argument("--identity-projection", action="store_true")


def _model_config(args) -> model.ModelConfig:
    return model.ModelConfig(
        d_model=args.d_model, n_head=args.n_head, dim_feedforward=args.dim_feedforward,
        n_layers=args.n_layers, dropout=args.dropout, k=args.k, t_max=args.t_max,
        d_v=args.d_v, identity_projection=args.identity_projection,
        variant=args.variant, seed=args.seed,
    )


def _data_dir(args, root: Path) -> Path:
    return Path(args.data) if args.data else root / "data" / args.dataset


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asklab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--dataset", choices=("ask3", "ask4"), default="ask3")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--min-objects", type=int, default=scenes.N_MIN)
    p.add_argument("--max-objects", type=int, default=scenes.N_MAX)
    p.add_argument("--duplicate-pressure", type=float, default=0.5)
    p.add_argument("--gt-questions", type=int, default=10)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-sl", help="supervised encoder/decoder training")
    p.add_argument("--dataset", choices=("ask3", "ask4"), default="ask3")
    p.add_argument("--data", help="dataset directory (default <out>/data/<dataset>)")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-min", type=float, default=None,
                   help="cosine-decay floor for the learning rate")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--samples-per-scene", type=int, default=4)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_sl)

    p = sub.add_parser("train-rl", help="policy training from a supervised checkpoint")
    p.add_argument("--dataset", choices=("ask3", "ask4"), default="ask3")
    p.add_argument("--data", help="dataset directory (default <out>/data/<dataset>)")
    p.add_argument("--variant", choices=model.VARIANTS, default="uniqer")
    p.add_argument("--checkpoint", help="supervised checkpoint (default <out>/checkpoints/<variant>_sl.pt)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--episodes-per-epoch", type=int, default=192)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--eval-games", type=int, default=100)
    p.add_argument("--resume", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("eval", help="metric report for a trained checkpoint")
    p.add_argument("--dataset", choices=("ask3", "ask4"), default="ask3")
    p.add_argument("--data", help="dataset directory (default <out>/data/<dataset>)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--mode", default="standard",
        choices=("standard", "force_stop", "random_otm", "random_otm_force_stop"),
    )
    p.add_argument("--split", choices=("new_image", "new_object", "both"), default="both")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--games-per-scene", type=int, default=2)
    p.add_argument("--transcripts", action="store_true", help="dump per-episode JSONL")
    p.add_argument("--tag", default="", help="suffix for output file names")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("play", help="print sampled game transcripts")
    p.add_argument("--dataset", choices=("ask3", "ask4"), default="ask3")
    p.add_argument("--data", help="dataset directory (default <out>/data/<dataset>)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument(
        "--format", choices=("text", "jsonl"), default="text",
        help="jsonl prints transcript records compatible with the dump schema",
    )
    _add_common(p)
    p.set_defaults(func=cmd_play)
    return parser


def cmd_gen_data(args) -> int:
    root = _out_root(args)
    cfg = scenes.DatasetConfig(
        name=args.dataset, n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
        min_objects=args.min_objects, max_objects=args.max_objects,
        duplicate_pressure=args.duplicate_pressure,
        gt_questions_per_scene=args.gt_questions, seed=args.seed,
    )
    dataset = scenes.generate_dataset(cfg)
    out_dir = root / "data" / args.dataset
    scenes.save_dataset(dataset, out_dir)
    counts = {s: len(dataset.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {out_dir} {json.dumps(counts)}")
    return EXIT_OK


def _load_dataset(args, root: Path) -> scenes.Dataset:
    data_dir = _data_dir(args, root)
    if not data_dir.exists():
        raise FileNotFoundError(
            f"dataset directory {data_dir} not found; run `asklab gen-data` first"
        )
    return scenes.load_dataset(data_dir)


def cmd_train_sl(args) -> int:
    root = _out_root(args)
    dataset = _load_dataset(args, root)
    agent = model.build_variant(_model_config(args), dataset.space)
    ckpt = root / "checkpoints" / f"{args.variant}_sl.pt"
    log = root / "metrics" / f"{args.variant}_sl_log.jsonl"
    if not args.resume and log.exists():
        log.unlink()
    slc = training.SLConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lr_min=args.lr_min,
        alpha=args.alpha, samples_per_scene=args.samples_per_scene, patience=args.patience,
        seed=args.seed, log_path=log, checkpoint_path=ckpt, resume=args.resume,
    )
    history = training.run_supervised(agent, dataset, slc)
    fig = figures.plot_supervised_log(log, root / "metrics" / f"{args.variant}_sl_log.png")
    best = max(history, key=lambda h: h["val_f1"]) if history else {}
    print(f"checkpoint {ckpt}")
    print(f"figure {fig}")
    print(json.dumps({k: best.get(k) for k in ("epoch", "val_f1", "val_perfect", "val_correct")}))
    return EXIT_OK


def cmd_train_rl(args) -> int:
    root = _out_root(args)
    dataset = _load_dataset(args, root)
    sl_ckpt = Path(args.checkpoint) if args.checkpoint else root / "checkpoints" / f"{args.variant}_sl.pt"
    if not sl_ckpt.exists():
        raise FileNotFoundError(
            f"supervised checkpoint {sl_ckpt} not found; run `asklab train-sl --variant {args.variant}` first"
        )
    agent, manifest = model.load_checkpoint(sl_ckpt)
    if agent.variant != args.variant:
        raise ValueError(
            f"checkpoint {sl_ckpt} holds variant {agent.variant!r}, not {args.variant!r}"
        )
    ckpt = root / "checkpoints" / f"{args.variant}_rl.pt"
    log = root / "metrics" / f"{args.variant}_rl_log.jsonl"
    if not args.resume and log.exists():
        log.unlink()
    rlc = training.RLConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        episodes_per_epoch=args.episodes_per_epoch, lr=args.lr, seed=args.seed,
        reward=training.RewardConfig(beta=args.beta, t_max=agent.config.t_max, gamma=args.gamma),
        eval_games=args.eval_games, log_path=log, checkpoint_path=ckpt, resume=args.resume,
    )
    history = training.run_rl(agent, dataset, rlc)
    fig = figures.plot_rl_log(log, root / "metrics" / f"{args.variant}_rl_log.png")
    best = max(history, key=lambda h: h["val_success"]) if history else {}
    print(f"checkpoint {ckpt}")
    print(f"figure {fig}")
    print(json.dumps({k: best.get(k) for k in ("epoch", "val_success", "mean_return")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    root = _out_root(args)
    dataset = _load_dataset(args, root)
    agent, _ = model.load_checkpoint(Path(args.checkpoint))
    splits = ("new_image", "new_object") if args.split == "both" else (args.split,)
    transcript_dir = root / "transcripts" if args.transcripts else None
    report = metrics.evaluate(
        agent, dataset, mode=args.mode, seeds=args.seeds,
        games_per_scene=args.games_per_scene, transcript_dir=transcript_dir,
        splits=splits,
    )
    tag = f"_{args.tag}" if args.tag else ""
    base = root / "metrics" / f"report_{args.mode}{tag}"
    base.parent.mkdir(parents=True, exist_ok=True)
    json_path = base.with_suffix(".json")
    json_path.write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    csv_path = base.with_suffix(".csv")
    rows = report.rows()
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["split", "metric", "mean", "std"])
        writer.writeheader()
        writer.writerows(rows)
    fig_path = figures.plot_report(report, base.with_suffix(".png"))
    for row in rows:
        print("\t".join(row[c] for c in ("split", "metric", "mean", "std")))
    print(f"report {json_path}")
    print(f"figure {fig_path}")
    return EXIT_OK


def _print_trace_text(trace: metrics.EpisodeTrace) -> None:
    print(f"scene {trace.scene_id} ({trace.n_objects} objects), goal {trace.goal_id}")
    turn = 0
    for step in trace.steps:
        top = sorted(enumerate(step.p_goal), key=lambda kv: -kv[1])[:3]
        top_s = " ".join(f"{i}:{p:.2f}" for i, p in top)
        if step.question is None:
            print(f"  submit  P-top {top_s}")
            continue
        turn += 1
        ans = "yes" if step.answer else "no"
        groups = ""
        if step.group_vector is not None:
            t = [i for i in range(trace.n_objects) if step.group_vector[i] == 1]
            d = [i for i in range(trace.n_objects) if step.group_vector[i] == 2]
            groups = f" targets {t} distracters {d}"
        print(f"  Q{turn}: {step.question} -> {ans}{groups}  P-top {top_s}")
    outcome = "success" if trace.success else "failure"
    print(f"  prediction {trace.prediction} ({outcome}, reward {trace.reward:.2f})\n")


def cmd_play(args) -> int:
    root = _out_root(args)
    dataset = _load_dataset(args, root)
    agent, _ = model.load_checkpoint(Path(args.checkpoint))
    pool = dataset.split(args.split)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 41]))
    games = []
    for _ in range(args.n):
        scene = pool[int(rng.integers(len(pool)))]
        games.append(scenes.GameInstance(scene=scene, goal_id=int(rng.integers(len(scene)))))
    reward_cfg = training.RewardConfig(t_max=agent.config.t_max)
    traces = [training.rollout(agent, g, reward_cfg, mode="greedy") for g in games]
    if args.format == "jsonl":
        for trace in traces:
            print(json.dumps(metrics.trace_to_record(trace)))
    else:
        for trace in traces:
            _print_trace_text(trace)
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
