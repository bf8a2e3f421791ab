"""Training stages: supervised encoder/decoder learning and policy search.

The supervised stage teaches the encoder to track the candidate set and
the decoder to reproduce informative ground-truth questions.  The policy
stage then trains only the targeting module with REINFORCE against the
game reward, everything else frozen.  The recurrent comparison agent
reuses the same reward and update machinery over a per-token action
space instead of targeting actions.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor
from torch.nn import functional as F

from . import actions, grammar, metrics, model, oracle
from .metrics import EpisodeTrace, TraceStep
from .model import AgentState, Dialogue, QuestionerAgent
from .oracle import Grouping
from .scenes import Dataset, GameInstance, Scene

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# rewards and returns


@dataclass(frozen=True)
class RewardConfig:
    beta: float = 0.2
    t_max: int = 5
    gamma: float = 1.0
    invalid_first_submission: bool = True

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")

    def turn_discount(self, t: int) -> float:
        return self.beta * t / self.t_max


def reward(prediction: int, goal: int, t: int, cfg: RewardConfig) -> float:
    """Reward for submitting ``prediction`` at step ``t`` (1-based).

    Correct submissions earn 1 minus the turn discount; a first-step
    submission is invalid and earns nothing, as does anything incorrect
    or beyond the step limit.
    """
    if t < 1:
        raise ValueError(f"step must be >= 1, got {t}")
    if cfg.invalid_first_submission and t == 1:
        return 0.0
    if t > cfg.t_max or prediction != goal:
        return 0.0
    return 1.0 - cfg.turn_discount(t)


def returns(rewards: Sequence[float], gamma: float) -> list[float]:
    """Discounted return at each step: G(t) = R_{t+1} + gamma * G(t+1)."""
    out = [0.0] * len(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


# ---------------------------------------------------------------------------
# supervised losses


def object_prediction_loss(sigma: Tensor, y: Tensor, mask: Tensor) -> Tensor:
    """Binary cross-entropy summed over real objects (and any turn rows)."""
    if sigma.shape != y.shape:
        raise ValueError(f"shape mismatch: sigma {tuple(sigma.shape)} vs y {tuple(y.shape)}")
    return F.binary_cross_entropy(sigma[mask], y[mask].to(sigma.dtype), reduction="sum")


def question_generation_loss(logits: Tensor, targets: Tensor, pad_id: int) -> Tensor:
    """Negative log-likelihood summed over non-pad target tokens."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(
            f"shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}"
        )
    vocab = logits.shape[-1]
    if int(targets.max()) >= vocab:
        raise ValueError(f"target id {int(targets.max())} outside vocabulary of {vocab}")
    return F.cross_entropy(
        logits.reshape(-1, vocab), targets.reshape(-1), ignore_index=pad_id, reduction="sum"
    )


def total_supervised_loss(l_pred: Tensor | float, l_gen: Tensor | float, alpha: float) -> Tensor | float:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return alpha * l_pred + l_gen


# ---------------------------------------------------------------------------
# supervised batches


@dataclass
class SupervisedSample:
    """One training point: reproduce the turn-t ground-truth question and
    the candidate sets before and after it."""

    scene: Scene
    goal_id: int
    turn: int
    prefix: Dialogue
    question_ids: list[int]  # surface tokens + [EOS]
    answer: bool
    ast: grammar.QuestionAst
    groups: np.ndarray  # (n_max,) group ids fed to the decoder
    grouping: Grouping  # same assignment as sets, for address metrics
    y_prev: np.ndarray  # (n_max,) candidate membership before the pair
    y_curr: np.ndarray  # (n_max,) candidate membership after the pair


def _question_pair(ast: grammar.QuestionAst, ans: bool, vocab: grammar.Vocabulary) -> tuple[list[int], int]:
    surface = grammar.realize(ast)[:-1]  # dialogue history stores no [EOS]
    return vocab.encode(surface), vocab.answer_id(ans)


def _membership(ids: Iterable[int], n_max: int) -> np.ndarray:
    out = np.zeros(n_max, dtype=np.float32)
    for i in ids:
        out[i] = 1.0
    return out


def make_supervised_sample(
    scene: Scene,
    goal_id: int,
    turn: int,
    rng: np.random.Generator,
    space,
    vocab: grammar.Vocabulary,
    k: int,
    n_max: int,
) -> SupervisedSample | None:
    """Walk ``turn`` ground-truth pairs and package the last one.

    Earlier pairs are sampled against the evolving candidate set, so the
    prefix narrows the candidates exactly like a competent questioner
    would.  Returns None (logged) when the candidates collapse to a
    single object before the requested turn, or when the keep-k masking
    cannot retain a target and a distracter.
    """
    game = GameInstance(scene=scene, goal_id=goal_id)
    candidates = frozenset(o.id for o in scene.objects)
    prefix: Dialogue = []
    for t in range(1, turn + 1):
        if len(candidates) < 2:
            logger.debug(
                "skipping sample: scene %s goal %d candidates collapsed before turn %d",
                scene.scene_id, goal_id, t,
            )
            return None
        try:
            ast, grouping = oracle.sample_gt_question(scene, candidates, rng, space)
        except oracle.NoInformativeQuestion:
            # narrowed candidates can be mutually indistinguishable even in
            # scenes that start out splittable
            logger.debug(
                "skipping sample: scene %s candidates %s unsplittable", scene.scene_id, candidates
            )
            return None
        ans = oracle.answer(ast, game)
        if t < turn:
            prefix.append(_question_pair(ast, ans, vocab))
            candidates = candidates & oracle.matched_set(ast, ans, scene)
            continue

        y_prev = _membership(candidates, n_max)
        y_curr = _membership(candidates & oracle.matched_set(ast, ans, scene), n_max)

        targets = sorted(grouping.targets)
        distracters = sorted(grouping.distracters)
        keep = len(targets) + len(distracters)
        if keep > k:
            # mask surplus candidates but never lose both sides of the split
            kept = [targets[int(rng.integers(len(targets)))]]
            kept.append(distracters[int(rng.integers(len(distracters)))])
            rest = [i for i in targets + distracters if i not in kept]
            extra = k - 2
            if extra > 0:
                picked = rng.choice(len(rest), size=extra, replace=False)
                kept.extend(rest[int(j)] for j in picked)
            kept_set = frozenset(kept)
        else:
            kept_set = frozenset(targets) | frozenset(distracters)

        kept_targets = grouping.targets & kept_set
        kept_distracters = grouping.distracters & kept_set
        if not kept_targets or not kept_distracters:
            logger.debug("skipping sample: keep-%d masking lost a group side", k)
            return None
        groups_vec = np.zeros(n_max, dtype=np.int64)
        for i in kept_targets:
            groups_vec[i] = actions.TARGET
        for i in kept_distracters:
            groups_vec[i] = actions.DISTRACTER
        kept_grouping = Grouping(
            targets=kept_targets,
            distracters=kept_distracters,
            masked=frozenset(o.id for o in scene.objects) - kept_targets - kept_distracters,
        )
        return SupervisedSample(
            scene=scene,
            goal_id=goal_id,
            turn=turn,
            prefix=prefix,
            question_ids=vocab.encode(grammar.realize(ast)),
            answer=ans,
            ast=ast,
            groups=groups_vec,
            grouping=kept_grouping,
            y_prev=y_prev,
            y_curr=y_curr,
        )
    raise AssertionError("unreachable")


@dataclass
class SupervisedBatch:
    scenes: list[Scene]
    prefixes: list[Dialogue]
    fulls: list[Dialogue]
    tgt_in: Tensor
    tgt_out: Tensor
    groups: Tensor
    y_prev: Tensor
    y_curr: Tensor
    obj_mask: Tensor
    samples: list[SupervisedSample]


def collate_supervised(samples: Sequence[SupervisedSample], vocab: grammar.Vocabulary, n_max: int) -> SupervisedBatch:
    scenes = [s.scene for s in samples]
    prefixes = [list(s.prefix) for s in samples]
    fulls = [
        list(s.prefix) + [(s.question_ids[:-1], vocab.answer_id(s.answer))] for s in samples
    ]
    tgt_in_rows = [[vocab.bos_id] + s.question_ids[:-1] for s in samples]
    tgt_out_rows = [s.question_ids for s in samples]
    tgt_in, _ = model.collate_token_ids(tgt_in_rows, vocab.pad_id)
    tgt_out, _ = model.collate_token_ids(tgt_out_rows, vocab.pad_id)
    obj_mask = torch.zeros(len(samples), n_max, dtype=torch.bool)
    for i, s in enumerate(samples):
        obj_mask[i, : len(s.scene)] = True
    return SupervisedBatch(
        scenes=scenes,
        prefixes=prefixes,
        fulls=fulls,
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        groups=torch.from_numpy(np.stack([s.groups for s in samples])),
        y_prev=torch.from_numpy(np.stack([s.y_prev for s in samples])),
        y_curr=torch.from_numpy(np.stack([s.y_curr for s in samples])),
        obj_mask=obj_mask,
        samples=list(samples),
    )


def supervised_batch_loss(
    agent: QuestionerAgent, batch: SupervisedBatch, alpha: float
) -> tuple[Tensor, dict[str, float]]:
    """Two encoder passes: the prefix drives generation (and the before-pair
    candidate targets), the full dialogue drives the after-pair targets."""
    b = len(batch.samples)
    state_prefix = agent.encode(batch.scenes, batch.prefixes)
    logits = agent.teacher_logits(state_prefix, batch.groups, batch.tgt_in)
    l_gen = question_generation_loss(logits, batch.tgt_out, agent.vocab.pad_id) / b
    l_pred = object_prediction_loss(state_prefix.sigma, batch.y_prev, batch.obj_mask) / b
    state_full = agent.encode(batch.scenes, batch.fulls)
    l_pred = l_pred + object_prediction_loss(state_full.sigma, batch.y_curr, batch.obj_mask) / b
    loss = total_supervised_loss(l_pred, l_gen, alpha)
    parts = {"l_pred": l_pred.item(), "l_gen": l_gen.item(), "loss": loss.item()}
    return loss, parts


# ---------------------------------------------------------------------------
# supervised stage


@dataclass
class SLConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    lr_min: float | None = None  # cosine-decay floor; None keeps lr constant
    alpha: float = 1.0
    samples_per_scene: int = 2
    val_samples_per_scene: int = 2
    patience: int | None = None
    seed: int = 0
    log_path: Path | None = None
    checkpoint_path: Path | None = None
    resume: bool = False


def build_samples(
    dataset: Dataset,
    split: str,
    rng: np.random.Generator,
    agent: QuestionerAgent,
    per_scene: int,
) -> list[SupervisedSample]:
    out: list[SupervisedSample] = []
    cfg = agent.config
    for scene in dataset.split(split):
        for _ in range(per_scene):
            goal = int(rng.integers(len(scene)))
            turn = int(rng.integers(1, cfg.t_max + 1))
            sample = make_supervised_sample(
                scene, goal, turn, rng, dataset.space, agent.vocab, cfg.k, cfg.n_max
            )
            if sample is not None:
                out.append(sample)
    return out


def _batches(samples: list, size: int) -> Iterable[list]:
    for i in range(0, len(samples), size):
        yield samples[i : i + size]


@torch.no_grad()
def validate_supervised(
    agent: QuestionerAgent, samples: Sequence[SupervisedSample], batch_size: int = 64
) -> dict[str, float]:
    """F1 of the thresholded candidate scores plus address ratios of the
    greedy questions generated under the ground-truth groupings."""
    agent.eval()
    f1_points: list[float] = []
    address: list[str] = []
    for chunk in _batches(list(samples), batch_size):
        batch = collate_supervised(chunk, agent.vocab, agent.config.n_max)
        state_prefix = agent.encode(batch.scenes, batch.prefixes)
        state_full = agent.encode(batch.scenes, batch.fulls)
        for i, s in enumerate(chunk):
            n = len(s.scene)
            for state, y in ((state_prefix, s.y_prev), (state_full, s.y_curr)):
                predicted = {j for j in range(n) if float(state.sigma[i, j]) > 0.5}
                truth = {j for j in range(n) if y[j] > 0.5}
                f1_points.append(metrics.f1_candidates(predicted, truth))
        generated = agent.generate(state_prefix, batch.groups)
        for i, s in enumerate(chunk):
            tokens = agent.vocab.decode(generated[i])
            try:
                ast = grammar.parse(tokens, agent.space)
            except grammar.Unparseable:
                ast = None
            address.append(oracle.classify_address(s.grouping, ast, s.scene))
    perfect = sum(1 for a in address if a == oracle.PERFECT)
    correct = sum(1 for a in address if a in (oracle.PERFECT, oracle.CORRECT))
    total = max(len(address), 1)
    return {
        "val_f1": float(np.mean(f1_points)) if f1_points else 0.0,
        "val_perfect": perfect / total,
        "val_correct": correct / total,
    }


def _append_jsonl(path: Path | str | None, record: dict) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def run_supervised(
    agent: QuestionerAgent, dataset: Dataset, cfg: SLConfig
) -> list[dict[str, float]]:
    """Joint encoder/decoder training; keeps the best-validation-F1 weights.

    Returns the per-epoch metric records (also appended to cfg.log_path).
    The final checkpoint, if requested, stores the best weights.
    """
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(agent.sl_parameters(), lr=cfg.lr)
    scheduler = None
    if cfg.lr_min is not None:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=cfg.epochs, eta_min=cfg.lr_min
        )
    rng_train = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    rng_val = np.random.default_rng(np.random.SeedSequence([cfg.seed, 12]))
    val_samples = build_samples(dataset, "val", rng_val, agent, cfg.val_samples_per_scene)

    start_epoch = 0
    best_f1 = -1.0
    best_state: dict | None = None
    best_metrics: dict[str, float] = {}
    if cfg.resume and cfg.checkpoint_path and Path(cfg.checkpoint_path).exists():
        blob = torch.load(cfg.checkpoint_path, map_location="cpu", weights_only=False)
        extra = blob.get("extra", {})
        if extra.get("stage") == "sl-progress":
            agent.load_state_dict(blob["state_dict"])
            optimizer.load_state_dict(extra["optimizer"])
            if scheduler is not None and extra.get("scheduler") is not None:
                scheduler.load_state_dict(extra["scheduler"])
            start_epoch = extra["epoch"] + 1
            best_f1 = extra["best_f1"]
            best_state = extra["best_state"]
            best_metrics = extra.get("best_metrics", {})
            logger.info("resuming supervised training at epoch %d", start_epoch)

    history: list[dict[str, float]] = []
    epochs_since_best = 0
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.monotonic()
        agent.train()
        samples = build_samples(dataset, "train", rng_train, agent, cfg.samples_per_scene)
        order = rng_train.permutation(len(samples))
        samples = [samples[int(i)] for i in order]
        sums = {"l_pred": 0.0, "l_gen": 0.0, "loss": 0.0}
        n_batches = 0
        for chunk in _batches(samples, cfg.batch_size):
            batch = collate_supervised(chunk, agent.vocab, agent.config.n_max)
            loss, parts = supervised_batch_loss(agent, batch, cfg.alpha)
            if not math.isfinite(parts["loss"]):
                raise RuntimeError(
                    f"supervised loss diverged at epoch {epoch}: {parts}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for key in sums:
                sums[key] += parts[key]
            n_batches += 1
        if scheduler is not None:
            scheduler.step()
        record = {k: v / max(n_batches, 1) for k, v in sums.items()}
        record.update(validate_supervised(agent, val_samples))
        record["epoch"] = epoch
        record["seconds"] = round(time.monotonic() - t0, 3)
        history.append(record)
        _append_jsonl(cfg.log_path, record)
        logger.info(
            "sl epoch %d loss %.4f val_f1 %.4f perfect %.3f correct %.3f",
            epoch, record["loss"], record["val_f1"], record["val_perfect"], record["val_correct"],
        )
        if record["val_f1"] > best_f1:
            best_f1 = record["val_f1"]
            best_state = {k: v.detach().clone() for k, v in agent.state_dict().items()}
            best_metrics = {
                "val_f1": record["val_f1"],
                "val_perfect": record["val_perfect"],
                "val_correct": record["val_correct"],
                "epoch": epoch,
            }
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if cfg.checkpoint_path is not None:
            model.save_checkpoint(
                agent, cfg.checkpoint_path, stage="sl-progress", metrics=best_metrics,
                extra={
                    "stage": "sl-progress",
                    "epoch": epoch,
                    "optimizer": optimizer.state_dict(),
                    "scheduler": scheduler.state_dict() if scheduler is not None else None,
                    "best_f1": best_f1,
                    "best_state": best_state,
                    "best_metrics": best_metrics,
                },
            )
        if cfg.patience is not None and epochs_since_best > cfg.patience:
            logger.info("early stop after %d epochs without improvement", epochs_since_best)
            break

    if best_state is not None:
        agent.load_state_dict(best_state)
    if cfg.checkpoint_path is not None:
        model.save_checkpoint(agent, cfg.checkpoint_path, stage="sl", metrics=best_metrics)
    return history


# ---------------------------------------------------------------------------
# rollouts


def _encode_nograd(agent: QuestionerAgent, scenes, dialogues) -> AgentState:
    with torch.no_grad():
        return agent.encode(scenes, dialogues)


def rollout_batch(
    agent: QuestionerAgent,
    games: Sequence[GameInstance],
    reward_cfg: RewardConfig,
    mode: str = "greedy",
    policy: str = "otm",
    sample_generator: torch.Generator | None = None,
    episode_rngs: Sequence[np.random.Generator] | None = None,
    forced_actions: Sequence[Sequence[int]] | None = None,
    force_stop: bool = False,
) -> list[EpisodeTrace]:
    """Play a batch of episodes with a targeting-action agent.

    mode "sample" draws actions from the policy (collecting log-probs for
    REINFORCE); "greedy" takes the argmax.  policy "random" replaces the
    module with per-episode uniform draws.  force_stop submits the best
    guess at the horizon when the policy never submitted; such episodes
    stay reward-free but can still count as successes.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if policy not in ("otm", "random"):
        raise ValueError(f"unknown policy {policy!r}")
    if policy == "random" and episode_rngs is None and forced_actions is None:
        raise ValueError("random policy needs per-episode rng streams")

    n_act = actions.n_actions(agent.config.k)
    traces = [
        EpisodeTrace(scene_id=g.scene.scene_id, goal_id=g.goal_id, n_objects=len(g.scene))
        for g in games
    ]
    dialogues: list[Dialogue] = [[] for _ in games]
    active = list(range(len(games)))

    for t in range(1, reward_cfg.t_max + 1):
        if not active:
            break
        scenes = [games[i].scene for i in active]
        dlgs = [dialogues[i] for i in active]
        state = _encode_nograd(agent, scenes, dlgs)
        logits, top_k = agent.otm_logits(state)

        if forced_actions is not None:
            acts = [int(forced_actions[i][t - 1]) for i in active]
            log_probs = [None] * len(active)
        elif policy == "random":
            acts = [int(episode_rngs[i].integers(n_act)) for i in active]
            log_probs = [None] * len(active)
        elif mode == "sample":
            probs = torch.softmax(logits, dim=-1)
            picks = torch.multinomial(probs, 1, generator=sample_generator).squeeze(1)
            lp = torch.log_softmax(logits, dim=-1)
            acts = [int(a) for a in picks.tolist()]
            log_probs = [lp[row, picks[row]] for row in range(len(active))]
        else:
            acts = [int(a) for a in logits.argmax(-1).tolist()]
            log_probs = [None] * len(active)

        # decode one question for every active episode; submitted rows ignore it
        groups_rows = [
            actions.action_to_group_vector(a, top_k[row], agent.config.n_max)
            for row, a in enumerate(acts)
        ]
        groups_t = torch.from_numpy(np.stack(groups_rows))
        generated = agent.generate(state, groups_t)

        still_active: list[int] = []
        for row, ep in enumerate(active):
            game = games[ep]
            trace = traces[ep]
            n = len(game.scene)
            sigma_row = [float(v) for v in state.sigma[row, :n].tolist()]
            p_row = [float(v) for v in state.p_goal[row, :n].tolist()]
            act = acts[row]
            submitting = actions.is_submission(act, agent.config.k)

            if submitting:
                prediction = int(np.argmax(p_row))
                r = reward(prediction, game.goal_id, t, reward_cfg)
                trace.prediction = prediction
                trace.success = prediction == game.goal_id and r > 0
                if not reward_cfg.invalid_first_submission and t == 1:
                    trace.success = prediction == game.goal_id
                trace.reward = r
                trace.submitted_at = t
                trace.steps.append(
                    TraceStep(
                        sigma=sigma_row, p_goal=p_row, action=act, top_k=top_k[row],
                        group_vector=[int(v) for v in groups_rows[row].tolist()],
                        question=None, answer=None, reward=r,
                    )
                )
                if log_probs[row] is not None:
                    trace.policy_log_probs.append(log_probs[row])
                    trace.policy_rewards.append(r)
                continue

            q_ids = generated[row]
            tokens = agent.vocab.decode(q_ids)
            try:
                ast = grammar.parse(tokens, agent.space)
            except grammar.Unparseable:
                ast = None
            ans = oracle.answer(ast, game)
            dialogues[ep].append((q_ids, agent.vocab.answer_id(ans)))
            trace.steps.append(
                TraceStep(
                    sigma=sigma_row, p_goal=p_row, action=act, top_k=top_k[row],
                    group_vector=[int(v) for v in groups_rows[row].tolist()],
                    question=" ".join(tokens), answer=ans, reward=0.0,
                )
            )
            if log_probs[row] is not None:
                trace.policy_log_probs.append(log_probs[row])
                trace.policy_rewards.append(0.0)
            still_active.append(ep)
        active = still_active

    if active and force_stop:
        scenes = [games[i].scene for i in active]
        dlgs = [dialogues[i] for i in active]
        state = _encode_nograd(agent, scenes, dlgs)
        for row, ep in enumerate(active):
            game = games[ep]
            trace = traces[ep]
            n = len(game.scene)
            p_row = [float(v) for v in state.p_goal[row, :n].tolist()]
            trace.final_sigma = [float(v) for v in state.sigma[row, :n].tolist()]
            trace.final_p_goal = p_row
            trace.prediction = int(np.argmax(p_row))
            trace.success = trace.prediction == game.goal_id
            trace.forced = True
    return traces


def rollout(
    agent: QuestionerAgent,
    game: GameInstance,
    reward_cfg: RewardConfig,
    mode: str = "greedy",
    **kwargs,
) -> EpisodeTrace:
    """Single-episode convenience wrapper over the batched rollout."""
    if agent.variant == "baseline":
        return baseline_rollout_batch(agent, [game], reward_cfg, mode=mode, **kwargs)[0]
    return rollout_batch(agent, [game], reward_cfg, mode=mode, **kwargs)[0]


def baseline_rollout_batch(
    agent,
    games: Sequence[GameInstance],
    reward_cfg: RewardConfig,
    mode: str = "greedy",
    sample_generator: torch.Generator | None = None,
    force_stop: bool = False,
) -> list[EpisodeTrace]:
    """Per-token episodes for the recurrent agent.

    Each emitted token is one action.  [EOS] closes a question and the
    answer arrives; [EOD] ends the dialogue and submits the current best
    guess.  An [EOD] before any completed question counts as an invalid
    first-step submission.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    vocab = agent.vocab
    traces = [
        EpisodeTrace(scene_id=g.scene.scene_id, goal_id=g.goal_id, n_objects=len(g.scene))
        for g in games
    ]
    dialogues: list[Dialogue] = [[] for _ in games]
    active = list(range(len(games)))

    for turn in range(1, reward_cfg.t_max + 1):
        if not active:
            break
        scenes = [games[i].scene for i in active]
        dlgs = [dialogues[i] for i in active]
        state = _encode_nograd(agent, scenes, dlgs)
        hc = agent.qgen_start(state)
        tok = torch.full((len(active),), vocab.bos_id, dtype=torch.long)
        collected: list[list[int]] = [[] for _ in active]
        closed = [False] * len(active)  # question finished this turn
        ended = [False] * len(active)  # dialogue ended via [EOD]
        for _ in range(agent.config.max_decode_len):
            logits, hc = agent.qgen_step(tok, hc)
            if mode == "sample":
                probs = torch.softmax(logits, dim=-1)
                picks = torch.multinomial(probs, 1, generator=sample_generator).squeeze(1)
                lp = torch.log_softmax(logits, dim=-1)
            else:
                picks = logits.argmax(-1)
                lp = None
            tok = picks
            for row, ep in enumerate(active):
                if closed[row] or ended[row]:
                    continue
                token_id = int(picks[row])
                if lp is not None:
                    traces[ep].policy_log_probs.append(lp[row, token_id])
                    traces[ep].policy_rewards.append(0.0)
                if token_id == vocab.eod_id:
                    ended[row] = True
                elif token_id == vocab.eos_id:
                    closed[row] = True
                else:
                    collected[row].append(token_id)
            if all(c or e for c, e in zip(closed, ended)):
                break

        still_active: list[int] = []
        for row, ep in enumerate(active):
            game = games[ep]
            trace = traces[ep]
            n = len(game.scene)
            sigma_row = [float(v) for v in state.sigma[row, :n].tolist()]
            p_row = [float(v) for v in state.p_goal[row, :n].tolist()]
            if ended[row]:
                prediction = int(np.argmax(p_row))
                r = reward(prediction, game.goal_id, turn, reward_cfg)
                trace.prediction = prediction
                trace.success = prediction == game.goal_id and r > 0
                trace.reward = r
                trace.submitted_at = turn
                if trace.policy_rewards:
                    trace.policy_rewards[-1] = r
                trace.steps.append(
                    TraceStep(
                        sigma=sigma_row, p_goal=p_row, action=None, top_k=[],
                        group_vector=None, question=None, answer=None, reward=r,
                    )
                )
                continue
            q_ids = collected[row]
            tokens = vocab.decode(q_ids)
            try:
                ast = grammar.parse(tokens, agent.space)
            except grammar.Unparseable:
                ast = None
            ans = oracle.answer(ast, game)
            dialogues[ep].append((q_ids, vocab.answer_id(ans)))
            trace.steps.append(
                TraceStep(
                    sigma=sigma_row, p_goal=p_row, action=None, top_k=[],
                    group_vector=None, question=" ".join(tokens), answer=ans, reward=0.0,
                )
            )
            still_active.append(ep)
        active = still_active

    if active and force_stop:
        scenes = [games[i].scene for i in active]
        dlgs = [dialogues[i] for i in active]
        state = _encode_nograd(agent, scenes, dlgs)
        for row, ep in enumerate(active):
            game = games[ep]
            trace = traces[ep]
            n = len(game.scene)
            p_row = [float(v) for v in state.p_goal[row, :n].tolist()]
            trace.final_sigma = [float(v) for v in state.sigma[row, :n].tolist()]
            trace.final_p_goal = p_row
            trace.prediction = int(np.argmax(p_row))
            trace.success = trace.prediction == game.goal_id
            trace.forced = True
    return traces


# ---------------------------------------------------------------------------
# policy-gradient updates


@dataclass
class RunningMeanBaseline:
    """Scalar variance reducer: running mean of observed returns."""

    value: float = 0.0
    count: int = 0

    def update(self, batch_mean_return: float) -> None:
        self.count += 1
        self.value += (batch_mean_return - self.value) / self.count


def reinforce_update(
    traces: Sequence[EpisodeTrace],
    value_baseline: RunningMeanBaseline,
    optimizer: torch.optim.Optimizer,
    gamma: float = 1.0,
) -> dict[str, float]:
    """One gradient step on the REINFORCE surrogate over the batch.

    The surrogate is -mean over episodes of sum_t log pi(A_t|S_t) (G_t - b)
    with the scalar baseline b held fixed during the step and updated
    afterwards from the batch's returns.
    """
    terms = []
    all_returns: list[float] = []
    for trace in traces:
        if not trace.policy_log_probs:
            continue
        g = returns(trace.policy_rewards, gamma)
        all_returns.extend(g)
        dtype = trace.policy_log_probs[0].dtype
        adv = torch.tensor(g, dtype=dtype) - value_baseline.value
        terms.append(-(torch.stack(list(trace.policy_log_probs)) * adv).sum())
    if not terms:
        raise ValueError("no sampled log-probabilities in the batch; use mode='sample'")
    loss = torch.stack(terms).sum() / len(terms)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    mean_return = float(np.mean(all_returns)) if all_returns else 0.0
    value_baseline.update(mean_return)
    return {
        "surrogate": loss.item(),
        "mean_return": mean_return,
        "baseline": value_baseline.value,
    }


# ---------------------------------------------------------------------------
# policy stage


@dataclass
class RLConfig:
    epochs: int = 30
    batch_size: int = 32
    episodes_per_epoch: int = 192
    lr: float = 5e-4
    seed: int = 0
    reward: RewardConfig = field(default_factory=RewardConfig)
    eval_games: int = 100
    log_path: Path | None = None
    checkpoint_path: Path | None = None
    resume: bool = False


def sample_games(
    scenes: Sequence[Scene], count: int, rng: np.random.Generator
) -> list[GameInstance]:
    """Cycle scenes, drawing a fresh goal each time."""
    out = []
    for i in range(count):
        scene = scenes[i % len(scenes)]
        out.append(GameInstance(scene=scene, goal_id=int(rng.integers(len(scene)))))
    return out


def parameter_digest(params: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def run_rl(agent: QuestionerAgent, dataset: Dataset, cfg: RLConfig) -> list[dict[str, float]]:
    """Policy-gradient training of the targeting module (or, for the
    recurrent agent, its language model); everything else stays frozen."""
    torch.manual_seed(cfg.seed)
    agent.eval()  # frozen parts must behave deterministically
    trainable = agent.rl_parameters()
    trainable_ids = {id(p) for p in trainable}
    for p in agent.parameters():
        p.requires_grad_(id(p) in trainable_ids)
    optimizer = torch.optim.Adam(trainable, lr=cfg.lr)
    value_baseline = RunningMeanBaseline()
    sample_gen = torch.Generator().manual_seed(cfg.seed)
    goal_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 21]))
    eval_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 22]))

    train_scenes = dataset.split("train")
    val_scenes = dataset.split("val")
    eval_games = sample_games(val_scenes, min(cfg.eval_games, max(len(val_scenes), 1) * 4), eval_rng)

    is_baseline_agent = agent.variant == "baseline"

    def rollout_fn(games, **kw):
        if is_baseline_agent:
            return baseline_rollout_batch(agent, games, cfg.reward, **kw)
        return rollout_batch(agent, games, cfg.reward, **kw)

    start_epoch = 0
    best_success = -1.0
    best_state: dict | None = None
    best_metrics: dict[str, float] = {}
    if cfg.resume and cfg.checkpoint_path and Path(cfg.checkpoint_path).exists():
        blob = torch.load(cfg.checkpoint_path, map_location="cpu", weights_only=False)
        extra = blob.get("extra", {})
        if extra.get("stage") == "rl-progress":
            agent.load_state_dict(blob["state_dict"])
            optimizer.load_state_dict(extra["optimizer"])
            start_epoch = extra["epoch"] + 1
            best_success = extra["best_success"]
            best_state = extra["best_state"]
            best_metrics = extra.get("best_metrics", {})
            value_baseline = RunningMeanBaseline(**extra["value_baseline"])
            logger.info("resuming policy training at epoch %d", start_epoch)

    history: list[dict[str, float]] = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.monotonic()
        games = sample_games(train_scenes, cfg.episodes_per_epoch, goal_rng)
        stats_sum = {"surrogate": 0.0, "mean_return": 0.0}
        n_updates = 0
        sampled_traces: list[EpisodeTrace] = []
        for chunk in _batches(games, cfg.batch_size):
            traces = rollout_fn(chunk, mode="sample", sample_generator=sample_gen)
            stats = reinforce_update(traces, value_baseline, optimizer, cfg.reward.gamma)
            if not math.isfinite(stats["surrogate"]):
                raise RuntimeError(f"policy surrogate diverged at epoch {epoch}: {stats}")
            for key in stats_sum:
                stats_sum[key] += stats[key]
            n_updates += 1
            sampled_traces.extend(traces)

        with torch.no_grad():
            eval_traces = rollout_fn(eval_games, mode="greedy")
        val_success = metrics.task_success(eval_traces)
        record = {
            "epoch": epoch,
            "surrogate": stats_sum["surrogate"] / max(n_updates, 1),
            "mean_return": stats_sum["mean_return"] / max(n_updates, 1),
            "train_success": metrics.task_success(sampled_traces),
            "train_reward": float(np.mean([t.reward for t in sampled_traces])),
            "mean_questions": float(np.mean([t.n_questions for t in sampled_traces])),
            "val_success": val_success,
            "baseline_value": value_baseline.value,
            "seconds": round(time.monotonic() - t0, 3),
        }
        history.append(record)
        _append_jsonl(cfg.log_path, record)
        logger.info(
            "rl epoch %d return %.3f train succ %.3f val succ %.3f",
            epoch, record["mean_return"], record["train_success"], record["val_success"],
        )
        if val_success > best_success:
            best_success = val_success
            best_state = {k: v.detach().clone() for k, v in agent.state_dict().items()}
            best_metrics = {"val_success": val_success, "epoch": epoch}
        if cfg.checkpoint_path is not None:
            model.save_checkpoint(
                agent, cfg.checkpoint_path, stage="rl-progress", metrics=best_metrics,
                extra={
                    "stage": "rl-progress",
                    "epoch": epoch,
                    "optimizer": optimizer.state_dict(),
                    "best_success": best_success,
                    "best_state": best_state,
                    "best_metrics": best_metrics,
                    "value_baseline": {"value": value_baseline.value, "count": value_baseline.count},
                },
            )

    if best_state is not None:
        agent.load_state_dict(best_state)
    for p in agent.parameters():
        p.requires_grad_(True)
    if cfg.checkpoint_path is not None:
        model.save_checkpoint(agent, cfg.checkpoint_path, stage="rl", metrics=best_metrics)
    return history
