"""Episode records and every number derived from them.

A trace is the full observable history of one game: per-step candidate
scores, goal distribution, targeting decision, question, and answer,
plus the outcome.  All metrics here are pure functions of traces (and
the scene library), so a dumped transcript file reproduces the report
bit for bit.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import grammar, oracle
from .grammar import AttributeSpace
from .oracle import Grouping
from .scenes import Dataset, GameInstance, Scene


@dataclass
class TraceStep:
    sigma: list[float]
    p_goal: list[float]
    action: int | None
    top_k: list[int]
    group_vector: list[int] | None
    question: str | None
    answer: bool | None
    reward: float


@dataclass
class EpisodeTrace:
    scene_id: str
    goal_id: int
    n_objects: int
    steps: list[TraceStep] = field(default_factory=list)
    prediction: int | None = None
    success: bool = False
    reward: float = 0.0
    submitted_at: int | None = None  # 1-based step of the submission action
    forced: bool = False  # an evaluation mode auto-submitted at the horizon
    final_sigma: list[float] | None = None
    final_p_goal: list[float] | None = None
    policy_log_probs: list = field(default_factory=list)
    policy_rewards: list[float] = field(default_factory=list)

    @property
    def questions(self) -> list[str]:
        return [s.question for s in self.steps if s.question is not None]

    @property
    def n_questions(self) -> int:
        return len(self.questions)


# ---------------------------------------------------------------------------
# scalar metrics


def f1_candidates(predicted: Iterable[int], truth: Iterable[int]) -> float:
    """Set F1; two empty sets agree perfectly."""
    p, t = set(predicted), set(truth)
    if not p and not t:
        return 1.0
    overlap = len(p & t)
    if overlap == 0:
        return 0.0
    precision = overlap / len(p)
    recall = overlap / len(t)
    return 2 * precision * recall / (precision + recall)


def address_ratios(addresses: Sequence[str]) -> tuple[float, float]:
    """(perfect ratio, correct ratio); correct counts perfect questions too."""
    if not addresses:
        return 0.0, 0.0
    perfect = sum(1 for a in addresses if a == oracle.PERFECT)
    correct = sum(1 for a in addresses if a in (oracle.PERFECT, oracle.CORRECT))
    return perfect / len(addresses), correct / len(addresses)


def task_success(traces: Sequence[EpisodeTrace]) -> float:
    """Fraction of episodes ending in a correct submission; no submission
    counts as failure (forced-stop traces carry their own success flag)."""
    if not traces:
        return 0.0
    return sum(1 for t in traces if t.success) / len(traces)


def vocab_metrics(
    dialogues: Sequence[Sequence[str]], lexicon: frozenset[str]
) -> tuple[float, float]:
    """Question-level and dialogue-level content vocabulary sizes.

    n_vocab averages, per dialogue, the unique content tokens per
    question; the dialogue-level variant divides the union of content
    tokens across the dialogue by its question count.  Dialogues without
    questions are skipped.
    """
    per_question_means: list[float] = []
    per_dialogue: list[float] = []
    for questions in dialogues:
        sets = [frozenset(q.split()) & lexicon for q in questions]
        if not sets:
            continue
        per_question_means.append(sum(len(s) for s in sets) / len(sets))
        union = frozenset().union(*sets)
        per_dialogue.append(len(union) / len(sets))
    if not per_question_means:
        return 0.0, 0.0
    return float(np.mean(per_question_means)), float(np.mean(per_dialogue))


# ---------------------------------------------------------------------------
# trace aggregation


def _parse_or_none(question: str, space: AttributeSpace) -> grammar.QuestionAst | None:
    try:
        return grammar.parse(question, space)
    except grammar.Unparseable:
        return None


def _grouping_from_vector(vector: Sequence[int], n: int) -> Grouping:
    ids = range(n)
    return Grouping(
        targets=frozenset(i for i in ids if vector[i] == 1),
        distracters=frozenset(i for i in ids if vector[i] == 2),
        masked=frozenset(i for i in ids if vector[i] == 0),
    )


def trace_metrics(
    traces: Sequence[EpisodeTrace],
    scenes_by_id: Mapping[str, Scene],
    space: AttributeSpace,
) -> dict[str, float]:
    """All report metrics for one pool of episodes.

    Candidate-set F1 is scored at every recorded state against the true
    candidate set implied by the answers so far; address ratios classify
    each generated question against the grouping the policy targeted
    (questions whose grouping has no targets score neither).
    """
    lexicon = grammar.content_lexicon(space)
    f1_points: list[float] = []
    addresses: list[str] = []
    for trace in traces:
        scene = scenes_by_id[trace.scene_id]
        candidates = frozenset(o.id for o in scene.objects)
        for step in trace.steps:
            predicted = {i for i, s in enumerate(step.sigma) if s > 0.5}
            f1_points.append(f1_candidates(predicted, candidates))
            if step.question is None:
                continue
            ast = _parse_or_none(step.question, space)
            if step.group_vector is not None:
                grouping = _grouping_from_vector(step.group_vector, trace.n_objects)
                if grouping.targets:
                    addresses.append(oracle.classify_address(grouping, ast, scene))
                else:
                    addresses.append(oracle.NEITHER)
            candidates = candidates & oracle.matched_set(ast, step.answer, scene)
        if trace.final_sigma is not None:
            predicted = {i for i, s in enumerate(trace.final_sigma) if s > 0.5}
            f1_points.append(f1_candidates(predicted, candidates))
    perfect, correct = address_ratios(addresses)
    return {
        "f1": float(np.mean(f1_points)) if f1_points else 0.0,
        "perfect_address_ratio": perfect,
        "correct_address_ratio": correct,
        "task_success": task_success(traces),
        "mean_questions": float(np.mean([t.n_questions for t in traces])) if traces else 0.0,
        "n_vocab": vocab_metrics([t.questions for t in traces], lexicon)[0],
        "n_bar_vocab": vocab_metrics([t.questions for t in traces], lexicon)[1],
    }


METRIC_NAMES = (
    "f1",
    "perfect_address_ratio",
    "correct_address_ratio",
    "task_success",
    "mean_questions",
    "n_vocab",
    "n_bar_vocab",
)

SPLIT_NAMES = ("new_image", "new_object", "overall")


@dataclass
class MetricReport:
    """Per-seed metric values and their mean/std, by evaluation split."""

    mode: str
    seeds: list[int]
    per_seed: list[dict[str, dict[str, float]]]  # aligned with seeds

    def aggregate(self, split: str, name: str) -> tuple[float, float]:
        values = [record[split][name] for record in self.per_seed]
        mean = float(np.mean(values))
        std = float(statistics.pstdev(values)) if len(values) > 1 else 0.0
        return mean, std

    def validate(self) -> None:
        if len(self.seeds) != len(self.per_seed):
            raise ValueError("seed list and per-seed records disagree")
        for record in self.per_seed:
            for split, values in record.items():
                for name in ("f1", "perfect_address_ratio", "correct_address_ratio", "task_success"):
                    if not 0.0 <= values[name] <= 1.0:
                        raise ValueError(f"{split}/{name} outside [0,1]: {values[name]}")
                if values["perfect_address_ratio"] > values["correct_address_ratio"] + 1e-12:
                    raise ValueError(f"{split}: perfect ratio exceeds correct ratio")

    def to_json(self) -> dict:
        summary = {
            split: {
                name: dict(zip(("mean", "std"), self.aggregate(split, name)))
                for name in METRIC_NAMES
            }
            for split in self.per_seed[0]
        } if self.per_seed else {}
        return {
            "mode": self.mode,
            "seeds": self.seeds,
            "per_seed": self.per_seed,
            "summary": summary,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "MetricReport":
        report = cls(
            mode=payload["mode"], seeds=list(payload["seeds"]),
            per_seed=[dict(r) for r in payload["per_seed"]],
        )
        report.validate()
        return report

    def rows(self) -> list[dict[str, str]]:
        """Flat rows for delimited output: split, metric, mean, std."""
        out = []
        splits = self.per_seed[0].keys() if self.per_seed else ()
        for split in splits:
            for name in METRIC_NAMES:
                mean, std = self.aggregate(split, name)
                out.append(
                    {"split": split, "metric": name, "mean": f"{mean:.4f}", "std": f"{std:.4f}"}
                )
        return out


# ---------------------------------------------------------------------------
# evaluation driver


def build_eval_games(
    scenes: Sequence[Scene], games_per_scene: int, seed: int
) -> list[GameInstance]:
    """Fresh goals per scene, deterministic in the seed."""
    games = []
    for idx, scene in enumerate(scenes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        count = min(games_per_scene, len(scene))
        for goal in rng.choice(len(scene), size=count, replace=False):
            games.append(GameInstance(scene=scene, goal_id=int(goal)))
    return games


def episode_rng(eval_seed: int, scene_idx: int, goal: int) -> np.random.Generator:
    """The random-policy stream is a pure function of the episode identity,
    so results cannot depend on batch composition."""
    return np.random.default_rng(np.random.SeedSequence([eval_seed, scene_idx, goal]))


def _scene_index(games: Sequence[GameInstance]) -> dict[str, int]:
    order: dict[str, int] = {}
    for game in games:
        order.setdefault(game.scene.scene_id, len(order))
    return order


def evaluate_games(
    agent,
    games: Sequence[GameInstance],
    mode: str = "standard",
    reward_cfg=None,
    eval_seed: int = 0,
    batch_size: int = 64,
) -> tuple[dict[str, float], list[EpisodeTrace]]:
    """Greedy rollouts under one evaluation mode; returns metrics and traces."""
    from . import training  # avoid import cycle

    if mode not in ("standard", "force_stop", "random_otm", "random_otm_force_stop"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if reward_cfg is None:
        reward_cfg = training.RewardConfig(t_max=agent.config.t_max)
    force_stop = mode in ("force_stop", "random_otm_force_stop")
    random_policy = mode in ("random_otm", "random_otm_force_stop")
    scene_idx = _scene_index(games)
    traces: list[EpisodeTrace] = []
    for start in range(0, len(games), batch_size):
        chunk = list(games[start : start + batch_size])
        if agent.variant == "baseline":
            traces.extend(
                training.baseline_rollout_batch(
                    agent, chunk, reward_cfg, mode="greedy", force_stop=force_stop,
                )
            )
            continue
        kwargs = {}
        if random_policy:
            kwargs["policy"] = "random"
            kwargs["episode_rngs"] = [
                episode_rng(eval_seed, scene_idx[g.scene.scene_id], g.goal_id) for g in chunk
            ]
        traces.extend(
            training.rollout_batch(
                agent, chunk, reward_cfg, mode="greedy", force_stop=force_stop, **kwargs,
            )
        )
    scenes_by_id = {g.scene.scene_id: g.scene for g in games}
    return trace_metrics(traces, scenes_by_id, agent.space), traces


def evaluate(
    agent,
    dataset: Dataset,
    mode: str = "standard",
    seeds: Sequence[int] = (0,),
    games_per_scene: int = 2,
    reward_cfg=None,
    batch_size: int = 64,
    transcript_dir: Path | None = None,
    splits: Sequence[str] = ("new_image", "new_object"),
) -> MetricReport:
    """Full report over the held-out splits.

    new_image plays unseen scenes; new_object replays training scenes
    with freshly drawn goals.  Each seed redraws the goals (and, for the
    random mode, the action streams); the report keeps per-seed values.
    """
    sources = {"new_image": "test", "new_object": "train"}
    unknown = [s for s in splits if s not in sources]
    if unknown:
        raise ValueError(f"unknown evaluation splits {unknown}; expected {sorted(sources)}")
    split_scenes = {name: dataset.split(sources[name]) for name in splits}
    per_seed: list[dict[str, dict[str, float]]] = []
    for seed in seeds:
        record: dict[str, dict[str, float]] = {}
        all_traces: list[EpisodeTrace] = []
        all_scenes: dict[str, Scene] = {}
        for split_name, scenes in split_scenes.items():
            games = build_eval_games(scenes, games_per_scene, seed)
            values, traces = evaluate_games(
                agent, games, mode=mode, reward_cfg=reward_cfg,
                eval_seed=seed, batch_size=batch_size,
            )
            record[split_name] = values
            all_traces.extend(traces)
            all_scenes.update({g.scene.scene_id: g.scene for g in games})
            if transcript_dir is not None:
                path = Path(transcript_dir) / f"{mode}_{split_name}_seed{seed}.jsonl"
                write_transcripts(path, traces)
        record["overall"] = trace_metrics(all_traces, all_scenes, agent.space)
        per_seed.append(record)
    report = MetricReport(mode=mode, seeds=list(seeds), per_seed=per_seed)
    report.validate()
    return report


# ---------------------------------------------------------------------------
# transcripts


def trace_to_record(trace: EpisodeTrace) -> dict:
    return {
        "scene_id": trace.scene_id,
        "goal_id": trace.goal_id,
        "n_objects": trace.n_objects,
        "turns": [
            {
                "question": s.question,
                "answer": s.answer,
                "group_vector": s.group_vector,
                "action": s.action,
                "top_k": s.top_k,
                "p_goal": s.p_goal,
                "sigma": s.sigma,
                "reward": s.reward,
            }
            for s in trace.steps
        ],
        "prediction": trace.prediction,
        "success": trace.success,
        "reward": trace.reward,
        "submitted_at": trace.submitted_at,
        "forced": trace.forced,
        "final_sigma": trace.final_sigma,
        "final_p_goal": trace.final_p_goal,
    }


def record_to_trace(record: dict) -> EpisodeTrace:
    steps = [
        TraceStep(
            sigma=turn["sigma"], p_goal=turn["p_goal"], action=turn["action"],
            top_k=turn["top_k"], group_vector=turn["group_vector"],
            question=turn["question"], answer=turn["answer"], reward=turn["reward"],
        )
        for turn in record["turns"]
    ]
    return EpisodeTrace(
        scene_id=record["scene_id"], goal_id=record["goal_id"],
        n_objects=record["n_objects"], steps=steps,
        prediction=record["prediction"], success=record["success"],
        reward=record["reward"], submitted_at=record["submitted_at"],
        forced=record["forced"], final_sigma=record["final_sigma"],
        final_p_goal=record["final_p_goal"],
    )


def write_transcripts(path: Path, traces: Sequence[EpisodeTrace]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace_to_record(trace)) + "\n")


def read_transcripts(path: Path) -> list[EpisodeTrace]:
    traces = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                traces.append(record_to_trace(json.loads(line)))
    return traces
