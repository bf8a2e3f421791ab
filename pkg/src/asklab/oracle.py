"""Exact question semantics over scenes and the answering authority.

Everything here is pure set theory: per-object match predicates, yes/no
answers for a goal object, matched sets for (question, answer) pairs,
candidate tracking across a dialogue, address classification of
generated questions, and sampling of informative ground-truth questions.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import grammar
from .grammar import ATTRIBUTE_KIND, Descriptor, QuestionAst
from .scenes import ATTRIBUTE_DIMS, AttributeSpace, GameInstance, Scene, SceneObject

PERFECT = "perfect"
CORRECT = "correct"
NEITHER = "neither"


class NoInformativeQuestion(RuntimeError):
    """No expressible question splits the candidate set; resample the scene."""


@dataclass(frozen=True)
class Grouping:
    """Three-way object assignment: targets O_t, distracters O_d, masked O_m."""

    targets: frozenset[int]
    distracters: frozenset[int]
    masked: frozenset[int]

    def __post_init__(self) -> None:
        if self.targets & self.distracters or self.targets & self.masked or self.distracters & self.masked:
            raise ValueError("grouping sets must be disjoint")

    def validate_for(self, scene: Scene) -> None:
        ids = set(range(len(scene)))
        union = self.targets | self.distracters | self.masked
        if union != ids:
            raise ValueError(
                f"grouping covers {sorted(union)} but scene has ids {sorted(ids)}"
            )


def _descriptor_matches(obj: SceneObject, descriptor: Descriptor) -> bool:
    return all(
        descriptor.value(dim) is None or obj.attribute(dim) == descriptor.value(dim)
        for dim in ATTRIBUTE_DIMS
    )


def _in_relation(obj: SceneObject, referent: SceneObject, relation: str) -> bool:
    if relation == "left":
        return obj.position[0] < referent.position[0]
    if relation == "right":
        return obj.position[0] > referent.position[0]
    # y grows toward the viewer: larger y is further in front
    if relation == "front":
        return obj.position[1] > referent.position[1]
    if relation == "behind":
        return obj.position[1] < referent.position[1]
    raise ValueError(f"unknown relation {relation!r}")


def matches(obj: SceneObject, ast: QuestionAst | None, scene: Scene) -> bool:
    """Does ``obj`` satisfy the question?  Unparseable questions match nothing.

    Attribute questions check the descriptor on the object itself.
    Relational questions hold when some other object satisfies the
    descriptor and ``obj`` stands in the stated relation to it.
    """
    if ast is None:
        return False
    if ast.kind == ATTRIBUTE_KIND:
        return _descriptor_matches(obj, ast.descriptor)
    return any(
        ref.id != obj.id
        and _descriptor_matches(ref, ast.descriptor)
        and _in_relation(obj, ref, ast.relation)
        for ref in scene.objects
    )


def answer(ast: QuestionAst | None, game: GameInstance) -> bool:
    """Yes iff the goal object matches; unparseable questions answer no."""
    return matches(game.goal, ast, game.scene)


def match_set(ast: QuestionAst | None, scene: Scene) -> frozenset[int]:
    """Ids of objects satisfying the question (S in the address rules)."""
    return frozenset(o.id for o in scene.objects if matches(o, ast, scene))


def matched_set(ast: QuestionAst | None, ans: bool, scene: Scene) -> frozenset[int]:
    """O_q: objects consistent with the (question, answer) pair."""
    s = match_set(ast, scene)
    if ans:
        return s
    return frozenset(o.id for o in scene.objects) - s


def candidate_set(
    dialogue: Iterable[tuple[QuestionAst | None, bool]], scene: Scene
) -> frozenset[int]:
    """O_D: intersection of matched sets over the dialogue so far."""
    out = frozenset(o.id for o in scene.objects)
    for ast, ans in dialogue:
        out &= matched_set(ast, ans, scene)
    return out


def classify_address(grouping: Grouping, ast: QuestionAst | None, scene: Scene) -> str:
    """Does the question separate targets from distracters, and how cleanly?

    The question's match set must contain all targets and no distracters
    (or the exact mirror image); the verdict is perfect when the target
    side is also free of masked objects, correct otherwise.
    """
    if not grouping.targets:
        raise ValueError("grouping has no targets")
    s = match_set(ast, scene)
    all_ids = frozenset(o.id for o in scene.objects)
    if grouping.targets <= s and not (grouping.distracters & s):
        target_side = s
    elif not (grouping.targets & s) and grouping.distracters <= s:
        target_side = all_ids - s
    else:
        return NEITHER
    return PERFECT if not (target_side & grouping.masked) else CORRECT


@functools.lru_cache(maxsize=2048)
def match_matrix(scene: Scene, space: AttributeSpace) -> np.ndarray:
    """Boolean matrix (n_asts, n_objects) of matches, rows aligned with
    ``grammar.enumerate_asts(space)``.  Cached per (scene, space)."""
    descriptors = grammar.enumerate_descriptors(space)
    n = len(scene)
    desc_m = np.zeros((len(descriptors), n), dtype=bool)
    for di, d in enumerate(descriptors):
        for obj in scene.objects:
            desc_m[di, obj.id] = _descriptor_matches(obj, d)

    xs = np.array([o.position[0] for o in scene.objects])
    ys = np.array([o.position[1] for o in scene.objects])
    rel = {
        "left": xs[:, None] < xs[None, :],
        "right": xs[:, None] > xs[None, :],
        "front": ys[:, None] > ys[None, :],
        "behind": ys[:, None] < ys[None, :],
    }

    blocks = [desc_m]
    for relation in grammar.RELATIONS:
        # object i matches iff some referent j satisfies the descriptor
        # and i stands in the relation to j; strictness excludes j = i
        blocks.append((rel[relation].astype(np.int8) @ desc_m.T.astype(np.int8)).T > 0)
    out = np.vstack(blocks)
    out.setflags(write=False)
    return out


def informative_indices(
    scene: Scene, space: AttributeSpace, candidates: frozenset[int]
) -> np.ndarray:
    """Indices into enumerate_asts whose match set splits the candidates."""
    matrix = match_matrix(scene, space)
    cand = sorted(candidates)
    inside = matrix[:, cand].sum(axis=1)
    return np.flatnonzero((inside > 0) & (inside < len(cand)))


def sample_gt_question(
    scene: Scene,
    candidates: frozenset[int] | set[int],
    rng: np.random.Generator,
    space: AttributeSpace,
) -> tuple[QuestionAst, Grouping]:
    """Uniform draw over questions that split ``candidates`` non-trivially.

    The returned grouping sets targets to the candidates inside the match
    set, distracters to the candidates outside it, and masks everything
    else in the scene.
    """
    candidates = frozenset(candidates)
    if len(candidates) < 2:
        raise ValueError(f"need at least 2 candidates, got {len(candidates)}")
    idx = informative_indices(scene, space, candidates)
    if idx.size == 0:
        raise NoInformativeQuestion(
            f"scene {scene.scene_id!r}: no question splits candidates {sorted(candidates)}"
        )
    asts = grammar.enumerate_asts(space)
    choice = asts[int(idx[rng.integers(idx.size)])]
    s = match_set(choice, scene)
    grouping = Grouping(
        targets=candidates & s,
        distracters=candidates - s,
        masked=frozenset(o.id for o in scene.objects) - candidates,
    )
    return choice, grouping


def sample_gt_questions(
    scene: Scene, space: AttributeSpace, rng: np.random.Generator, count: int
) -> tuple[str, ...]:
    """Independent draws with candidates = all objects; surface strings."""
    all_ids = frozenset(o.id for o in scene.objects)
    out = []
    for _ in range(count):
        ast, _ = sample_gt_question(scene, all_ids, rng, space)
        out.append(grammar.question_string(ast))
    return tuple(out)
