"""Targeting actions: base-3 codec between action indices and group vectors.

An action over the top-k objects is an integer in [0, 3^k).  Its base-3
digits assign a group id to each top-k object, least-significant digit
first (highest-confidence object first).  Group ids: 0 masked, 1 target,
2 distracter.  The two constant assignments, all-masked (0) and
all-distracter (3^k - 1), contain no target and double as the submission
actions that end the dialogue.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MASKED = 0
TARGET = 1
DISTRACTER = 2

GROUP_NAMES = {MASKED: "masked", TARGET: "target", DISTRACTER: "distracter"}


def n_actions(k: int) -> int:
    return 3**k


def is_submission(value: int, k: int) -> bool:
    return value == 0 or value == 3**k - 1


@dataclass(frozen=True)
class ActionIndex:
    value: int
    k: int

    def __post_init__(self) -> None:
        if not 0 <= self.value < 3**self.k:
            raise ValueError(f"action {self.value} out of range for k={self.k}")

    @property
    def is_submission(self) -> bool:
        return is_submission(self.value, self.k)


def action_digits(value: int, k: int) -> tuple[int, ...]:
    """Base-3 digits, least significant first."""
    if not 0 <= value < 3**k:
        raise ValueError(f"action {value} out of range for k={k}")
    return tuple((value // 3**i) % 3 for i in range(k))


def digits_to_action(digits: Sequence[int]) -> int:
    if any(d not in (MASKED, TARGET, DISTRACTER) for d in digits):
        raise ValueError(f"digits must be 0/1/2, got {list(digits)}")
    return sum(d * 3**i for i, d in enumerate(digits))


def action_to_group_vector(value: int, top_k: Sequence[int], n_max: int) -> np.ndarray:
    """Group ids per object slot, length n_max.

    ``top_k[0]`` (the highest-confidence object) receives the least
    significant digit.  Objects outside the top-k, and padded slots, are
    masked.
    """
    digits = action_digits(value, len(top_k))
    out = np.zeros(n_max, dtype=np.int64)
    for digit, obj_id in zip(digits, top_k):
        if not 0 <= obj_id < n_max:
            raise ValueError(f"object id {obj_id} out of range for n_max={n_max}")
        out[obj_id] = digit
    return out


def group_vector_to_action(groups: np.ndarray, top_k: Sequence[int]) -> int:
    """Inverse of :func:`action_to_group_vector` over the top-k slots."""
    return digits_to_action([int(groups[obj_id]) for obj_id in top_k])
