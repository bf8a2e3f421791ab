"""Question grammar: ASTs, surface realization, parsing, and vocabulary.

The grammar covers two yes/no question forms over an attribute space:

* attribute questions, "is it a large red rubber cube ?";
* relational questions, "is it to the left of a red cube ?".

Descriptors mention any non-empty subset of the active attribute
dimensions; a missing shape is realized as the wildcard "thing".
Realization is canonical (one surface per AST) while parsing accepts
attribute words in any order, so model-emitted token sequences round-trip
through :func:`parse` into the exact semantics the answerer evaluates.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence

from .scenes import ATTRIBUTE_DIMS, AttributeSpace

ATTRIBUTE_KIND = "attribute"
RELATIONAL_KIND = "relational"

RELATIONS = ("left", "right", "front", "behind")

# Surface words introducing each relation; all are followed by "of".
_RELATION_PHRASES = {
    "left": ("to", "the", "left"),
    "right": ("to", "the", "right"),
    "front": ("in", "front"),
    "behind": ("behind",),
}

WILDCARD = "thing"
QUESTION_MARK = "?"

PAD, CLS, BOS, EOS, EOD, YES, NO = (
    "[PAD]",
    "[CLS]",
    "[BOS]",
    "[EOS]",
    "[EOD]",
    "[YES]",
    "[NO]",
)
SPECIAL_TOKENS = (PAD, CLS, BOS, EOS, EOD, YES, NO)

_FUNCTION_WORDS = ("is", "it", "a", "of", "to", "the", "in", WILDCARD, QUESTION_MARK)


class Unparseable(ValueError):
    """Token sequence is not a well-formed question."""

    def __init__(self, tokens: Sequence[str], position: int, reason: str = ""):
        self.tokens = tuple(tokens)
        self.position = position
        detail = f" ({reason})" if reason else ""
        super().__init__(
            f"unparseable at position {position}: {' '.join(self.tokens) or '<empty>'}{detail}"
        )


@dataclass(frozen=True)
class Descriptor:
    """Attribute conjunction; ``None`` fields are wildcards.

    A wildcard shape surfaces as "thing".  At least one field must be
    set, otherwise the descriptor matches everything and carries no
    information.
    """

    size: str | None = None
    color: str | None = None
    material: str | None = None
    shape: str | None = None

    def __post_init__(self) -> None:
        if self.size is None and self.color is None and self.material is None and self.shape is None:
            raise ValueError("descriptor must constrain at least one attribute")

    def value(self, dim: str) -> str | None:
        return {
            "size": self.size,
            "color": self.color,
            "material": self.material,
            "shape": self.shape,
        }[dim]

    def words(self) -> tuple[str, ...]:
        # Canonical order: size, color, material, then shape or "thing".
        out = [self.value(d) for d in ("size", "color", "material") if self.value(d) is not None]
        out.append(self.shape if self.shape is not None else WILDCARD)
        return tuple(out)

    def validate(self, space: AttributeSpace) -> None:
        for dim in ATTRIBUTE_DIMS:
            val = self.value(dim)
            if val is None:
                continue
            if not space.is_active(dim):
                raise ValueError(f"descriptor uses inactive dimension {dim!r}")
            if val not in space.values(dim):
                raise ValueError(f"unknown {dim} value {val!r}")


@dataclass(frozen=True)
class QuestionAst:
    """One yes/no question: the subject descriptor, or a relation to a referent."""

    kind: str
    descriptor: Descriptor
    relation: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in (ATTRIBUTE_KIND, RELATIONAL_KIND):
            raise ValueError(f"unknown question kind {self.kind!r}")
        if (self.relation is not None) != (self.kind == RELATIONAL_KIND):
            raise ValueError("relation must be present exactly for relational questions")
        if self.relation is not None and self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")


def realize(ast: QuestionAst) -> tuple[str, ...]:
    """Render the canonical surface form, ending with [EOS]."""
    words = ["is", "it"]
    if ast.kind == RELATIONAL_KIND:
        words.extend(_RELATION_PHRASES[ast.relation])
        words.append("of")
    words.append("a")
    words.extend(ast.descriptor.words())
    words.append(QUESTION_MARK)
    words.append(EOS)
    return tuple(words)


def question_string(ast: QuestionAst) -> str:
    """Surface form without the [EOS] marker, for files and transcripts."""
    return " ".join(realize(ast)[:-1])


def _parse_descriptor(
    tokens: Sequence[str], start: int, end: int, space: AttributeSpace
) -> Descriptor:
    """Read attribute words in any order between ``start`` and ``end``."""
    found: dict[str, str] = {}
    wildcard_seen = False
    word_dims = {
        val: dim
        for dim in ATTRIBUTE_DIMS
        if space.is_active(dim)
        for val in space.values(dim)
    }
    for pos in range(start, end):
        word = tokens[pos]
        if word == WILDCARD:
            if wildcard_seen or "shape" in found:
                raise Unparseable(tokens, pos, "repeated shape constraint")
            wildcard_seen = True
            continue
        dim = word_dims.get(word)
        if dim is None:
            raise Unparseable(tokens, pos, f"unknown attribute word {word!r}")
        if dim in found or (dim == "shape" and wildcard_seen):
            raise Unparseable(tokens, pos, f"repeated {dim} constraint")
        found[dim] = word
    if not found:
        raise Unparseable(tokens, start, "empty descriptor")
    return Descriptor(
        size=found.get("size"),
        color=found.get("color"),
        material=found.get("material"),
        shape=found.get("shape"),
    )


def parse(tokens: Sequence[str] | str, space: AttributeSpace) -> QuestionAst:
    """Parse a token sequence (or space-joined string) into an AST.

    Attribute words may appear in any order; a trailing "?" and [EOS]
    are optional, and anything after the first [EOS] is ignored.  Raises
    :class:`Unparseable` with the offending position otherwise.
    """
    if isinstance(tokens, str):
        tokens = tokens.split()
    tokens = tuple(tokens)
    if EOS in tokens:
        tokens_eff = tokens[: tokens.index(EOS)]
    else:
        tokens_eff = tokens

    def expect(pos: int, word: str) -> int:
        if pos >= len(tokens_eff) or tokens_eff[pos] != word:
            raise Unparseable(tokens, pos, f"expected {word!r}")
        return pos + 1

    pos = expect(0, "is")
    pos = expect(pos, "it")

    relation: str | None = None
    if pos < len(tokens_eff):
        head = tokens_eff[pos]
        if head == "to":
            pos += 1
            pos = expect(pos, "the")
            if pos >= len(tokens_eff) or tokens_eff[pos] not in ("left", "right"):
                raise Unparseable(tokens, pos, "expected 'left' or 'right'")
            relation = tokens_eff[pos]
            pos += 1
            pos = expect(pos, "of")
        elif head == "in":
            pos += 1
            pos = expect(pos, "front")
            relation = "front"
            pos = expect(pos, "of")
        elif head == "behind":
            relation = "behind"
            pos += 1
            # canonical form inserts "of" after every relation phrase
            if pos < len(tokens_eff) and tokens_eff[pos] == "of":
                pos += 1

    if pos < len(tokens_eff) and tokens_eff[pos] == "a":
        pos += 1

    end = len(tokens_eff)
    if end > pos and tokens_eff[end - 1] == QUESTION_MARK:
        end -= 1

    descriptor = _parse_descriptor(tokens_eff, pos, end, space)
    if relation is None:
        return QuestionAst(kind=ATTRIBUTE_KIND, descriptor=descriptor)
    return QuestionAst(kind=RELATIONAL_KIND, descriptor=descriptor, relation=relation)


def enumerate_descriptors(space: AttributeSpace) -> tuple[Descriptor, ...]:
    """All valid descriptors over the active dimensions, in a stable order."""

    def choices(dim: str) -> list[str | None]:
        if not space.is_active(dim):
            return [None]
        return [None] + list(space.values(dim))

    out: list[Descriptor] = []
    for size in choices("size"):
        for color in choices("color"):
            for material in choices("material"):
                for shape in choices("shape"):
                    if size is None and color is None and material is None and shape is None:
                        continue
                    out.append(Descriptor(size=size, color=color, material=material, shape=shape))
    return tuple(out)


def enumerate_asts(space: AttributeSpace) -> tuple[QuestionAst, ...]:
    """Every expressible question: each descriptor in attribute form plus
    one relational form per relation."""
    descriptors = enumerate_descriptors(space)
    out: list[QuestionAst] = [
        QuestionAst(kind=ATTRIBUTE_KIND, descriptor=d) for d in descriptors
    ]
    for relation in RELATIONS:
        out.extend(
            QuestionAst(kind=RELATIONAL_KIND, descriptor=d, relation=relation)
            for d in descriptors
        )
    return tuple(out)


@dataclass(frozen=True)
class Vocabulary:
    """Dense token-id mapping with special tokens at fixed low ids."""

    tokens: tuple[str, ...]
    content_tokens: frozenset[str]

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("special tokens must occupy the leading ids")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def token_to_id(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens: Sequence[str]) -> list[int]:
        table = self.token_to_id
        try:
            return [table[t] for t in tokens]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def cls_id(self) -> int:
        return 1

    @property
    def bos_id(self) -> int:
        return 2

    @property
    def eos_id(self) -> int:
        return 3

    @property
    def eod_id(self) -> int:
        return 4

    @property
    def yes_id(self) -> int:
        return 5

    @property
    def no_id(self) -> int:
        return 6

    @property
    def content_ids(self) -> frozenset[int]:
        table = self.token_to_id
        return frozenset(table[t] for t in self.content_tokens)

    def answer_id(self, yes: bool) -> int:
        return self.yes_id if yes else self.no_id

    def digest(self) -> str:
        return hashlib.sha256("\x00".join(self.tokens).encode("utf-8")).hexdigest()


def content_lexicon(space: AttributeSpace) -> frozenset[str]:
    """Attribute values plus relation words; excludes function words."""
    words: set[str] = set(RELATIONS)
    for dim in ATTRIBUTE_DIMS:
        if space.is_active(dim):
            words.update(space.values(dim))
    return frozenset(words)


def build_vocabulary(space: AttributeSpace) -> Vocabulary:
    """Specials first in fixed order, then all surface words, sorted."""
    words: set[str] = set(_FUNCTION_WORDS)
    words.update(RELATIONS)
    for dim in ATTRIBUTE_DIMS:
        if space.is_active(dim):
            words.update(space.values(dim))
    tokens = SPECIAL_TOKENS + tuple(sorted(words))
    return Vocabulary(tokens=tokens, content_tokens=content_lexicon(space))


def max_question_len(space: AttributeSpace) -> int:
    """Longest realized question in tokens, [EOS] included."""
    return max(len(realize(ast)) for ast in enumerate_asts(space))
