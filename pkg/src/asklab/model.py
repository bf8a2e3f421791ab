"""Questioner networks: transformer encoder, targeting module, decoders.

The main agent encodes [object slots; CLS; dialogue tokens] with one
transformer, scores each object against the CLS summary to get goal
probabilities, picks the top-k objects, and lets a small recurrent
policy choose a base-3 targeting action over them.  A transformer
decoder then generates the next question from the object embeddings
shifted by the chosen group ids.  Ablation variants rewire which parts
share parameters; all of them expose the same agent surface.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import actions, features, grammar
from .grammar import Vocabulary
from .scenes import AttributeSpace, N_MAX, Scene

logger = logging.getLogger(__name__)

VARIANTS = ("uniqer", "vanilla", "not_unified_mlp_guesser", "not_unified", "baseline")

# A dialogue is a list of (question token ids without [EOS], answer token id).
DialoguePair = tuple[list[int], int]
Dialogue = list[DialoguePair]


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale defaults; the published configuration used d_model=512,
    n_head=8, dim_feedforward=512, n_layers=3, dropout=0.1."""

    d_model: int = 128
    n_head: int = 4
    dim_feedforward: int = 256
    n_layers: int = 2
    dropout: float = 0.1
    k: int = 3
    n_max: int = N_MAX
    t_max: int = 5
    max_decode_len: int = 14
    d_v: int = 16
    identity_projection: bool = False
    variant: str = "uniqer"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.n_max < self.k:
            raise ValueError(f"n_max={self.n_max} must be >= k={self.k}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        return cls(**dict(data))


@dataclass
class AgentState:
    """Everything downstream consumers need after encoding a dialogue."""

    sigma: Tensor  # (B, N) per-object candidate scores, padded slots zero
    p_goal: Tensor  # (B, N) goal distribution over real objects
    obj_mask: Tensor  # (B, N) bool, True on real objects
    memory: Tensor  # (B, N, d) object embeddings feeding the decoder
    o_v: Tensor  # (B, N, d_v) raw visual features
    scenes: tuple[Scene, ...]
    extras: dict | None = None


class SceneFeatureCache:
    """Per-scene feature tensors, built once and reused across turns."""

    def __init__(self, projector: features.FeatureProjector, n_max: int):
        self.projector = projector
        self.n_max = n_max
        self._store: dict[Scene, tuple[Tensor, Tensor, Tensor]] = {}

    def get(self, scene: Scene) -> tuple[Tensor, Tensor, Tensor]:
        hit = self._store.get(scene)
        if hit is None:
            o_v, o_g = self.projector.scene_features(scene, self.n_max)
            mask = torch.zeros(self.n_max, dtype=torch.bool)
            mask[: len(scene)] = True
            hit = (
                torch.from_numpy(o_v).float(),
                torch.from_numpy(o_g).float(),
                mask,
            )
            self._store[scene] = hit
        return hit

    def batch(self, scenes: Sequence[Scene]) -> tuple[Tensor, Tensor, Tensor]:
        rows = [self.get(s) for s in scenes]
        return (
            torch.stack([r[0] for r in rows]),
            torch.stack([r[1] for r in rows]),
            torch.stack([r[2] for r in rows]),
        )


def flatten_dialogue(dialogue: Dialogue) -> list[int]:
    out: list[int] = []
    for q_ids, a_id in dialogue:
        out.extend(q_ids)
        out.append(a_id)
    return out


def collate_token_ids(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[Tensor, Tensor]:
    """Pad to a common length; returns (ids, mask) with True on real tokens."""
    max_len = max((len(s) for s in seqs), default=0)
    ids = torch.full((len(seqs), max_len), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), max_len), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def masked_goal_softmax(sigma: Tensor, obj_mask: Tensor) -> Tensor:
    """Softmax of the scores restricted to real objects."""
    filled = sigma.masked_fill(~obj_mask, float("-inf"))
    return torch.softmax(filled, dim=-1)


def top_k_select(p_goal: np.ndarray, k: int, n_real: int) -> list[int]:
    """Ids of the k most probable real objects, probability descending,
    ties broken by ascending id; shorter when the scene has fewer objects."""
    ids = np.arange(n_real)
    order = np.lexsort((ids, -p_goal[:n_real]))
    return [int(i) for i in order[: min(k, n_real)]]


class ObjectEncoderTransformer(nn.Module):
    """Self-attention over [objects; CLS; dialogue] with role embeddings.

    Every object slot shares position id 0 and the CLS sits at 1, so the
    encoder stays permutation-aware only through content; dialogue tokens
    get strictly increasing positions from 2.
    """

    SEG_OBJECT, SEG_CLS, SEG_DIALOGUE = 0, 1, 2

    def __init__(self, config: ModelConfig, vocab: Vocabulary, n_positions: int):
        super().__init__()
        self.config = config
        self.cls_id = vocab.cls_id
        d = config.d_model
        obj_in = config.d_v + 5 * config.n_max
        self.fuse = nn.Linear(obj_in, d)
        self.token_emb = nn.Embedding(len(vocab), d, padding_idx=vocab.pad_id)
        self.segment_emb = nn.Embedding(3, d)
        self.position_emb = nn.Embedding(n_positions, d)
        self.embed_norm = nn.LayerNorm(d)
        # pre-norm trains reliably at this scale without a warmup schedule
        layer = nn.TransformerEncoderLayer(
            d, config.n_head, config.dim_feedforward, config.dropout,
            batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, config.n_layers, enable_nested_tensor=False)
        self.score_obj = nn.Linear(d, d)
        self.score_cls = nn.Linear(d, d)

    def forward(
        self,
        o_v: Tensor,
        o_g: Tensor,
        obj_mask: Tensor,
        dlg_ids: Tensor,
        dlg_mask: Tensor,
    ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Returns (x_obj, x_cls, sigma, p_goal)."""
        b, n = obj_mask.shape
        dev = o_v.device
        x_obj = (
            self.fuse(torch.cat([o_v, o_g], dim=-1))
            + self.segment_emb.weight[self.SEG_OBJECT]
            + self.position_emb.weight[0]
        )
        x_cls = (
            self.token_emb.weight[self.cls_id]
            + self.segment_emb.weight[self.SEG_CLS]
            + self.position_emb.weight[1]
        ).expand(b, 1, -1)
        length = dlg_ids.shape[1]
        if length + 2 > self.position_emb.num_embeddings:
            raise ValueError(
                f"dialogue of {length} tokens exceeds the position budget "
                f"{self.position_emb.num_embeddings - 2}"
            )
        x_dlg = (
            self.token_emb(dlg_ids)
            + self.segment_emb.weight[self.SEG_DIALOGUE]
            + self.position_emb(torch.arange(2, 2 + length, device=dev))
        )
        x = self.embed_norm(torch.cat([x_obj, x_cls, x_dlg], dim=1))
        pad = torch.cat(
            [~obj_mask, torch.zeros(b, 1, dtype=torch.bool, device=dev), ~dlg_mask],
            dim=1,
        )
        h = self.encoder(x, src_key_padding_mask=pad)
        h_obj, h_cls = h[:, :n], h[:, n]
        # 1/sqrt(d) keeps the score in sigmoid's responsive range at init
        scale = self.config.d_model ** -0.5
        sigma = torch.sigmoid(
            (self.score_obj(h_obj) * self.score_cls(h_cls).unsqueeze(1)).sum(-1) * scale
        )
        sigma = sigma * obj_mask
        p_goal = masked_goal_softmax(sigma, obj_mask)
        return h_obj, h_cls, sigma, p_goal


class QuestionDecoderTransformer(nn.Module):
    """Standard autoregressive decoder over the group-shifted object memory."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.config = config
        self.vocab_size = len(vocab)
        d = config.d_model
        self.token_emb = nn.Embedding(self.vocab_size, d, padding_idx=vocab.pad_id)
        self.position_emb = nn.Embedding(config.max_decode_len + 1, d)
        self.group_emb = nn.Embedding(3, d)
        self.embed_norm = nn.LayerNorm(d)
        layer = nn.TransformerDecoderLayer(
            d, config.n_head, config.dim_feedforward, config.dropout,
            batch_first=True, norm_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, config.n_layers)
        self.out = nn.Linear(d, self.vocab_size)

    def memory(self, x_obj: Tensor, groups: Tensor) -> Tensor:
        return x_obj + self.group_emb(groups)

    def forward(self, tgt_ids: Tensor, memory: Tensor, obj_mask: Tensor) -> Tensor:
        """Teacher-forced logits (B, L, vocab); tgt_ids starts with [BOS]."""
        length = tgt_ids.shape[1]
        dev = tgt_ids.device
        x = self.embed_norm(
            self.token_emb(tgt_ids) + self.position_emb(torch.arange(length, device=dev))
        )
        causal = torch.triu(torch.ones(length, length, dtype=torch.bool, device=dev), 1)
        h = self.decoder(x, memory, tgt_mask=causal, memory_key_padding_mask=~obj_mask)
        return self.out(h)

    @torch.no_grad()
    def generate(
        self, memory: Tensor, obj_mask: Tensor, bos_id: int, eos_id: int
    ) -> list[list[int]]:
        """Greedy decoding; returns token ids without [BOS] or [EOS]."""
        b = memory.shape[0]
        dev = memory.device
        ids = torch.full((b, 1), bos_id, dtype=torch.long, device=dev)
        done = torch.zeros(b, dtype=torch.bool, device=dev)
        for _ in range(self.config.max_decode_len):
            logits = self.forward(ids, memory, obj_mask)[:, -1]
            nxt = logits.argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, eos_id), nxt)
            ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
            done = done | (nxt == eos_id)
            if bool(done.all()):
                break
        if not bool(done.all()):
            logger.debug("decoder hit max_decode_len without [EOS] on %d rows", int((~done).sum()))
        out: list[list[int]] = []
        for row in ids[:, 1:].tolist():
            q = []
            for tok in row:
                if tok == eos_id:
                    break
                q.append(tok)
            out.append(q)
        return out


class ObjectTargetingModule(nn.Module):
    """Bidirectional GRU policy over the top-k rows, one logit per action."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d_a = max(8, config.d_model // 4)
        d_b = max(8, config.d_model // 4)
        d_c = 8
        hidden = max(16, config.d_model // 2)
        self.f_a = nn.Linear(config.d_v, d_a)
        self.f_b = nn.Linear(5 * config.k, d_b)
        self.f_c = nn.Linear(1, d_c)
        self.gru = nn.GRU(
            d_a + d_b + d_c, hidden, num_layers=2, bidirectional=True, batch_first=True
        )
        self.head = nn.Sequential(
            nn.Linear(2 * hidden, 2 * hidden),
            nn.ReLU(),
            nn.Linear(2 * hidden, actions.n_actions(config.k)),
        )

    def forward(self, o_v_k: Tensor, o_g_k: Tensor, p_k: Tensor) -> Tensor:
        """Rows ordered by decreasing confidence; returns action logits."""
        x = torch.cat([self.f_a(o_v_k), self.f_b(o_g_k), self.f_c(p_k)], dim=-1)
        _, h_n = self.gru(x)
        summary = torch.cat([h_n[-2], h_n[-1]], dim=-1)
        return self.head(summary)


class RecurrentGuesser(nn.Module):
    """Dialogue LSTM plus per-object scoring, used by the ablation variants
    that keep the guesser outside the transformer."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        super().__init__()
        d = config.d_model
        self.token_emb = nn.Embedding(len(vocab), d, padding_idx=vocab.pad_id)
        self.lstm = nn.LSTM(d, d, batch_first=True)
        self.f_obj = nn.Linear(config.d_v + 5 * config.n_max, d)
        self.f_dlg = nn.Linear(d, d)

    def dialogue_state(self, dlg_ids: Tensor, dlg_mask: Tensor) -> Tensor:
        b = dlg_ids.shape[0]
        if dlg_ids.shape[1] == 0:
            return torch.zeros(b, self.f_dlg.in_features, device=dlg_ids.device)
        out, _ = self.lstm(self.token_emb(dlg_ids))
        lengths = dlg_mask.sum(1)
        idx = (lengths - 1).clamp(min=0)
        state = out[torch.arange(b), idx]
        return torch.where((lengths > 0).unsqueeze(1), state, torch.zeros_like(state))

    def forward(
        self, o_v: Tensor, o_g: Tensor, obj_mask: Tensor, dlg_ids: Tensor, dlg_mask: Tensor
    ) -> tuple[Tensor, Tensor]:
        state = self.dialogue_state(dlg_ids, dlg_mask)
        scores = (self.f_obj(torch.cat([o_v, o_g], -1)) * self.f_dlg(state).unsqueeze(1)).sum(-1)
        sigma = torch.sigmoid(scores) * obj_mask
        return sigma, masked_goal_softmax(sigma, obj_mask)


class QuestionerAgent(nn.Module):
    """Shared surface for every variant: encode, target, generate, predict."""

    def __init__(self, config: ModelConfig, space: AttributeSpace):
        super().__init__()
        self.config = config
        self.space = space
        self.vocab = grammar.build_vocabulary(space)
        projector = features.FeatureProjector(
            space, d_v=config.d_v, seed=config.seed, identity=config.identity_projection
        )
        self.feature_cache = SceneFeatureCache(projector, config.n_max)

    @property
    def variant(self) -> str:
        return self.config.variant

    def n_positions(self) -> int:
        # worst case: every turn decodes to the full budget (no [EOS]) plus
        # its answer token; the leading 2 covers the object/CLS slots
        per_turn = max(grammar.max_question_len(self.space), self.config.max_decode_len) + 1
        return 2 + self.config.t_max * per_turn + 2

    def encode(self, scenes: Sequence[Scene], dialogues: Sequence[Dialogue]) -> AgentState:
        raise NotImplementedError

    def featurize(self, scenes: Sequence[Scene]) -> tuple[Tensor, Tensor, Tensor]:
        """Cached per-scene features, cast to the module's dtype."""
        o_v, o_g, obj_mask = self.feature_cache.batch(scenes)
        dtype = next(self.parameters()).dtype
        return o_v.to(dtype), o_g.to(dtype), obj_mask

    def teacher_logits(self, state: AgentState, groups: Tensor, tgt_in: Tensor) -> Tensor:
        raise NotImplementedError

    def generate(self, state: AgentState, groups: Tensor) -> list[list[int]]:
        raise NotImplementedError

    def sl_parameters(self) -> list[nn.Parameter]:
        """Parameters trained by the supervised stage."""
        otm = getattr(self, "otm", None)
        otm_ids = {id(p) for p in otm.parameters()} if otm is not None else set()
        return [p for p in self.parameters() if id(p) not in otm_ids]

    def rl_parameters(self) -> list[nn.Parameter]:
        """Parameters trained by the policy-gradient stage."""
        return list(self.otm.parameters())

    def otm_logits(self, state: AgentState) -> tuple[Tensor, list[list[int]]]:
        """Action logits from the targeting module plus the top-k id lists.

        Inputs are detached: the policy stage must not push gradients
        into the encoder.
        """
        cfg = self.config
        p = state.p_goal.detach()
        o_v = state.o_v.detach()
        p_np = p.cpu().numpy()
        top_k: list[list[int]] = []
        dtype = p.dtype
        o_v_k = torch.zeros(len(state.scenes), cfg.k, cfg.d_v, dtype=dtype)
        o_g_k = torch.zeros(len(state.scenes), cfg.k, 5 * cfg.k, dtype=dtype)
        p_k = torch.zeros(len(state.scenes), cfg.k, 1, dtype=dtype)
        for i, scene in enumerate(state.scenes):
            ids = top_k_select(p_np[i], cfg.k, len(scene))
            top_k.append(ids)
            for row, obj_id in enumerate(ids):
                o_v_k[i, row] = o_v[i, obj_id]
                o_g_k[i, row] = torch.from_numpy(
                    features.geometric_vector(obj_id, tuple(ids), scene, cfg.k)
                ).to(dtype)
                p_k[i, row, 0] = p[i, obj_id]
        return self.otm(o_v_k, o_g_k, p_k), top_k

    def predict(self, state: AgentState) -> list[int]:
        """Goal guesses: argmax of P over real objects."""
        return [int(i) for i in state.p_goal.argmax(-1).tolist()]


class _TransformerCore(QuestionerAgent):
    """Common machinery for the transformer-based variants."""

    def __init__(self, config: ModelConfig, space: AttributeSpace):
        super().__init__(config, space)
        self.qdt = QuestionDecoderTransformer(config, self.vocab)
        self.otm = ObjectTargetingModule(config)

    def _encode_with(
        self,
        oet: ObjectEncoderTransformer,
        scenes: Sequence[Scene],
        dialogues: Sequence[Dialogue],
    ) -> tuple[Tensor, Tensor, Tensor, tuple[Tensor, Tensor, Tensor, Tensor, Tensor]]:
        o_v, o_g, obj_mask = self.featurize(scenes)
        flat = [flatten_dialogue(d) for d in dialogues]
        dlg_ids, dlg_mask = collate_token_ids(flat, self.vocab.pad_id)
        x_obj, _, sigma, p_goal = oet(o_v, o_g, obj_mask, dlg_ids, dlg_mask)
        return x_obj, sigma, p_goal, (o_v, o_g, obj_mask, dlg_ids, dlg_mask)

    def teacher_logits(self, state: AgentState, groups: Tensor, tgt_in: Tensor) -> Tensor:
        memory = self.qdt.memory(state.memory, groups)
        return self.qdt(tgt_in, memory, state.obj_mask)

    def generate(self, state: AgentState, groups: Tensor) -> list[list[int]]:
        memory = self.qdt.memory(state.memory, groups)
        return self.qdt.generate(memory, state.obj_mask, self.vocab.bos_id, self.vocab.eos_id)


class UniQerAgent(_TransformerCore):
    """One transformer serves both the guesser and the question generator."""

    def __init__(self, config: ModelConfig, space: AttributeSpace):
        super().__init__(config, space)
        self.oet = ObjectEncoderTransformer(config, self.vocab, self.n_positions())

    def encode(self, scenes: Sequence[Scene], dialogues: Sequence[Dialogue]) -> AgentState:
        x_obj, sigma, p_goal, (o_v, _, obj_mask, _, _) = self._encode_with(
            self.oet, scenes, dialogues
        )
        return AgentState(sigma, p_goal, obj_mask, x_obj, o_v, tuple(scenes))


class NotUnifiedAgent(_TransformerCore):
    """Two disjoint transformers: one guesses, one feeds the decoder."""

    def __init__(self, config: ModelConfig, space: AttributeSpace):
        super().__init__(config, space)
        self.oet_guess = ObjectEncoderTransformer(config, self.vocab, self.n_positions())
        self.oet_gen = ObjectEncoderTransformer(config, self.vocab, self.n_positions())

    def encode(self, scenes: Sequence[Scene], dialogues: Sequence[Dialogue]) -> AgentState:
        _, sigma, p_goal, (o_v, _, obj_mask, _, _) = self._encode_with(
            self.oet_guess, scenes, dialogues
        )
        x_obj, _, _, _ = self._encode_with(self.oet_gen, scenes, dialogues)
        return AgentState(sigma, p_goal, obj_mask, x_obj, o_v, tuple(scenes))

    def guesser_parameters(self) -> list[nn.Parameter]:
        return list(self.oet_guess.parameters())

    def qgen_parameters(self) -> list[nn.Parameter]:
        return list(self.oet_gen.parameters()) + list(self.qdt.parameters())


class NotUnifiedMlpGuesserAgent(_TransformerCore):
    """Transformer question generator with a recurrent-MLP guesser outside it."""

    def __init__(self, config: ModelConfig, space: AttributeSpace):
        super().__init__(config, space)
        self.oet = ObjectEncoderTransformer(config, self.vocab, self.n_positions())
        self.guesser = RecurrentGuesser(config, self.vocab)

    def encode(self, scenes: Sequence[Scene], dialogues: Sequence[Dialogue]) -> AgentState:
        x_obj, _, _, (o_v, o_g, obj_mask, dlg_ids, dlg_mask) = self._encode_with(
            self.oet, scenes, dialogues
        )
        sigma, p_goal = self.guesser(o_v, o_g, obj_mask, dlg_ids, dlg_mask)
        return AgentState(sigma, p_goal, obj_mask, x_obj, o_v, tuple(scenes))

    def guesser_parameters(self) -> list[nn.Parameter]:
        return list(self.guesser.parameters())

    def qgen_parameters(self) -> list[nn.Parameter]:
        return list(self.oet.parameters()) + list(self.qdt.parameters())


class VanillaAgent(QuestionerAgent):
    """Pre-transformer wiring: a bidirectional GRU encodes the objects for
    an LSTM decoder, and a recurrent-MLP guesser works from raw features."""

    def __init__(self, config: ModelConfig, space: AttributeSpace):
        super().__init__(config, space)
        self.otm = ObjectTargetingModule(config)
        d = config.d_model
        obj_in = config.d_v + 5 * config.n_max
        self.obj_proj = nn.Linear(obj_in, d)
        self.obj_gru = nn.GRU(d, d // 2, bidirectional=True, batch_first=True)
        self.group_emb = nn.Embedding(3, d)
        self.guesser = RecurrentGuesser(config, self.vocab)
        self.dec_emb = nn.Embedding(len(self.vocab), d, padding_idx=self.vocab.pad_id)
        self.dec_init = nn.Linear(d, d)
        self.dec_lstm = nn.LSTM(d, d, batch_first=True)
        self.dec_out = nn.Linear(d, len(self.vocab))

    def encode(self, scenes: Sequence[Scene], dialogues: Sequence[Dialogue]) -> AgentState:
        o_v, o_g, obj_mask = self.featurize(scenes)
        x = torch.relu(self.obj_proj(torch.cat([o_v, o_g], -1)))
        enc, _ = self.obj_gru(x)
        flat = [flatten_dialogue(d) for d in dialogues]
        ids, mask = collate_token_ids(flat, self.vocab.pad_id)
        sigma, p_goal = self.guesser(o_v, o_g, obj_mask, ids, mask)
        return AgentState(sigma, p_goal, obj_mask, enc, o_v, tuple(scenes))

    def _decoder_start(self, state: AgentState, groups: Tensor) -> tuple[Tensor, Tensor]:
        memory = state.memory + self.group_emb(groups)
        pooled = (memory * state.obj_mask.unsqueeze(-1)).sum(1)
        pooled = pooled / state.obj_mask.sum(1, keepdim=True).clamp(min=1)
        h0 = torch.tanh(self.dec_init(pooled)).unsqueeze(0)
        return h0, torch.zeros_like(h0)

    def teacher_logits(self, state: AgentState, groups: Tensor, tgt_in: Tensor) -> Tensor:
        h0c0 = self._decoder_start(state, groups)
        out, _ = self.dec_lstm(self.dec_emb(tgt_in), h0c0)
        return self.dec_out(out)

    @torch.no_grad()
    def generate(self, state: AgentState, groups: Tensor) -> list[list[int]]:
        b = state.memory.shape[0]
        h, c = self._decoder_start(state, groups)
        tok = torch.full((b,), self.vocab.bos_id, dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        rows: list[list[int]] = [[] for _ in range(b)]
        for _ in range(self.config.max_decode_len):
            out, (h, c) = self.dec_lstm(self.dec_emb(tok).unsqueeze(1), (h, c))
            tok = self.dec_out(out[:, 0]).argmax(-1)
            for i in range(b):
                if not done[i]:
                    if int(tok[i]) == self.vocab.eos_id:
                        done[i] = True
                    else:
                        rows[i].append(int(tok[i]))
            if bool(done.all()):
                break
        return rows

    def guesser_parameters(self) -> list[nn.Parameter]:
        return list(self.guesser.parameters())

    def qgen_parameters(self) -> list[nn.Parameter]:
        mods = [self.obj_proj, self.obj_gru, self.group_emb, self.dec_emb, self.dec_init, self.dec_lstm, self.dec_out]
        return [p for m in mods for p in m.parameters()]


def build_variant(config: ModelConfig, space: AttributeSpace) -> QuestionerAgent:
    """Construct an agent with deterministic initial weights."""
    torch.manual_seed(config.seed)
    if config.variant == "uniqer":
        return UniQerAgent(config, space)
    if config.variant == "not_unified":
        return NotUnifiedAgent(config, space)
    if config.variant == "not_unified_mlp_guesser":
        return NotUnifiedMlpGuesserAgent(config, space)
    if config.variant == "vanilla":
        return VanillaAgent(config, space)
    if config.variant == "baseline":
        from .baseline import BaselineAgent  # avoids a module cycle

        return BaselineAgent(config, space)
    raise ValueError(f"unknown variant {config.variant!r}")


def space_to_json(space: AttributeSpace) -> dict:
    return {
        "shapes": list(space.shapes),
        "colors": list(space.colors),
        "sizes": list(space.sizes),
        "materials": list(space.materials),
        "active": list(space.active),
    }


def space_from_json(data: dict) -> AttributeSpace:
    return AttributeSpace(
        shapes=tuple(data["shapes"]),
        colors=tuple(data["colors"]),
        sizes=tuple(data["sizes"]),
        materials=tuple(data["materials"]),
        active=tuple(data["active"]),
    )


def save_checkpoint(
    agent: QuestionerAgent,
    path: Path | str,
    stage: str,
    metrics: dict | None = None,
    extra: dict | None = None,
) -> Path:
    """Weight blob at ``path`` plus a JSON manifest sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "state_dict": agent.state_dict(),
        "config": agent.config.to_json(),
        "space": space_to_json(agent.space),
    }
    if extra:
        blob["extra"] = extra
    torch.save(blob, path)
    manifest = {
        "config": agent.config.to_json(),
        "space": space_to_json(agent.space),
        "variant": agent.variant,
        "vocabulary_sha256": agent.vocab.digest(),
        "stage": stage,
        "seed": agent.config.seed,
        "metrics": metrics or {},
    }
    manifest_path = path.with_suffix(path.suffix + ".json")
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_checkpoint(path: Path | str) -> tuple[QuestionerAgent, dict]:
    """Rebuild the agent from the blob; returns (agent, manifest)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig.from_json(blob["config"])
    space = space_from_json(blob["space"])
    agent = build_variant(config, space)
    agent.load_state_dict(blob["state_dict"])
    agent.eval()
    manifest_path = path.with_suffix(path.suffix + ".json")
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    if manifest:
        expected = agent.vocab.digest()
        if manifest.get("vocabulary_sha256") not in (None, expected):
            raise ValueError(f"checkpoint {path} was trained with a different vocabulary")
    return agent, manifest
