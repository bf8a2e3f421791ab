"""Four-part recurrent comparison agent: QAE, DSE, QGen, and a guesser.

A question-answer encoder (QAE) summarizes each completed (question,
answer) pair, a dialogue state encoder (DSE) folds those summaries into
a running state, the guesser scores objects against that state, and an
LSTM language model (QGen) emits the next question conditioned on the
dialogue state, a scene summary, and top-k object features.  Unlike the
transformer agents there is no targeting module: the dialogue ends when
QGen emits [EOD], which doubles as the submission move.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .model import (
    AgentState,
    Dialogue,
    ModelConfig,
    QuestionerAgent,
    collate_token_ids,
    masked_goal_softmax,
    top_k_select,
)
from .scenes import AttributeSpace, Scene


@dataclass(frozen=True)
class BaselineConfig:
    qae_hidden: int
    dse_hidden: int
    qgen_hidden: int
    k: int
    t_max: int
    max_decode_len: int
    seed: int

    def __post_init__(self) -> None:
        if min(self.qae_hidden, self.dse_hidden, self.qgen_hidden) <= 0:
            raise ValueError("hidden sizes must be positive")

    @classmethod
    def from_model_config(cls, config: ModelConfig) -> "BaselineConfig":
        return cls(
            qae_hidden=config.d_model,
            dse_hidden=config.d_model,
            qgen_hidden=config.d_model,
            k=config.k,
            t_max=config.t_max,
            max_decode_len=config.max_decode_len,
            seed=config.seed,
        )


class BaselineAgent(QuestionerAgent):
    """Same surface as the transformer agents, recurrent inside."""

    def __init__(self, config: ModelConfig, space: AttributeSpace):
        super().__init__(config, space)
        self.baseline_config = BaselineConfig.from_model_config(config)
        bc = self.baseline_config
        v = len(self.vocab)
        obj_in = config.d_v + 5 * config.n_max

        self.qae_emb = nn.Embedding(v, bc.qae_hidden, padding_idx=self.vocab.pad_id)
        self.qae_lstm = nn.LSTM(bc.qae_hidden, bc.qae_hidden, batch_first=True)
        self.dse_lstm = nn.LSTM(bc.qae_hidden, bc.dse_hidden, batch_first=True)

        self.guess_obj = nn.Linear(obj_in, bc.dse_hidden)
        self.guess_dlg = nn.Linear(bc.dse_hidden, bc.dse_hidden)

        cond_in = bc.dse_hidden + config.d_v + bc.k * (config.d_v + 1)
        self.qgen_emb = nn.Embedding(v, bc.qgen_hidden, padding_idx=self.vocab.pad_id)
        self.qgen_init = nn.Linear(cond_in, bc.qgen_hidden)
        self.qgen_lstm = nn.LSTM(bc.qgen_hidden, bc.qgen_hidden, batch_first=True)
        self.qgen_out = nn.Linear(bc.qgen_hidden, v)

    # ---- encoding -------------------------------------------------

    def qae_encode(self, q_ids: Sequence[int], answer_id: int) -> Tensor:
        """Vector for one (question, answer) pair; exposed for tests."""
        ids = torch.tensor([list(q_ids) + [answer_id]], dtype=torch.long)
        out, _ = self.qae_lstm(self.qae_emb(ids))
        return out[0, -1]

    def _qa_vectors(self, dialogues: Sequence[Dialogue]) -> Tensor:
        """DSE input (B, max_pairs, d); absent pairs are zero rows."""
        b = len(dialogues)
        max_pairs = max((len(d) for d in dialogues), default=0)
        out = torch.zeros(b, max_pairs, self.baseline_config.qae_hidden)
        flat: list[list[int]] = []
        where: list[tuple[int, int]] = []
        for i, dialogue in enumerate(dialogues):
            for p, (q_ids, a_id) in enumerate(dialogue):
                flat.append(list(q_ids) + [a_id])
                where.append((i, p))
        if flat:
            ids, mask = collate_token_ids(flat, self.vocab.pad_id)
            h, _ = self.qae_lstm(self.qae_emb(ids))
            last = h[torch.arange(len(flat)), mask.sum(1) - 1]
            for row, (i, p) in enumerate(where):
                out[i, p] = last[row]
        return out

    def dialogue_state(self, dialogues: Sequence[Dialogue]) -> Tensor:
        """X_D: final DSE state per game; zeros before the first pair."""
        qa = self._qa_vectors(dialogues)
        b = len(dialogues)
        state = torch.zeros(b, self.baseline_config.dse_hidden)
        if qa.shape[1] == 0:
            return state
        out, _ = self.dse_lstm(qa)
        lengths = torch.tensor([len(d) for d in dialogues])
        idx = (lengths - 1).clamp(min=0)
        picked = out[torch.arange(b), idx]
        return torch.where((lengths > 0).unsqueeze(1), picked, state)

    def encode(self, scenes: Sequence[Scene], dialogues: Sequence[Dialogue]) -> AgentState:
        o_v, o_g, obj_mask = self.featurize(scenes)
        x_d = self.dialogue_state(dialogues)
        scores = (
            self.guess_obj(torch.cat([o_v, o_g], -1)) * self.guess_dlg(x_d).unsqueeze(1)
        ).sum(-1)
        sigma = torch.sigmoid(scores) * obj_mask
        p_goal = masked_goal_softmax(sigma, obj_mask)
        cond = self._conditioning(o_v, obj_mask, x_d, p_goal, scenes)
        return AgentState(
            sigma, p_goal, obj_mask, memory=o_v, o_v=o_v, scenes=tuple(scenes),
            extras={"cond": cond},
        )

    def _conditioning(
        self,
        o_v: Tensor,
        obj_mask: Tensor,
        x_d: Tensor,
        p_goal: Tensor,
        scenes: Sequence[Scene],
    ) -> Tensor:
        """[X_D, mean object feature, top-k (feature, probability) rows].

        Detached so the generation loss trains QGen alone; the encoders
        learn from the object-prediction loss only.
        """
        ctx = (o_v * obj_mask.unsqueeze(-1)).sum(1) / obj_mask.sum(1, keepdim=True).clamp(min=1)
        k = self.baseline_config.k
        p_np = p_goal.detach().cpu().numpy()
        rows = torch.zeros(len(scenes), k, self.config.d_v + 1)
        for i, scene in enumerate(scenes):
            for row, obj_id in enumerate(top_k_select(p_np[i], k, len(scene))):
                rows[i, row, : self.config.d_v] = o_v[i, obj_id]
                rows[i, row, -1] = float(p_np[i][obj_id])
        return torch.cat([x_d.detach(), ctx, rows.flatten(1)], dim=-1)

    # ---- generation -----------------------------------------------

    def qgen_start(self, state: AgentState) -> tuple[Tensor, Tensor]:
        h0 = torch.tanh(self.qgen_init(state.extras["cond"])).unsqueeze(0)
        return h0, torch.zeros_like(h0)

    def qgen_step(
        self, tokens: Tensor, hc: tuple[Tensor, Tensor]
    ) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        """One LM step; ``tokens`` is (B,) of previous token ids."""
        out, hc = self.qgen_lstm(self.qgen_emb(tokens).unsqueeze(1), hc)
        return self.qgen_out(out[:, 0]), hc

    def teacher_logits(self, state: AgentState, groups: Tensor, tgt_in: Tensor) -> Tensor:
        # groups are ignored: this agent has no targeting conditioning
        hc = self.qgen_start(state)
        out, _ = self.qgen_lstm(self.qgen_emb(tgt_in), hc)
        return self.qgen_out(out)

    @torch.no_grad()
    def generate(self, state: AgentState, groups: Tensor) -> list[list[int]]:
        b = state.p_goal.shape[0]
        hc = self.qgen_start(state)
        tok = torch.full((b,), self.vocab.bos_id, dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        rows: list[list[int]] = [[] for _ in range(b)]
        for _ in range(self.config.max_decode_len):
            logits, hc = self.qgen_step(tok, hc)
            tok = logits.argmax(-1)
            for i in range(b):
                if not done[i]:
                    t = int(tok[i])
                    if t in (self.vocab.eos_id, self.vocab.eod_id):
                        done[i] = True
                    else:
                        rows[i].append(t)
            if bool(done.all()):
                break
        return rows

    # ---- parameter groups -----------------------------------------

    def qgen_parameters(self) -> list[nn.Parameter]:
        mods = [self.qgen_emb, self.qgen_init, self.qgen_lstm, self.qgen_out]
        return [p for m in mods for p in m.parameters()]

    def rl_parameters(self) -> list[nn.Parameter]:
        """Per-token policy training touches the language model only."""
        return self.qgen_parameters()

    def otm_logits(self, state: AgentState):
        raise NotImplementedError("the recurrent comparison agent has no targeting module")
