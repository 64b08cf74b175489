# flowscore/model.py

"""
Static pair scoring, flow modulation and the two task heads.

The static score and the modulation vector live in the d-dim hidden space;
a final linear head maps the modulated score to |R| relation logits or to
one logit per candidate entity pair.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import TrainConfig
from .context import REL_EMB, entity_message, init_context_params, propagate
from .errors import ShapeError
from .flow import (
    FlowCondition,
    VectorFieldNet,
    attached_sample,
    cfm_loss,
    coupling_permutation,
    modulation_vector,
    path_point,
    sample_path,
)
from .kg import KnowledgeGraph
from .params import ParameterStore, xavier_uniform
from .sampling import ContextBatch, batch_contexts, sample_context, substream

Scalar = Union[Tensor, float]


# ---------- Scoring pieces ----------

def static_score(inputs: Sequence[Tensor], W1: Tensor, b1: Tensor) -> Tensor:
    """sigmoid(concat(inputs)·W1 + b1), one row per pair."""
    joined = ad.concat(list(inputs), axis=1) if len(inputs) > 1 else inputs[0]
    if joined.shape[1] != W1.shape[0]:
        raise ShapeError("static_score", joined.shape, W1.shape)
    return ad.sigmoid(ad.add(ad.matmul(joined, W1), b1))


def modulate(s: Tensor, v: Tensor) -> Tensor:
    if s.shape != v.shape:
        raise ShapeError("modulate", s.shape, v.shape)
    return ad.mul(s, v)


def relation_logits(s_mod: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    return ad.add(ad.matmul(s_mod, W2), b2)


def predict_relations(logits: Tensor) -> np.ndarray:
    """p(r | h, t) per row."""
    return ad.softmax_rows(logits).data


def entity_logit(s_mod: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """(n, 1) logit per candidate pair."""
    return ad.add(ad.matmul(s_mod, w2), b2)


def candidate_loss(logits: Tensor, candidates: np.ndarray, truths: np.ndarray) -> Tensor:
    """
    Mean cross-entropy of each query's candidate row against the slot that
    holds its ground truth. `logits` and `candidates` are (queries, slots).
    """
    cand = np.asarray(candidates, dtype=np.int64)
    truth = np.asarray(truths, dtype=np.int64).reshape(-1)
    if cand.ndim != 2 or cand.shape != logits.shape or cand.shape[0] != len(truth):
        raise ShapeError("candidate_loss", logits.shape, cand.shape, truth.shape)
    hit = cand == truth[:, None]
    missing = np.flatnonzero(~hit.any(axis=1))
    if len(missing):
        raise ValueError(f"ground truth absent from the candidate set of query {int(missing[0])}")
    return ad.cross_entropy_with_logits(logits, hit.argmax(axis=1))


def total_loss(pred_loss: Scalar, cfm: Optional[Scalar], lam: float, l2_term: Optional[Scalar] = None) -> Tensor:
    """pred + lam * cfm + l2_term."""
    out = ad.constant(pred_loss)
    if cfm is not None and lam:
        out = ad.add(out, ad.scale(ad.constant(cfm, out), lam))
    if l2_term is not None:
        out = ad.add(out, ad.constant(l2_term, out))
    return out


def build_contexts(
    graph: KnowledgeGraph,
    pairs: Iterable[Tuple[int, int]],
    exclusions: Iterable[Iterable[int]],
    hops: int,
    neighbor_samples: int,
    seed: int,
) -> ContextBatch:
    return batch_contexts(
        [
            sample_context(graph, h, t, hops, neighbor_samples, excluded=excl, rng_seed=seed)
            for (h, t), excl in zip(pairs, exclusions)
        ]
    )


@dataclass
class ForwardResult:
    logits: Tensor
    cfm: Optional[Tensor]
    static: Tensor
    modulated: Tensor
    m_head: Tensor
    m_tail: Tensor


class FlowModulatedScorer:
    """Owns every trainable parameter: rel_emb, context.*, score.* and flow.*."""

    def __init__(self, num_relations: int, config: TrainConfig, dtype: type = np.float32) -> None:
        self.num_relations = num_relations
        self.config = config
        self.store = ParameterStore(dtype)
        d = config.context.dim
        self.flow_net: Optional[VectorFieldNet] = (
            VectorFieldNet(self.store, d) if config.flow.enabled else None
        )

    @property
    def task(self) -> str:
        return self.config.task

    @property
    def input_width(self) -> int:
        d = self.config.context.dim
        return 3 * d if self.task == "entity" else 2 * d

    def init(self, seed: Optional[int] = None) -> "FlowModulatedScorer":
        rng = substream(self.config.seed if seed is None else seed, 0x1417)
        d = self.config.context.dim
        init_context_params(self.store, self.num_relations, self.config.context, rng)
        out = self.num_relations if self.task == "relation" else 1
        self.store.add("score.W1", xavier_uniform(rng, self.input_width, d))
        self.store.add("score.b1", np.zeros(d))
        self.store.add("score.W2", xavier_uniform(rng, d, out))
        self.store.add("score.b2", np.zeros(out))
        if self.flow_net is not None:
            self.flow_net.init(rng)
        return self

    # ---------- Shared forward ----------

    def _messages(self, batch: ContextBatch, tape: Tape, seed: int) -> Tuple[Tensor, Tensor]:
        states = propagate(batch, tape, self.store, self.config.context, rng_seed=seed)
        return entity_message(batch, states, "head"), entity_message(batch, states, "tail")

    def _param(self, tape: Tape, name: str) -> Tensor:
        return tape.param(self.store, name)

    def _train_modulation(
        self,
        m_h: Tensor,
        m_t: Tensor,
        tape: Tape,
        rng: np.random.Generator,
        cfm_rows: Optional[np.ndarray],
        rel_rows: Optional[Tensor] = None,
    ) -> Tuple[Optional[Tensor], Optional[Tensor]]:
        """
        One (t, eps) draw per pair, shared by both branches. The CFM term is
        built on the attached messages of rows `cfm_rows` (tails re-paired by
        the coupling), so it trains the context encoder as well as the field.
        """
        if self.flow_net is None:
            return None, None
        sigma = self.config.flow.sigma
        cond = FlowCondition(m_h.data, m_t.data, None if rel_rows is None else rel_rows.data)
        draw = sample_path(cond, sigma, rng)

        rows = np.arange(m_h.shape[0]) if cfm_rows is None else np.asarray(cfm_rows, dtype=np.int64)
        perm = coupling_permutation(m_h.data[rows], m_t.data[rows], self.config.flow.coupling)
        heads = ad.gather_rows(m_h, rows)
        tails = ad.gather_rows(m_t, rows[perm])
        cfm = cfm_loss(attached_sample(heads, tails, draw.t[rows], draw.noise[rows], sigma), self.flow_net, tape)

        v = self.flow_net(draw.t, path_point(m_h, m_t, draw.t, draw.noise, sigma), tape)
        return cfm, v

    def _eval_modulation(self, m_h: Tensor, m_t: Tensor, tape: Tape, seed: int) -> Optional[Tensor]:
        if self.flow_net is None:
            return None
        return modulation_vector(m_h, m_t, self.flow_net, self.config.flow, tape, seed=seed)

    def _score(
        self,
        batch: ContextBatch,
        tape: Tape,
        seed: int,
        rels: Optional[np.ndarray],
        rng: Optional[np.random.Generator],
        cfm_rows: Optional[np.ndarray] = None,
    ) -> ForwardResult:
        m_h, m_t = self._messages(batch, tape, seed)
        inputs = [m_h, m_t]
        rel_rows = None
        if self.task == "entity":
            if rels is None:
                raise ValueError("entity scoring needs the query relation of every pair")
            rel_rows = ad.gather_rows(self._param(tape, REL_EMB), rels)
            inputs.append(rel_rows)
        s = static_score(inputs, self._param(tape, "score.W1"), self._param(tape, "score.b1"))
        if rng is not None:
            cfm, v = self._train_modulation(m_h, m_t, tape, rng, cfm_rows, rel_rows)
        else:
            cfm, v = None, self._eval_modulation(m_h, m_t, tape, seed)
        s_mod = s if v is None else modulate(s, v)
        head = (self._param(tape, "score.W2"), self._param(tape, "score.b2"))
        logits = relation_logits(s_mod, *head) if self.task == "relation" else entity_logit(s_mod, *head)
        return ForwardResult(logits, cfm, s, s_mod, m_h, m_t)

    # ---------- Training ----------

    def forward_relation(self, batch: ContextBatch, tape: Tape, seed: int, rng: np.random.Generator) -> ForwardResult:
        return self._score(batch, tape, seed, None, rng)

    def forward_entity(
        self,
        batch: ContextBatch,
        rels: np.ndarray,
        positive_rows: np.ndarray,
        tape: Tape,
        seed: int,
        rng: np.random.Generator,
    ) -> ForwardResult:
        """The flow is fit on the true pairs only; every pair is modulated."""
        return self._score(batch, tape, seed, np.asarray(rels, dtype=np.int64), rng, cfm_rows=positive_rows)

    def l2_term(self, tape: Tape) -> Tensor:
        return ad.scale(ad.l2_penalty([self._param(tape, n) for n in self.store.names()]), self.config.l2)

    # ---------- Evaluation ----------

    def relation_scores(self, batch: ContextBatch, seed: int = 0) -> np.ndarray:
        """(queries, |R|) logits with inference-time modulation, nothing recorded."""
        return self._score(batch, ad.no_grad(), seed, None, None).logits.data

    def entity_scores(self, batch: ContextBatch, rels: np.ndarray, seed: int = 0) -> np.ndarray:
        """One logit per candidate pair of `batch`."""
        out = self._score(batch, ad.no_grad(), seed, np.asarray(rels, dtype=np.int64), None)
        return out.logits.data[:, 0]

    def trace(self, batch: ContextBatch, rels: Optional[np.ndarray] = None, seed: int = 0) -> Dict[str, np.ndarray]:
        """Static score, modulated score and messages per pair."""
        out = self._score(batch, ad.no_grad(), seed, rels, None)
        return {
            "static": out.static.data,
            "modulated": out.modulated.data,
            "m_head": out.m_head.data,
            "m_tail": out.m_tail.data,
            "logits": out.logits.data,
        }
