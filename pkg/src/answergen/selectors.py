"""Word-source selection and fact selection.

Every emitted answer word is attributed to one of four sources: copy from
the question, copy from the passage, the output vocabulary, or a knowledge
fact whose object is injected verbatim. The 4-way choice and the
which-fact choice are discrete latent variables; sampling them with Gumbel
noise and relaxing the argmax to a temperature softmax keeps the whole
objective differentiable.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    DegenerateDistributionError,
    EmptyFactSetError,
    InvalidScheduleError,
    InvalidSourceError,
)
from .knowledge import Fact
from .seq2seq import _uniform
from .text import Vocabulary

PROB_FLOOR = 1e-12
MASK_LOGIT = -1e30  # additive pre-softmax mask; exact zero after normalization


class Source(enum.IntEnum):
    QUESTION = 1
    PASSAGE = 2
    VOCAB = 3
    KNOWLEDGE = 4


@dataclass
class SelectorParams:
    w_vocab: Tensor       # (5H, |V|)
    b_vocab: Tensor       # (|V|,)
    w_source: Tensor      # (5H + emb, 4)
    b_source: Tensor      # (4,)
    relation_table: Tensor  # (n_relations, emb)
    w_fact_embed: Tensor  # (3*emb, fact_dim)
    b_fact_embed: Tensor  # (fact_dim,)
    w_fact: Tensor        # (fact_dim, A)
    u_fact: Tensor        # (A, H)
    b_fact: Tensor        # (A,)
    gate_fact: Tensor     # (A,)

    @classmethod
    def init(cls, rng, vocab_size: int, n_relations: int, emb_dim: int,
             hidden_dim: int, fact_dim: int, attn_dim: int) -> "SelectorParams":
        feat = 5 * hidden_dim  # c_q (2H) + c_p (2H) + s (H)
        return cls(
            w_vocab=_uniform(rng, (feat, vocab_size), "sel.w_vocab"),
            b_vocab=_uniform(rng, (vocab_size,), "sel.b_vocab"),
            w_source=_uniform(rng, (feat + emb_dim, 4), "sel.w_source"),
            b_source=_uniform(rng, (4,), "sel.b_source"),
            relation_table=_uniform(rng, (max(n_relations, 1), emb_dim), "sel.relations"),
            w_fact_embed=_uniform(rng, (3 * emb_dim, fact_dim), "sel.w_fact_embed"),
            b_fact_embed=_uniform(rng, (fact_dim,), "sel.b_fact_embed"),
            w_fact=_uniform(rng, (fact_dim, attn_dim), "sel.w_fact"),
            u_fact=_uniform(rng, (attn_dim, hidden_dim), "sel.u_fact"),
            b_fact=_uniform(rng, (attn_dim,), "sel.b_fact"),
            gate_fact=_uniform(rng, (attn_dim,), "sel.gate_fact"),
        )


def vocab_distribution(c_q: Tensor, c_p: Tensor, s_t: Tensor,
                       params: SelectorParams) -> Tensor:
    """softmax(W [c_q, c_p, s] + b) over the full vocabulary, specials included."""
    feats = ad.concat([c_q, c_p, s_t])
    return ad.softmax(ad.add(ad.matmul(feats, params.w_vocab), params.b_vocab))


def source_distribution(c_q: Tensor, c_p: Tensor, s_t: Tensor, x_t: Tensor,
                        params: SelectorParams, knowledge_available: bool = True) -> Tensor:
    """4-simplex over sources; x_t is the decoder-input word embedding.

    With no related facts the knowledge entry is masked to exactly zero and
    the rest renormalize, which the additive pre-softmax mask does in one go.
    """
    feats = ad.concat([c_q, c_p, s_t, x_t])
    logits = ad.add(ad.matmul(feats, params.w_source), params.b_source)
    if not knowledge_available:
        logits = ad.add(logits, ad.constant([0.0, 0.0, 0.0, MASK_LOGIT]))
    return ad.softmax(logits)


def _pooled_embedding(tokens: Sequence[str], embeddings: Tensor,
                      vocab: Vocabulary) -> Tensor:
    ids = [vocab.encode(t) for t in tokens]
    rows = ad.lookup(embeddings, ids)
    return ad.mul(ad.sum(rows, axis=0), ad.constant(1.0 / len(ids)))


def embed_fact(fact: Fact, embeddings: Tensor, vocab: Vocabulary,
               params: SelectorParams) -> Tensor:
    """W [e_subject, e_relation, e_object] + b with average pooling for
    multi-word subjects/objects; OOV words hit the UNK row."""
    e_s = _pooled_embedding(fact.subject, embeddings, vocab)
    e_r = ad.lookup(params.relation_table, fact.relation)
    e_o = _pooled_embedding(fact.object, embeddings, vocab)
    feats = ad.concat([e_s, e_r, e_o])
    return ad.add(ad.matmul(feats, params.w_fact_embed), params.b_fact_embed)


def embed_facts(facts: Sequence[Fact], embeddings: Tensor, vocab: Vocabulary,
                params: SelectorParams) -> Tensor:
    """(N_f, fact_dim) matrix of fact representations."""
    if not facts:
        raise EmptyFactSetError("no facts to embed")
    pooled = []
    for fact in facts:
        e_s = _pooled_embedding(fact.subject, embeddings, vocab)
        e_r = ad.lookup(params.relation_table, fact.relation)
        e_o = _pooled_embedding(fact.object, embeddings, vocab)
        pooled.append(ad.concat([e_s, e_r, e_o]))
    feats = ad.stack(pooled)                                   # (N_f, 3*emb)
    return ad.add(ad.matmul(feats, params.w_fact_embed), params.b_fact_embed)


def fact_logits(fact_matrix: Tensor, s_t: Tensor, params: SelectorParams) -> Tensor:
    if fact_matrix.shape[0] == 0:
        raise EmptyFactSetError("fact matrix is empty")
    shift = ad.add(ad.matmul(params.u_fact, s_t), params.b_fact)   # (A,)
    pre = ad.add(ad.matmul(fact_matrix, params.w_fact), shift)     # (N_f, A)
    return ad.matmul(ad.tanh(pre), params.gate_fact)               # (N_f,)


def fact_distribution(fact_matrix: Tensor, s_t: Tensor, params: SelectorParams) -> Tensor:
    """Simplex over the related facts given the decoder state."""
    return ad.softmax(fact_logits(fact_matrix, s_t, params))


# ---------------------------------------------------------------------------
# Gumbel-Softmax machinery.
# ---------------------------------------------------------------------------

@dataclass
class GumbelSample:
    soft: Tensor        # relaxed sample on the simplex; gradients flow here
    hard_index: int     # argmax of soft, distributed by the Gumbel-Max law
    temperature: float


def gumbel_softmax_sample(probs: Tensor, tau: float, rng: np.random.Generator) -> GumbelSample:
    """Draw a relaxed categorical sample: softmax((log pi + g) / tau).

    probs are floored at 1e-12 before the log so masked-out categories stay
    legal; the Gumbel noise g = -log(-log(u)) uses the same floor on u.
    """
    if tau <= 0:
        raise InvalidScheduleError(f"temperature must be > 0, got {tau}")
    if np.all(probs.data < PROB_FLOOR):
        raise DegenerateDistributionError("all probability mass below the floor")
    u = np.clip(rng.random(probs.shape[0]), PROB_FLOOR, 1.0)
    noise = -np.log(-np.log(u))
    logits = ad.log(ad.maximum(probs, ad.constant(PROB_FLOOR)))
    shifted = ad.mul(ad.add(logits, ad.constant(noise)), ad.constant(1.0 / tau))
    soft = ad.softmax(shifted)
    return GumbelSample(soft=soft, hard_index=int(np.argmax(soft.data)), temperature=tau)


def gumbel_hard_indices(probs: np.ndarray, draws: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized hard indices for `draws` samples.

    Consumes the generator stream exactly like `draws` successive calls to
    gumbel_softmax_sample, so the two routes are interchangeable in tests.
    """
    k = probs.shape[0]
    u = np.clip(rng.random((draws, k)), PROB_FLOOR, 1.0)
    noise = -np.log(-np.log(u))
    logits = np.log(np.maximum(probs, PROB_FLOOR))
    return np.argmax(logits + noise, axis=1)


@dataclass
class TemperatureSchedule:
    tau0: float = 1.0
    tau_min: float = 0.1
    rate: float = 1e-4

    def validate(self) -> "TemperatureSchedule":
        if self.tau_min <= 0:
            raise InvalidScheduleError(f"tau_min must be > 0, got {self.tau_min}")
        if self.tau0 < self.tau_min:
            raise InvalidScheduleError("tau0 below tau_min")
        if self.rate < 0:
            raise InvalidScheduleError("negative anneal rate")
        return self


def anneal_temperature(step: int, schedule: TemperatureSchedule) -> float:
    """Exponential decay clamped at tau_min: max(tau_min, tau0 * exp(-rate*step))."""
    schedule.validate()
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return max(schedule.tau_min, schedule.tau0 * float(np.exp(-schedule.rate * step)))


# ---------------------------------------------------------------------------
# Generation-time word distributions (plain numpy; no gradients needed).
# ---------------------------------------------------------------------------

def aggregate_copy_distribution(attention: np.ndarray,
                                tokens: Sequence[str]) -> dict[str, float]:
    """Sum attention mass over identical surface tokens."""
    out: dict[str, float] = {}
    for weight, token in zip(attention, tokens):
        out[token] = out.get(token, 0.0) + float(weight)
    return out


def source_word_distribution(source: Source | int,
                             a_q: np.ndarray, question_tokens: Sequence[str],
                             a_p: np.ndarray, passage_tokens: Sequence[str],
                             vocab_probs: np.ndarray, vocab: Vocabulary,
                             fact_probs: np.ndarray | None = None,
                             facts: Sequence[Fact] | None = None) -> dict[str, float]:
    """Distribution over emittable surface tokens for one chosen source.

    For the knowledge source the mass of each fact lands on the first token
    of its object, which is what starts the verbatim object emission.
    """
    source = int(source)
    if source == Source.QUESTION:
        return aggregate_copy_distribution(a_q, question_tokens)
    if source == Source.PASSAGE:
        return aggregate_copy_distribution(a_p, passage_tokens)
    if source == Source.VOCAB:
        return {vocab.decode(i): float(p) for i, p in enumerate(vocab_probs)}
    if source == Source.KNOWLEDGE:
        if facts is None or fact_probs is None:
            raise EmptyFactSetError("knowledge source selected without facts")
        out: dict[str, float] = {}
        for p, fact in zip(fact_probs, facts):
            first = fact.object[0]
            out[first] = out.get(first, 0.0) + float(p)
        return out
    raise InvalidSourceError(f"source must be 1..4, got {source}")
