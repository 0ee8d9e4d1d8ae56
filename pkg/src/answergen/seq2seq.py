"""Bidirectional LSTM encoders, the decoder cell, and coverage-aware attention.

Attention over encoder states e_i at decoder state s is
    softmax_i( g . tanh(W e_i + U s + b + cov_i * w_cov [+ V c_q]) )
with the V c_q term present only for the passage side, which conditions on
the same-step question context. Coverage is the running sum of past
attention vectors and enters both the logits and the training penalty
sum_i min(a_i, cov_i).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptySequenceError

INIT_SCALE = 0.08  # uniform parameter init range


def _uniform(rng: np.random.Generator, shape, name: str) -> Tensor:
    return Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape),
                  requires_grad=True, name=name)


@dataclass
class LSTMParams:
    """Gate weights packed as rows [input, forget, cell, output]."""
    w_x: Tensor  # (4H, in_dim)
    w_h: Tensor  # (4H, H)
    b: Tensor    # (4H,)

    @classmethod
    def init(cls, rng, in_dim: int, hidden: int, name: str) -> "LSTMParams":
        return cls(
            w_x=_uniform(rng, (4 * hidden, in_dim), f"{name}.w_x"),
            w_h=_uniform(rng, (4 * hidden, hidden), f"{name}.w_h"),
            b=_uniform(rng, (4 * hidden,), f"{name}.b"),
        )

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]


def lstm_step(p: LSTMParams, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One cell update; returns (h', c')."""
    hid = p.hidden
    gates = ad.add(ad.add(ad.matmul(p.w_x, x), ad.matmul(p.w_h, h)), p.b)
    i = ad.sigmoid(ad.slice_(gates, 0, hid))
    f = ad.sigmoid(ad.slice_(gates, hid, 2 * hid))
    g = ad.tanh(ad.slice_(gates, 2 * hid, 3 * hid))
    o = ad.sigmoid(ad.slice_(gates, 3 * hid, 4 * hid))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


@dataclass
class EncoderParams:
    fwd: LSTMParams
    bwd: LSTMParams

    @classmethod
    def init(cls, rng, in_dim: int, hidden: int, name: str) -> "EncoderParams":
        return cls(LSTMParams.init(rng, in_dim, hidden, f"{name}.fwd"),
                   LSTMParams.init(rng, in_dim, hidden, f"{name}.bwd"))


@dataclass
class EncoderOutput:
    states: Tensor   # (N, 2H): forward and backward states concatenated per token
    final_h: Tensor  # (2H,)
    final_c: Tensor  # (2H,)

    @property
    def length(self) -> int:
        return self.states.shape[0]


def encode(ids, embeddings: Tensor, params: EncoderParams) -> EncoderOutput:
    """Run both directions over the token ids and concatenate per position."""
    if len(ids) == 0:
        raise EmptySequenceError("cannot encode an empty sequence")
    hid = params.fwd.hidden
    embs = [ad.lookup(embeddings, int(i)) for i in ids]

    def run(cell: LSTMParams, seq):
        h = ad.constant(np.zeros(hid))
        c = ad.constant(np.zeros(hid))
        states = []
        for x in seq:
            h, c = lstm_step(cell, x, h, c)
            states.append(h)
        return states, h, c

    fwd_states, fwd_h, fwd_c = run(params.fwd, embs)
    bwd_states, bwd_h, bwd_c = run(params.bwd, embs[::-1])
    bwd_states = bwd_states[::-1]
    per_token = [ad.concat([f, b]) for f, b in zip(fwd_states, bwd_states)]
    return EncoderOutput(
        states=ad.stack(per_token),
        final_h=ad.concat([fwd_h, bwd_h]),
        final_c=ad.concat([fwd_c, bwd_c]),
    )


@dataclass
class AttentionParams:
    """Weights are stored in the orientation the row-major matmuls use:
    encoder states are rows, so w_states is (2H, A) rather than (A, 2H)."""
    w_states: Tensor          # (2H, A)
    u_state: Tensor           # (A, H)
    b: Tensor                 # (A,)
    gate: Tensor              # (A,)
    w_cov: Tensor             # (A,) coverage feature weight
    v_context: Tensor | None  # (A, 2H) question-context term, passage side only

    @classmethod
    def init(cls, rng, state_dim: int, dec_dim: int, attn_dim: int, name: str,
             with_context: bool = False) -> "AttentionParams":
        return cls(
            w_states=_uniform(rng, (state_dim, attn_dim), f"{name}.w_states"),
            u_state=_uniform(rng, (attn_dim, dec_dim), f"{name}.u_state"),
            b=_uniform(rng, (attn_dim,), f"{name}.b"),
            gate=_uniform(rng, (attn_dim,), f"{name}.gate"),
            w_cov=_uniform(rng, (attn_dim,), f"{name}.w_cov"),
            v_context=_uniform(rng, (attn_dim, state_dim), f"{name}.v_context")
            if with_context else None,
        )


def attend(states: Tensor, s_t: Tensor, coverage: Tensor, params: AttentionParams,
           context: Tensor | None = None) -> Tensor:
    """Attention simplex over encoder positions."""
    n = states.shape[0]
    pre = ad.matmul(states, params.w_states)                          # (N, A)
    shift = ad.add(ad.matmul(params.u_state, s_t), params.b)          # (A,)
    if context is not None:
        if params.v_context is None:
            raise ValueError("attention has no context projection")
        shift = ad.add(shift, ad.matmul(params.v_context, context))
    pre = ad.add(pre, shift)                                          # broadcast over rows
    cov_col = ad.reshape(coverage, (n, 1))
    pre = ad.add(pre, ad.mul(cov_col, params.w_cov))                  # (N,1)*(A,) -> (N,A)
    logits = ad.matmul(ad.tanh(pre), params.gate)                     # (N,)
    return ad.softmax(logits)


def attend_question(enc_q: "EncoderOutput", s_t: Tensor, coverage: Tensor,
                    params: AttentionParams) -> Tensor:
    return attend(enc_q.states, s_t, coverage, params)


def attend_passage(enc_p: "EncoderOutput", s_t: Tensor, c_q: Tensor,
                   coverage: Tensor, params: AttentionParams) -> Tensor:
    """Passage attention conditions on the same-step question context c_q."""
    return attend(enc_p.states, s_t, coverage, params, context=c_q)


def context_vector(attention: Tensor, states: Tensor) -> Tensor:
    """Convex combination of encoder states, c = sum_i a_i e_i."""
    return ad.matmul(attention, states)


def context_vectors(a_q: Tensor, enc_q: EncoderOutput,
                    a_p: Tensor, enc_p: EncoderOutput) -> tuple[Tensor, Tensor]:
    return context_vector(a_q, enc_q.states), context_vector(a_p, enc_p.states)


def coverage_penalty(attention: Tensor, coverage: Tensor) -> Tensor:
    """Per-step repetition penalty sum_i min(a_i, cov_i)."""
    return ad.sum(ad.minimum(attention, coverage))
