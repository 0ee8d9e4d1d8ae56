"""Training: the per-example variational objective, the optimization loop,
and checkpoint serialization.

The per-word log-likelihood lower bound at step t is
    E_{y_t}[ log P(w_{t+1} | y_t) ]
with the expectation either enumerated exactly against P(y_t) or estimated
by Gumbel-Softmax samples whose soft vector mixes the four per-source log
terms (the default single-sample estimator used in training). Per-source
likelihoods of the teacher-forced target are floored at 1e-12 before the
log, so an infeasible source contributes log(1e-12) instead of blowing up
the objective. The coverage penalty is added with weight lambda_cov.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import RunConfig, TrainingConfig
from .errors import (
    CorruptFileError,
    NonFiniteGradientError,
    NonFiniteLossError,
    VersionMismatchError,
)
from .knowledge import Fact
from .model import AnswerModel
from .selectors import (
    PROB_FLOOR,
    TemperatureSchedule,
    anneal_temperature,
    embed_facts,
    fact_distribution,
    gumbel_softmax_sample,
    source_distribution,
    vocab_distribution,
)
from .text import BOS, EOS_TOKEN_SENTINEL, UNK, Example

CHECKPOINT_MAGIC = b"AGCP"
CHECKPOINT_VERSION = 1


@dataclass
class ElboDiagnostics:
    n_tokens: int
    objective: float          # sum_t of the per-step expected log term
    coverage: float           # sum_t of both coverage penalties
    source_counts: np.ndarray  # 4-vector of selected-source tallies
    # per timestep, for external verification of the bound:
    step_source_probs: list[np.ndarray] = field(default_factory=list)
    step_log_likelihoods: list[np.ndarray] = field(default_factory=list)


def teacher_inputs(example: Example) -> tuple[list[int], list[tuple[int, str]]]:
    """Decoder inputs (gold shifted right behind BOS) and (id, surface) targets.

    The closing EOS target gets a sentinel surface string no tokenizer output
    can collide with, so copy and knowledge masks never match it.
    """
    inputs = [BOS] + example.answer_ids[:-1]
    targets = []
    for t, target_id in enumerate(example.answer_ids):
        raw = example.answer_tokens[t] if t < len(example.answer_tokens) else EOS_TOKEN_SENTINEL
        targets.append((target_id, raw))
    return inputs, targets


def elbo_loss(model: AnswerModel, example: Example, facts: Sequence[Fact],
              tau: float, rng: np.random.Generator, *, mode: str = "gumbel",
              mc_samples: int = 1, lambda_cov: float = 1.0,
              knowledge_enabled: bool = True) -> tuple[Tensor, ElboDiagnostics]:
    """Negative lower bound (plus coverage penalty) for one example.

    mode "gumbel" is the training estimator; "exact" enumerates the 4-way
    expectation against P(y) and marginalizes the fact choice; "marginal"
    computes the exact log-marginal likelihood (the quantity the bound
    relaxes), used to verify the Jensen gap.
    """
    if mode not in ("gumbel", "exact", "marginal"):
        raise ValueError(f"unknown elbo mode {mode!r}")
    vocab = model.vocab
    enc_q = model.encode_question(example.question_ids)
    enc_p = model.encode_passage(example.passage_ids)
    knowledge_ok = knowledge_enabled and len(facts) > 0
    fact_matrix = embed_facts(facts, model.embedding, vocab, model.selector) \
        if knowledge_ok else None

    inputs, targets = teacher_inputs(example)
    state = model.initial_state(enc_q, enc_p)
    floor = ad.constant(PROB_FLOOR)
    log_floor = ad.log(floor)
    objective: Tensor | None = None
    cov_total: Tensor | None = None
    source_counts = np.zeros(4)
    step_probs: list[np.ndarray] = []
    step_logs: list[np.ndarray] = []

    for input_id, (target_id, target_raw) in zip(inputs, targets):
        x = model.embed_token(input_id)
        out = model.step(enc_q, enc_p, state, x)
        state = out.state

        p_vocab = vocab_distribution(out.c_q, out.c_p, out.s, model.selector)
        p_source = source_distribution(out.c_q, out.c_p, out.s, x, model.selector,
                                       knowledge_available=knowledge_ok)

        q_mask = np.array([1.0 if tok == target_raw else 0.0
                           for tok in example.question_tokens])
        p_mask = np.array([1.0 if tok == target_raw else 0.0
                           for tok in example.passage_tokens])
        like_q = ad.matmul(ad.constant(q_mask), out.a_q)
        like_p = ad.matmul(ad.constant(p_mask), out.a_p)
        if target_id != UNK:
            like_v = ad.sum(ad.slice_(p_vocab, target_id, target_id + 1))
        else:
            like_v = ad.constant(0.0)  # the vocabulary cannot emit an OOV surface form

        if knowledge_ok:
            p_fact = fact_distribution(fact_matrix, out.s, model.selector)
            k_mask = np.array([1.0 if f.object[0] == target_raw else 0.0 for f in facts])
            if mode == "gumbel":
                z = gumbel_softmax_sample(p_fact, tau, rng)
                fact_weights = z.soft
            else:
                fact_weights = p_fact
            like_k = ad.matmul(ad.constant(k_mask), fact_weights)
            log_k = ad.log(ad.add(like_k, floor))
        else:
            log_k = log_floor

        logs = ad.stack([
            ad.log(ad.add(like_q, floor)),
            ad.log(ad.add(like_p, floor)),
            ad.log(ad.add(like_v, floor)),
            log_k,
        ])
        step_probs.append(p_source.data.copy())
        step_logs.append(logs.data.copy())

        if mode == "gumbel":
            term: Tensor | None = None
            for _ in range(mc_samples):
                y = gumbel_softmax_sample(p_source, tau, rng)
                source_counts[y.hard_index] += 1.0 / mc_samples
                sample_term = ad.matmul(y.soft, logs)
                term = sample_term if term is None else ad.add(term, sample_term)
            term = ad.mul(term, ad.constant(1.0 / mc_samples))
        elif mode == "exact":
            source_counts[int(np.argmax(p_source.data))] += 1.0
            term = ad.matmul(p_source, logs)
        else:  # marginal: log sum_y P(y) * likelihood_y
            source_counts[int(np.argmax(p_source.data))] += 1.0
            likes = ad.stack([like_q, like_p, like_v,
                              like_k if knowledge_ok else ad.constant(0.0)])
            term = ad.log(ad.matmul(p_source, ad.add(likes, floor)))

        objective = term if objective is None else ad.add(objective, term)
        step_cov = ad.add(out.cov_pen_q, out.cov_pen_p)
        cov_total = step_cov if cov_total is None else ad.add(cov_total, step_cov)

    loss = ad.add(ad.mul(objective, ad.constant(-1.0)),
                  ad.mul(cov_total, ad.constant(lambda_cov)))
    if not np.isfinite(loss.data):
        raise NonFiniteLossError("loss is not finite")
    diag = ElboDiagnostics(
        n_tokens=len(targets),
        objective=float(objective.data),
        coverage=float(cov_total.data),
        source_counts=source_counts,
        step_source_probs=step_probs,
        step_log_likelihoods=step_logs,
    )
    return loss, diag


# ---------------------------------------------------------------------------
# Optimization.
# ---------------------------------------------------------------------------

class Adam:
    """Per-parameter adaptive steps; moments keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class StepMetrics:
    step: int
    loss: float
    loss_per_token: float
    tau: float
    grad_norm: float
    source_freqs: list[float]
    skipped: bool = False


@dataclass
class TrainItem:
    example: Example
    facts: list[Fact] = field(default_factory=list)


def train_step(model: AnswerModel, batch: Sequence[TrainItem], optimizer: Adam,
               tau: float, rng: np.random.Generator, cfg: TrainingConfig,
               step: int, knowledge_enabled: bool = True) -> StepMetrics:
    """One gradient step on the mean batch loss; non-finite gradients skip
    the update rather than poisoning the parameters."""
    registry = model.parameters
    counts = np.zeros(4)
    token_total = 0
    with Tape() as tape:
        total: Tensor | None = None
        for item in batch:
            loss, diag = elbo_loss(model, item.example, item.facts, tau, rng,
                                   mode="gumbel", mc_samples=cfg.mc_samples,
                                   lambda_cov=cfg.lambda_cov,
                                   knowledge_enabled=knowledge_enabled)
            counts += diag.source_counts
            token_total += diag.n_tokens
            total = loss if total is None else ad.add(total, loss)
        mean_loss = ad.mul(total, ad.constant(1.0 / len(batch)))

    try:
        gmap = tape.backward(mean_loss, params=registry.values())
    except NonFiniteGradientError:
        return StepMetrics(step=step, loss=float(mean_loss.data),
                           loss_per_token=float(mean_loss.data) * len(batch) / max(1, token_total),
                           tau=tau, grad_norm=float("nan"),
                           source_freqs=(counts / max(1.0, counts.sum())).tolist(),
                           skipped=True)

    grads = {name: gmap[tensor] for name, tensor in registry.items()}
    norm = clip_global_norm(grads, cfg.clip_norm)
    optimizer.step(grads)
    return StepMetrics(
        step=step,
        loss=float(mean_loss.data),
        loss_per_token=float(total.data) / max(1, token_total),
        tau=tau,
        grad_norm=norm,
        source_freqs=(counts / max(1.0, counts.sum())).tolist(),
    )


def _batches(n_items: int, batch_size: int, shuffle_rng: np.random.Generator):
    """Endless shuffled batch index stream, reshuffled each epoch."""
    while True:
        order = shuffle_rng.permutation(n_items)
        for start in range(0, n_items, batch_size):
            chunk = order[start:start + batch_size]
            if len(chunk) > 0:
                yield chunk


def train(model: AnswerModel, dataset: Sequence[TrainItem], cfg: TrainingConfig,
          knowledge_enabled: bool = True, metrics_path=None,
          progress_every: int = 0) -> list[StepMetrics]:
    """Run cfg.max_steps optimization steps; returns the metric history."""
    seq = np.random.SeedSequence(cfg.seed)
    shuffle_seed, sample_seed = seq.spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    sample_rng = np.random.default_rng(sample_seed)
    schedule = TemperatureSchedule(cfg.tau0, cfg.tau_min, cfg.anneal_rate).validate()
    optimizer = Adam(model.parameters, lr=cfg.lr)
    batch_stream = _batches(len(dataset), cfg.batch_size, shuffle_rng)
    history: list[StepMetrics] = []
    skipped = 0

    sink = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        for step in range(cfg.max_steps):
            tau = anneal_temperature(step, schedule)
            batch = [dataset[i] for i in next(batch_stream)]
            metrics = train_step(model, batch, optimizer, tau, sample_rng, cfg,
                                 step, knowledge_enabled=knowledge_enabled)
            skipped += int(metrics.skipped)
            history.append(metrics)
            if sink is not None:
                sink.write(json.dumps({
                    "step": metrics.step, "loss": metrics.loss,
                    "loss_per_token": metrics.loss_per_token,
                    "source_freqs": metrics.source_freqs,
                    "tau": metrics.tau, "skipped": skipped,
                }) + "\n")
            if progress_every and (step + 1) % progress_every == 0:
                recent = [m.loss for m in history[-progress_every:]]
                print(f"step {step + 1}/{cfg.max_steps} "
                      f"loss {np.mean(recent):.4f} tau {tau:.3f}")
    finally:
        if sink is not None:
            sink.close()
    return history


# ---------------------------------------------------------------------------
# Checkpoints: a little-endian binary container with a trailing checksum.
# ---------------------------------------------------------------------------

@dataclass
class CheckpointData:
    step: int
    vocab_hash: int
    config: dict
    tensors: dict[str, np.ndarray]


def _checksum(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=8).digest()


def save_checkpoint(model: AnswerModel, step: int, config: RunConfig, path) -> None:
    config_bytes = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<IQQ", CHECKPOINT_VERSION, step, model.vocab.content_hash()),
             struct.pack("<I", len(config_bytes)), config_bytes,
             struct.pack("<I", len(model.parameters))]
    for name, tensor in model.parameters.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(_checksum(blob))


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise CorruptFileError("checkpoint too short")
    body, declared = blob[:-8], blob[-8:]
    if _checksum(body) != declared:
        raise CorruptFileError("checkpoint checksum mismatch")
    if body[:4] != CHECKPOINT_MAGIC:
        raise CorruptFileError("not a checkpoint file")
    offset = 4
    version, step, vocab_hash = struct.unpack_from("<IQQ", body, offset)
    offset += struct.calcsize("<IQQ")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (config_len,) = struct.unpack_from("<I", body, offset)
    offset += 4
    config = json.loads(body[offset:offset + config_len].decode("utf-8"))
    offset += config_len
    (n_tensors,) = struct.unpack_from("<I", body, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", body, offset)
        offset += 2
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", body, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}Q", body, offset)
        offset += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        tensors[name] = data.astype(np.float64)
    if offset != len(body):
        raise CorruptFileError("trailing bytes in checkpoint")
    return CheckpointData(step=step, vocab_hash=vocab_hash, config=config, tensors=tensors)


def restore_model(model: AnswerModel, ckpt: CheckpointData) -> None:
    """Copy checkpoint tensors into the model, validating identity."""
    if ckpt.vocab_hash != model.vocab.content_hash():
        raise VersionMismatchError("checkpoint was trained with a different vocabulary")
    registry = model.parameters
    if set(ckpt.tensors) != set(registry):
        missing = set(registry) - set(ckpt.tensors)
        extra = set(ckpt.tensors) - set(registry)
        raise VersionMismatchError(f"parameter names differ (missing {missing}, extra {extra})")
    for name, arr in ckpt.tensors.items():
        if registry[name].data.shape != arr.shape:
            raise VersionMismatchError(f"shape of {name} differs")
        registry[name].data[:] = arr
