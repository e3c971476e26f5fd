"""A tabular softmax policy for checking and exercising the dual-stage objective.

Task: each sample owns ``seq_len`` draft states with one target token each.
A draft emits one token per state; its reward is the fraction of targets
hit. Revisions re-emit the sequence from a separate block of feedback
states (or the draft states themselves with ``shared_revision_states``).
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.special import log_softmax

from dcrkit.core import DcrError, EngineConfig, ValidationError
from dcrkit.grpo import kernels
from dcrkit.grpo.objective import (
    TokenSequence,
    clipped_surrogate,
    dual_stage_loss,
    group_advantages,
    select_parents,
)
from dcrkit.seeding import derive_rng


class ShapeMismatch(DcrError, ValueError):
    pass


class IndexOutOfRange(DcrError, IndexError):
    pass


@dataclass
class ToyPolicy:
    logits: np.ndarray

    def __post_init__(self) -> None:
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or 0 in self.logits.shape:
            raise ValidationError("logits must be a non-empty 2-D array")
        if not np.all(np.isfinite(self.logits)):
            raise ValidationError("logits must be finite")

    @classmethod
    def uniform(cls, num_states: int, vocab_size: int) -> "ToyPolicy":
        return cls(np.zeros((num_states, vocab_size)))

    @property
    def num_states(self) -> int:
        return self.logits.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[1]

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)


def toy_logprob(policy: ToyPolicy, state: int, token: int) -> float:
    if not (0 <= state < policy.num_states and 0 <= token < policy.vocab_size):
        raise IndexOutOfRange(f"state {state} / token {token} outside {policy.logits.shape}")
    return float(log_softmax(policy.logits[state])[token])


@dataclass
class ToySequence:
    states: np.ndarray
    tokens: np.ndarray
    old_logps: np.ndarray
    ref_logps: np.ndarray
    advantage: float
    reward: float


@dataclass
class ToyGroup:
    """One sample's rollout: G drafts and, per parent, M revisions."""

    sample: int
    drafts: list[ToySequence]
    parents: list[int]
    revisions: list[list[ToySequence]]


@dataclass
class ToyBatch:
    groups: list[ToyGroup]


@dataclass
class ToyConfig:
    num_samples: int = 4
    seq_len: int = 3
    vocab: int = 5
    G: int = 8
    K: int = 2
    M: int = 4
    lam: float = 0.5
    clip_epsilon: float = 0.2
    kl_beta: float = 0.02
    adv_epsilon: float = 1e-4
    lr: float = 2.0
    iterations: int = 500
    epochs: int = 1
    shared_revision_states: bool = False

    @classmethod
    def from_engine(cls, cfg: EngineConfig, **overrides: Any) -> "ToyConfig":
        base = {
            "G": cfg.G, "K": cfg.K, "M": cfg.M, "lam": cfg.lam,
            "clip_epsilon": cfg.clip_epsilon, "kl_beta": cfg.kl_beta, "adv_epsilon": cfg.adv_epsilon,
        }
        merged = {**base, **cfg.toy, **overrides}
        unknown = set(merged) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValidationError(f"unknown toy keys: {sorted(unknown)}")
        return cls(**merged)

    @property
    def num_states(self) -> int:
        blocks = 1 if self.shared_revision_states else 2
        return blocks * self.num_samples * self.seq_len

    def draft_states(self, sample: int) -> np.ndarray:
        return np.arange(sample * self.seq_len, (sample + 1) * self.seq_len, dtype=np.int64)

    def revision_states(self, sample: int) -> np.ndarray:
        offset = 0 if self.shared_revision_states else self.num_samples * self.seq_len
        return self.draft_states(sample) + offset


# -- loss and gradient ------------------------------------------------------


def toy_dual_stage_loss(policy: ToyPolicy, batch: ToyBatch, cfg: ToyConfig) -> float:
    """Batch loss: mean over samples of the dual-stage loss.

    Evaluated through the scalar ``clipped_surrogate``/``dual_stage_loss``
    route; this is the function finite differences are taken of.
    """
    lp = policy.log_probs()

    def seq_loss(seq: ToySequence) -> float:
        ts = TokenSequence(lp[seq.states, seq.tokens], seq.old_logps, seq.ref_logps)
        return clipped_surrogate(ts, seq.advantage, cfg.clip_epsilon, cfg.kl_beta)

    per_sample = [
        dual_stage_loss([seq_loss(s) for s in g.drafts], [[seq_loss(s) for s in r] for r in g.revisions], cfg.lam)
        for g in batch.groups
    ]
    return float(np.mean(per_sample))


def _token_coefs(new: np.ndarray, seq: ToySequence, cfg: ToyConfig, weight: float) -> np.ndarray:
    """d(loss)/d(new log-prob) per token, times the sequence's weight."""
    ratio = np.exp(new - seq.old_logps)
    a = seq.advantage
    unclipped = ratio * a
    clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * a
    d_surr = np.where(unclipped <= clipped, unclipped, 0.0)
    d_kl = -np.expm1(seq.ref_logps - new) if cfg.kl_beta > 0 else 0.0
    return weight * (-d_surr + cfg.kl_beta * d_kl) / len(new)


def toy_dual_stage_grad(policy: ToyPolicy, batch: ToyBatch, cfg: ToyConfig) -> np.ndarray:
    """Analytic gradient of :func:`toy_dual_stage_loss` w.r.t. every logit."""
    if policy.num_states < cfg.num_states or policy.vocab_size != cfg.vocab:
        raise ShapeMismatch(f"policy {policy.logits.shape} does not fit the toy config")
    states, tokens, coefs = [], [], []
    w_sample = 1.0 / len(batch.groups)
    for g in batch.groups:
        weighted = [(s, w_sample * (1.0 - cfg.lam) / len(g.drafts)) for s in g.drafts]
        for revs in g.revisions:
            weighted += [(s, w_sample * cfg.lam / (len(g.revisions) * len(revs))) for s in revs]
        for seq, w in weighted:
            if w == 0.0:
                continue
            new = kernels.gather_logprobs(policy.logits, seq.states, seq.tokens)
            states.append(seq.states)
            tokens.append(seq.tokens)
            coefs.append(_token_coefs(new, seq, cfg, w))
    if not states:
        return np.zeros_like(policy.logits)
    return kernels.scatter_token_grad(
        policy.logits, np.concatenate(states), np.concatenate(tokens), np.concatenate(coefs).astype(np.float64)
    )


def finite_difference_grad(policy: ToyPolicy, batch: ToyBatch, cfg: ToyConfig, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(policy.logits)
    for idx in np.ndindex(*policy.logits.shape):
        up = policy.logits.copy()
        up[idx] += h
        down = policy.logits.copy()
        down[idx] -= h
        grad[idx] = (toy_dual_stage_loss(ToyPolicy(up), batch, cfg) - toy_dual_stage_loss(ToyPolicy(down), batch, cfg)) / (2 * h)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a-b| / max(|a|, |b|), skipping entries below ``floor``."""
    scale = np.maximum(np.abs(a), np.abs(b))
    mask = scale > floor
    if not mask.any():
        return float(np.max(np.abs(a - b)))
    return float(np.max(np.abs(a - b)[mask] / scale[mask]))


# -- rollouts ---------------------------------------------------------------


def _fraction_correct(tokens: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(tokens == targets))


def _emit(
    policy: ToyPolicy, states: np.ndarray, n: int, rng: np.random.Generator
) -> list[np.ndarray]:
    tiled = np.tile(states, n)
    toks = kernels.sample_tokens(policy.logits, tiled, rng.random(len(tiled)))
    return np.split(np.asarray(toks, dtype=np.int64), n)


def collect_batch(
    policy: ToyPolicy,
    ref: ToyPolicy,
    targets: np.ndarray,
    cfg: ToyConfig,
    rng: np.random.Generator,
    reward_shift: float = 0.0,
) -> ToyBatch:
    """Sample drafts, pick parents, sample revisions; attach advantages."""
    lp_old = policy.log_probs()
    lp_ref = ref.log_probs()
    groups = []
    for i in range(cfg.num_samples):
        d_states = cfg.draft_states(i)
        drafts = _emit(policy, d_states, cfg.G, rng)
        d_rewards = [_fraction_correct(t, targets[i]) + reward_shift for t in drafts]
        d_adv = group_advantages(d_rewards, cfg.adv_epsilon).values
        draft_seqs = [
            ToySequence(d_states, t, lp_old[d_states, t], lp_ref[d_states, t], a, r)
            for t, a, r in zip(drafts, d_adv, d_rewards)
        ]
        correct = [r - reward_shift == 1.0 for r in d_rewards]
        parents = select_parents(correct, cfg.K, rng)
        r_states = cfg.revision_states(i)
        revisions = []
        for _ in parents:
            revs = _emit(policy, r_states, cfg.M, rng)
            r_rewards = [_fraction_correct(t, targets[i]) + reward_shift for t in revs]
            if cfg.M >= 2:
                r_adv = group_advantages(r_rewards, cfg.adv_epsilon).values
            else:
                r_adv = (0.0,)
            revisions.append([
                ToySequence(r_states, t, lp_old[r_states, t], lp_ref[r_states, t], a, r)
                for t, a, r in zip(revs, r_adv, r_rewards)
            ])
        groups.append(ToyGroup(i, draft_seqs, parents, revisions))
    return ToyBatch(groups)


def expected_reward(policy: ToyPolicy, targets: np.ndarray, cfg: ToyConfig, revision: bool = False) -> float:
    p = np.exp(policy.log_probs())
    vals = []
    for i in range(cfg.num_samples):
        states = cfg.revision_states(i) if revision else cfg.draft_states(i)
        vals.append(p[states, targets[i]].mean())
    return float(np.mean(vals))


@dataclass
class TrainTrace:
    iterations: list[int] = field(default_factory=list)
    mean_draft_reward: list[float] = field(default_factory=list)
    mean_revise_reward: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "mean_draft_reward", "mean_revise_reward", "loss"])
            for row in zip(self.iterations, self.mean_draft_reward, self.mean_revise_reward, self.loss):
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def toy_train(cfg: ToyConfig, seed: int) -> TrainTrace:
    """Run the draft -> parents -> revisions -> dual-stage update loop.

    Rewards in the trace are expectations under the current policy, so
    they are free of sampling noise. Row ``i`` is measured before update
    ``i``; the last row follows the final update.
    """
    rng = derive_rng(seed, "toy")
    targets = rng.integers(0, cfg.vocab, size=(cfg.num_samples, cfg.seq_len))
    policy = ToyPolicy.uniform(cfg.num_states, cfg.vocab)
    ref = ToyPolicy(policy.logits.copy())
    trace = TrainTrace()
    for it in range(cfg.iterations + 1):
        trace.iterations.append(it)
        trace.mean_draft_reward.append(expected_reward(policy, targets, cfg))
        trace.mean_revise_reward.append(expected_reward(policy, targets, cfg, revision=True))
        if it == cfg.iterations:
            trace.loss.append(float("nan"))
            break
        batch = collect_batch(policy, ref, targets, cfg, rng)
        trace.loss.append(toy_dual_stage_loss(policy, batch, cfg))
        for _ in range(cfg.epochs):
            policy.logits = policy.logits - cfg.lr * toy_dual_stage_grad(policy, batch, cfg)
    return trace


def random_check_problem(seed: int, cfg: ToyConfig | None = None) -> tuple[ToyPolicy, ToyBatch, ToyConfig]:
    """A random policy whose batch was recorded under a perturbed old policy."""
    cfg = cfg or ToyConfig(num_samples=2, seq_len=3, vocab=4, G=4, K=2, M=3, kl_beta=0.02, lam=0.5)
    rng = np.random.default_rng(seed)
    old = ToyPolicy(rng.normal(size=(cfg.num_states, cfg.vocab)))
    ref = ToyPolicy(old.logits + rng.normal(scale=0.5, size=old.logits.shape))
    targets = rng.integers(0, cfg.vocab, size=(cfg.num_samples, cfg.seq_len))
    batch = collect_batch(old, ref, targets, cfg, rng)
    policy = ToyPolicy(old.logits + rng.normal(scale=0.3, size=old.logits.shape))
    return policy, batch, cfg


def gradient_check(seeds: Sequence[int] = range(20), h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    worst = 0.0
    for seed in seeds:
        policy, batch, cfg = random_check_problem(seed)
        analytic = toy_dual_stage_grad(policy, batch, cfg)
        numeric = finite_difference_grad(policy, batch, cfg, h)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
