"""Group-relative advantages, parent selection and the clipped dual-stage loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dcrkit.core import AdvantageSet, DcrError


class GroupTooSmall(DcrError, ValueError):
    pass


class LengthMismatch(DcrError, ValueError):
    pass


class MissingRef(DcrError, ValueError):
    pass


class EmptyStage(DcrError, ValueError):
    pass


def group_advantages(rewards: Sequence[float], epsilon: float = 1e-4) -> AdvantageSet:
    """(r_i - mean) / (std + epsilon), population std.

    Rewards are re-anchored on the first element before any arithmetic, so
    shifting every reward by a constant (when the shifted values are exactly
    representable) gives bit-identical advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    d = r - r[0]
    mu_d = d.mean()
    centred = d - mu_d
    sigma = float(np.sqrt(np.mean(centred * centred)))
    adv = centred / (sigma + epsilon)
    return AdvantageSet(tuple(float(a) for a in adv), float(r[0] + mu_d), sigma, epsilon)


def select_parents(correct_flags: Sequence[bool], k: int, rng: np.random.Generator) -> list[int]:
    """Balanced choice of ``k`` parents: ceil(k/2) incorrect, floor(k/2) correct.

    A class short of its quota is topped up from the other class.
    """
    g = len(correct_flags)
    if not 1 <= k <= g:
        raise ValueError(f"need 1 <= K <= G, got K={k}, G={g}")
    wrong = [i for i, ok in enumerate(correct_flags) if not ok]
    right = [i for i, ok in enumerate(correct_flags) if ok]
    want_wrong = min(len(wrong), math.ceil(k / 2))
    want_right = min(len(right), k - want_wrong)
    want_wrong = k - want_right
    picked = []
    if want_wrong:
        picked += rng.choice(wrong, size=want_wrong, replace=False).tolist()
    if want_right:
        picked += rng.choice(right, size=want_right, replace=False).tolist()
    return sorted(int(i) for i in picked)


@dataclass(frozen=True)
class TokenSequence:
    new_logps: np.ndarray
    old_logps: np.ndarray
    ref_logps: np.ndarray | None = None

    def __post_init__(self) -> None:
        arrays = [np.asarray(self.new_logps, dtype=np.float64), np.asarray(self.old_logps, dtype=np.float64)]
        if self.ref_logps is not None:
            arrays.append(np.asarray(self.ref_logps, dtype=np.float64))
        if arrays[0].ndim != 1 or arrays[0].size < 1 or any(a.shape != arrays[0].shape for a in arrays):
            raise LengthMismatch("log-prob arrays must share one non-empty length")
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("log-probs must be finite")
        object.__setattr__(self, "new_logps", arrays[0])
        object.__setattr__(self, "old_logps", arrays[1])
        if self.ref_logps is not None:
            object.__setattr__(self, "ref_logps", arrays[2])


def surrogate_terms(seq: TokenSequence, advantage: float, clip_eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (clipped, unclipped) surrogate values."""
    ratio = np.exp(seq.new_logps - seq.old_logps)
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage
    return np.minimum(unclipped, clipped), unclipped


def kl_k3(seq: TokenSequence) -> np.ndarray:
    assert seq.ref_logps is not None
    diff = seq.ref_logps - seq.new_logps
    return np.expm1(diff) - diff  # expm1 keeps the estimate non-negative near zero


def clipped_surrogate(seq: TokenSequence, advantage: float, clip_eps: float = 0.2, kl_beta: float = 0.0) -> float:
    """Token-mean clipped surrogate as a loss, plus ``kl_beta`` times the k3 KL estimate."""
    if kl_beta > 0 and seq.ref_logps is None:
        raise MissingRef("kl_beta > 0 needs reference log-probs")
    surr, _ = surrogate_terms(seq, advantage, clip_eps)
    loss = -float(surr.mean())
    if kl_beta > 0:
        loss += kl_beta * float(kl_k3(seq).mean())
    return loss


def dual_stage_loss(draft_losses: Sequence[float], revise_losses: Sequence[Sequence[float]], lam: float) -> float:
    """(1 - lam) * mean(draft) + lam * mean over parents of mean(revisions)."""
    if not draft_losses or not revise_losses or any(len(g) == 0 for g in revise_losses):
        raise EmptyStage("every stage group must be non-empty")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    draft_term = sum(draft_losses) / len(draft_losses)
    revise_term = sum(sum(g) / len(g) for g in revise_losses) / len(revise_losses)
    return (1.0 - lam) * draft_term + lam * revise_term
