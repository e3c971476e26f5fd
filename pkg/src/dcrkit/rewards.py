"""Scalar rewards for drafts, revisions and critiques."""

from __future__ import annotations

from dcrkit.core import Critique, Label, Prediction, ReasoningOutput, RewardBreakdown, agree
from dcrkit.structio import format_reward


def accuracy_reward(pred: Prediction, gold: Label) -> int:
    return 1 if pred.is_label(gold) else 0


def eval_reward(score: int | None, divisor: float = 2.0) -> float:
    """Critic score mapped onto [0, 1]; an unparseable score earns nothing."""
    if score is None:
        return 0.0
    return score / divisor


def improvement_reward(draft_pred: Prediction, revise_pred: Prediction, gold: Label) -> int:
    # fix is tested before damage; with invalid predictions the order matters
    if not draft_pred.is_label(gold) and revise_pred.is_label(gold):
        return 1
    if not agree(revise_pred, draft_pred) and not revise_pred.is_label(gold):
        return -1
    return 0


def actionability_reward(draft_pred: Prediction, revise_pred: Prediction, gold: Label) -> int:
    """Same fix/damage table as :func:`improvement_reward`, applied to a critic's probe."""
    return improvement_reward(draft_pred, revise_pred, gold)


def score_alignment_reward(score: int | None, pred: Prediction, gold: Label) -> int:
    if score is None:
        return -1
    return score - 1 if accuracy_reward(pred, gold) else 1 - score


def draft_reward(out: ReasoningOutput, crit: Critique, gold: Label, divisor: float = 2.0) -> RewardBreakdown:
    return RewardBreakdown.of(
        acc=accuracy_reward(out.prediction, gold),
        fmt=format_reward(out),
        eval=eval_reward(crit.score, divisor),
    )


def revise_reward(draft_pred: Prediction, out: ReasoningOutput, gold: Label) -> RewardBreakdown:
    return RewardBreakdown.of(
        acc=accuracy_reward(out.prediction, gold),
        fmt=format_reward(out),
        imp=improvement_reward(draft_pred, out.prediction, gold),
    )


def critic_reward(
    crit: Critique, draft_pred: Prediction, revise_pred: Prediction | None, gold: Label
) -> RewardBreakdown:
    """``revise_pred=None`` means no probe was run (empty feedback): act is 0."""
    act = 0 if revise_pred is None else actionability_reward(draft_pred, revise_pred, gold)
    return RewardBreakdown.of(
        fmt=format_reward(crit),
        align=score_alignment_reward(crit.score, draft_pred, gold),
        act=act,
    )
