"""Group-relative advantages, the clipped dual-stage objective, and a toy policy."""

from dcrkit.grpo.objective import (
    EmptyStage,
    GroupTooSmall,
    LengthMismatch,
    MissingRef,
    TokenSequence,
    clipped_surrogate,
    dual_stage_loss,
    group_advantages,
    kl_k3,
    select_parents,
    surrogate_terms,
)
from dcrkit.grpo.toy import (
    IndexOutOfRange,
    ShapeMismatch,
    ToyBatch,
    ToyConfig,
    ToyPolicy,
    TrainTrace,
    collect_batch,
    finite_difference_grad,
    gradient_check,
    max_relative_error,
    toy_dual_stage_grad,
    toy_dual_stage_loss,
    toy_logprob,
    toy_train,
)

__all__ = [
    "EmptyStage",
    "GroupTooSmall",
    "IndexOutOfRange",
    "LengthMismatch",
    "MissingRef",
    "ShapeMismatch",
    "TokenSequence",
    "ToyBatch",
    "ToyConfig",
    "ToyPolicy",
    "TrainTrace",
    "clipped_surrogate",
    "collect_batch",
    "dual_stage_loss",
    "finite_difference_grad",
    "gradient_check",
    "group_advantages",
    "kl_k3",
    "max_relative_error",
    "select_parents",
    "surrogate_terms",
    "toy_dual_stage_grad",
    "toy_dual_stage_loss",
    "toy_logprob",
    "toy_train",
]
