"""Shared domain types.

Everything here is immutable after construction. Validation happens in
``__post_init__`` so an invalid object never leaves its constructor.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping


class DcrError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(DcrError, ValueError):
    pass


class MissingField(ValidationError):
    def __init__(self, name: str) -> None:
        super().__init__(f"missing field: {name}")
        self.name = name


class EmptyText(ValidationError):
    pass


class BadLabel(ValidationError):
    pass


class Label(enum.Enum):
    SARCASTIC = "yes"
    NOT_SARCASTIC = "no"

    def render(self) -> str:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls(text)
        except ValueError:
            raise BadLabel(f"not a label: {text!r}") from None


class NextAction(enum.Enum):
    CONTINUE = "continue"
    FINAL_ANSWER = "final_answer"


@dataclass(frozen=True)
class Prediction:
    """A parsed answer: a valid label, or ``label=None`` for an invalid one.

    Dataclass equality is structural (useful for serialization tests). Use
    :meth:`is_label` / :func:`agree` for reward logic, where an invalid
    prediction never matches anything, including another invalid one.
    """

    label: Label | None
    raw: str = ""

    @classmethod
    def valid(cls, label: Label, raw: str = "") -> "Prediction":
        return cls(label, raw or label.value)

    @classmethod
    def invalid(cls, raw: str = "") -> "Prediction":
        return cls(None, raw)

    @property
    def is_valid(self) -> bool:
        return self.label is not None

    def is_label(self, label: Label) -> bool:
        return self.label is not None and self.label is label

    def render(self) -> str:
        return self.label.value if self.label is not None else "invalid"


def agree(a: Prediction, b: Prediction) -> bool:
    """Three-valued equality: true only for two valid, identical labels."""
    return a.label is not None and a.label is b.label


@dataclass(frozen=True)
class Sample:
    id: str
    text: str
    image_ref: str | None = None
    gold: Label | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise MissingField("id")
        if not self.text.strip():
            raise EmptyText(f"sample {self.id!r} has empty text")

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"id": self.id, "text": self.text}
        if self.image_ref is not None:
            rec["image"] = self.image_ref
        if self.gold is not None:
            rec["label"] = self.gold.value
        return rec


def validate_sample(record: Mapping[str, Any]) -> Sample:
    """Build a :class:`Sample` from one parsed dataset record."""
    for key in ("id", "text"):
        if key not in record or record[key] is None:
            raise MissingField(key)
    sid, text = record["id"], record["text"]
    if not isinstance(sid, str) or not sid:
        raise MissingField("id")
    if not isinstance(text, str) or not text.strip():
        raise EmptyText(f"sample {sid!r} has empty text")
    label = record.get("label")
    gold = None
    if label is not None:
        if not isinstance(label, str):
            raise BadLabel(f"not a label: {label!r}")
        gold = Label.parse(label)
    image = record.get("image")
    return Sample(id=sid, text=text, image_ref=image, gold=gold)


def read_dataset(path: str | Path) -> list[Sample]:
    """Read a JSONL dataset; ids must be unique within the file."""
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            sample = validate_sample(record)
            if sample.id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate id {sample.id!r}")
            seen.add(sample.id)
            samples.append(sample)
    return samples


@dataclass(frozen=True)
class RoleStep:
    title: str
    content: str
    next_action: NextAction

    def __post_init__(self) -> None:
        if not self.title.strip() or not self.content.strip():
            raise ValidationError("role step title and content must be non-empty")

    def with_action(self, action: NextAction) -> "RoleStep":
        return RoleStep(self.title, self.content, action)


@dataclass(frozen=True)
class Trajectory:
    sample_id: str
    steps: tuple[RoleStep, ...]
    final_answer: Prediction

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) < 2:
            raise ValidationError("a trajectory needs at least 2 steps")
        *body, last = self.steps
        if any(s.next_action is not NextAction.CONTINUE for s in body):
            raise ValidationError("only the last step may carry final_answer")
        if last.next_action is not NextAction.FINAL_ANSWER:
            raise ValidationError("the last step must carry final_answer")

    @property
    def num_steps(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class ReasoningOutput:
    think_text: str
    prediction: Prediction
    format_ok: bool
    raw: str

    def __post_init__(self) -> None:
        if self.format_ok and (not self.think_text.strip() or not self.prediction.is_valid):
            raise ValidationError("format_ok output needs think text and a valid answer")


@dataclass(frozen=True)
class Critique:
    """Parsed critic output. ``score`` is ``None`` when unparseable."""

    feedback: str
    score: int | None
    format_ok: bool
    raw: str

    def __post_init__(self) -> None:
        if self.score is not None and self.score not in (0, 1, 2):
            raise ValidationError(f"score out of range: {self.score}")
        if self.format_ok and (not self.feedback.strip() or self.score is None):
            raise ValidationError("format_ok critique needs feedback and a valid score")


REWARD_COMPONENTS = ("acc", "fmt", "eval", "imp", "align", "act")


@dataclass(frozen=True)
class RewardBreakdown:
    components: Mapping[str, float]
    total: float

    def __post_init__(self) -> None:
        unknown = set(self.components) - set(REWARD_COMPONENTS)
        if unknown:
            raise ValidationError(f"unknown reward components: {sorted(unknown)}")
        # components are multiples of 1/2, so float sums are exact
        if sum(self.components.values()) != self.total:
            raise ValidationError("reward total must equal the component sum")

    @classmethod
    def of(cls, **components: float) -> "RewardBreakdown":
        comps = {k: float(v) for k, v in components.items()}
        return cls(comps, sum(comps.values()))

    def to_dict(self) -> dict[str, float]:
        return {**self.components, "total": self.total}


@dataclass(frozen=True)
class DraftCandidate:
    output: ReasoningOutput
    critique: Critique
    reward: RewardBreakdown


@dataclass(frozen=True)
class RevisionCandidate:
    output: ReasoningOutput
    reward: RewardBreakdown


@dataclass(frozen=True)
class ParentRecord:
    index: int
    feedback: str
    revisions: tuple[RevisionCandidate, ...]


@dataclass(frozen=True)
class RolloutGroup:
    sample_id: str
    drafts: tuple[DraftCandidate, ...]
    parents: tuple[ParentRecord, ...]
    draft_advantages: "AdvantageSet | None" = None
    revise_advantages: tuple["AdvantageSet", ...] = ()

    def __post_init__(self) -> None:
        g, k = len(self.drafts), len(self.parents)
        if not 1 <= k <= g:
            raise ValidationError(f"need 1 <= K <= G, got K={k}, G={g}")
        idx = [p.index for p in self.parents]
        if len(set(idx)) != k or any(not 0 <= i < g for i in idx):
            raise ValidationError(f"bad parent indices {idx}")
        for p in self.parents:
            if p.feedback != self.drafts[p.index].critique.feedback:
                raise ValidationError("parent feedback must be its draft's critique feedback")


@dataclass(frozen=True)
class AdvantageSet:
    values: tuple[float, ...]
    mean: float
    std: float
    epsilon: float

    def __post_init__(self) -> None:
        if len(self.values) < 2:
            raise ValidationError("advantages need a group of at least 2")


def _default_backends() -> dict[str, dict[str, Any]]:
    return {}


@dataclass
class EngineConfig:
    """Engine configuration; loaded from a flat JSON file (see ``config``)."""

    G: int = 8
    M: int = 4
    K: int = 2
    lam: float = 0.5
    adv_epsilon: float = 1e-4
    clip_epsilon: float = 0.2
    kl_beta: float = 0.02
    critic_kl_beta: float = 0.0
    max_steps: int = 6
    min_steps: int = 2
    revision_rounds: int = 1
    max_revision_rounds: int = 5
    seed: int = 0
    eval_divisor: float = 2.0
    parse_retries: int = 2
    triple_retries: int = 2
    triple_temperature: float = 0.7
    rl_temperature: float = 1.0
    eval_temperature: float = 0.0
    teacher_temperature: float = 0.7
    proposal_max_tokens: int = 512
    critic_max_tokens: int = 768
    teacher_max_tokens: int = 1024
    workers: int = 8
    template: str = "dynamic"
    prompt_dir: str | None = None
    max_skip_fraction: float = 0.10
    critic_stage_samples: int = 5000
    proposal_stage_samples: int = 2000
    refinement_cycles: int = 1
    data: str | None = None
    drafts_file: str | None = None
    readiness_timeout_s: float = 0.0
    backends: dict[str, dict[str, Any]] = field(default_factory=_default_backends)
    toy: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("G", "M", "K", "workers"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.K > self.G:
            raise ValidationError("K must not exceed G")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lam must lie in [0, 1]")
        if self.adv_epsilon <= 0 or self.clip_epsilon <= 0:
            raise ValidationError("adv_epsilon and clip_epsilon must be positive")
        if self.kl_beta < 0 or self.critic_kl_beta < 0:
            raise ValidationError("KL coefficients must be non-negative")
        if self.min_steps < 2 or self.max_steps < 2 or self.min_steps > self.max_steps:
            raise ValidationError("need 2 <= min_steps <= max_steps")
        if self.revision_rounds < 0:
            raise ValidationError("revision_rounds must be >= 0")
        if self.template not in ("dynamic", "fixed", "generic"):
            raise ValidationError(f"unknown template {self.template!r}")


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield lineno, json.loads(line)


def dumps_line(obj: Any) -> str:
    """Canonical JSONL encoding used for every output file."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: str | Path, rows: Iterable[Any]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps_line(row) + "\n")
            n += 1
    return n
