"""Dynamic-role rollouts with a teacher model, and corpus construction from them."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Sequence, Union

from dcrkit.backend import Backend, BackendError, ChatMessage, DecodeParams, generate
from dcrkit.conversation import critic_messages, revise_messages, user_turn
from dcrkit.core import DcrError, EngineConfig, Label, NextAction, Prediction, RoleStep, Sample, Trajectory, write_jsonl
from dcrkit.structio import PromptBook, StepParseError, TemplateId, flatten_trajectory, parse_critique, parse_reasoning, parse_role_step

log = logging.getLogger(__name__)

FORCE_FINAL = (
    "You have reached the maximum number of steps. Give the final answer now: "
    'respond with one JSON object whose next_action is "final_answer" and whose content states yes or no.'
)
CLARIFY = "Answer with exactly yes or no."
_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


class StepParseFailure(DcrError):
    def __init__(self, sample_id: str, turn: int, cause: Exception) -> None:
        super().__init__(f"{sample_id}: turn {turn} unparseable after retries: {cause}")
        self.sample_id = sample_id
        self.turn = turn


@dataclass(frozen=True)
class CorrectFlattened:
    sequence: str


@dataclass(frozen=True)
class NeedsRevision:
    """A valid but wrong trajectory waiting for triple construction."""

    draft: str


@dataclass(frozen=True)
class FlawedTriple:
    draft: str
    feedback: str
    revision: str


@dataclass(frozen=True)
class Discarded:
    reason: str


Outcome = Union[CorrectFlattened, NeedsRevision, FlawedTriple, Discarded]


@dataclass(frozen=True)
class SynthesisRecord:
    sample_id: str
    trajectory: Trajectory | None
    outcome: Outcome


def keyword_answer(text: str) -> Prediction:
    """A label if exactly one of yes/no occurs as a standalone word."""
    found = {m.lower() for m in _YES_NO.findall(text)}
    if len(found) == 1:
        return Prediction.valid(Label(found.pop()), text)
    return Prediction.invalid(text)


def _teacher_params(cfg: EngineConfig, temperature: float | None = None) -> DecodeParams:
    temp = cfg.teacher_temperature if temperature is None else temperature
    return DecodeParams(temperature=temp, max_new_tokens=cfg.teacher_max_tokens, n=1)


def extract_final_answer(
    final_step: RoleStep,
    teacher: Backend,
    history: Sequence[ChatMessage] = (),
    params: DecodeParams | None = None,
) -> Prediction:
    """Keyword scan of the final step, then at most one clarification turn."""
    pred = keyword_answer(final_step.content)
    if pred.is_valid:
        return pred
    messages = [*history, ChatMessage.user(CLARIFY)]
    reply = generate(teacher, messages, params or DecodeParams())[0]
    return keyword_answer(reply)


def _next_step(
    teacher: Backend, messages: list[ChatMessage], params: DecodeParams, retries: int, sample_id: str, turn: int
) -> tuple[str, RoleStep]:
    err: Exception | None = None
    for _ in range(retries + 1):
        raw = generate(teacher, messages, params)[0]
        try:
            return raw, parse_role_step(raw)
        except (StepParseError, ValueError) as exc:
            err = exc
            log.debug("%s turn %d: %s", sample_id, turn, exc)
    assert err is not None
    raise StepParseFailure(sample_id, turn, err)


def run_rollout(sample: Sample, teacher: Backend, cfg: EngineConfig, book: PromptBook | None = None) -> Trajectory:
    """Multi-turn rollout; each role sees every earlier role in the same conversation."""
    book = book or PromptBook(cfg.prompt_dir)
    params = _teacher_params(cfg)
    messages = [
        ChatMessage.system(book.render(TemplateId.ROLLOUT_SYSTEM)),
        user_turn(book.render(TemplateId.ROLLOUT_QUESTION, sample), sample.image_ref),
    ]
    steps: list[RoleStep] = []
    while True:
        raw, step = _next_step(teacher, messages, params, cfg.parse_retries, sample.id, len(steps) + 1)
        messages.append(ChatMessage.assistant(raw))
        if step.next_action is NextAction.FINAL_ANSWER:
            if len(steps) + 1 >= cfg.min_steps:
                steps.append(step)
                break
            step = step.with_action(NextAction.CONTINUE)
        steps.append(step)
        if len(steps) >= cfg.max_steps:
            messages.append(ChatMessage.user(FORCE_FINAL))
            raw, step = _next_step(teacher, messages, params, cfg.parse_retries, sample.id, len(steps) + 1)
            messages.append(ChatMessage.assistant(raw))
            steps.append(step.with_action(NextAction.FINAL_ANSWER))
            break
        messages.append(ChatMessage.user(book.render(TemplateId.ROLLOUT_FOLLOWUP)))
    answer = extract_final_answer(steps[-1], teacher, messages, params)
    return Trajectory(sample.id, tuple(steps), answer)


def filter_and_flatten(sample: Sample, traj: Trajectory) -> SynthesisRecord:
    if sample.gold is None:
        raise ValueError(f"sample {sample.id!r} has no gold label")
    if not traj.final_answer.is_valid:
        return SynthesisRecord(sample.id, traj, Discarded("invalid_answer"))
    flat = flatten_trajectory(traj)
    if traj.final_answer.is_label(sample.gold):
        return SynthesisRecord(sample.id, traj, CorrectFlattened(flat))
    return SynthesisRecord(sample.id, traj, NeedsRevision(flat))


def build_revision_triple(
    sample: Sample,
    flawed_flat: str,
    critic: Backend,
    teacher: Backend,
    retries: int = 2,
    cfg: EngineConfig | None = None,
    book: PromptBook | None = None,
    trajectory: Trajectory | None = None,
) -> SynthesisRecord:
    """Critic feedback on a wrong trajectory, then teacher revisions until one is right.

    The teacher gets one attempt plus up to ``retries`` fresh samples.
    """
    cfg = cfg or EngineConfig()
    book = book or PromptBook(cfg.prompt_dir, cfg.template)
    assert sample.gold is not None
    crit_params = DecodeParams(temperature=cfg.eval_temperature, max_new_tokens=cfg.critic_max_tokens)
    crit = parse_critique(generate(critic, critic_messages(book, sample, flawed_flat), crit_params)[0])
    if not crit.feedback:
        return SynthesisRecord(sample.id, trajectory, Discarded("empty_feedback"))
    params = _teacher_params(cfg, cfg.triple_temperature)
    messages = revise_messages(book, sample, flawed_flat, crit.feedback)
    for _ in range(retries + 1):
        candidate = generate(teacher, messages, params)[0]
        out = parse_reasoning(candidate)
        if out.format_ok and out.prediction.is_label(sample.gold):
            return SynthesisRecord(sample.id, trajectory, FlawedTriple(flawed_flat, crit.feedback, candidate))
    return SynthesisRecord(sample.id, trajectory, Discarded("uncorrected"))


def synthesize_one(
    sample: Sample, teacher: Backend, critic: Backend | None, cfg: EngineConfig, book: PromptBook
) -> SynthesisRecord:
    try:
        traj = run_rollout(sample, teacher, cfg, book)
    except StepParseFailure:
        return SynthesisRecord(sample.id, None, Discarded("parse_failure"))
    rec = filter_and_flatten(sample, traj)
    if isinstance(rec.outcome, NeedsRevision):
        if critic is None:
            return SynthesisRecord(sample.id, traj, Discarded("no_critic"))
        return build_revision_triple(sample, rec.outcome.draft, critic, teacher, cfg.triple_retries, cfg, book, traj)
    return rec


# -- corpus statistics --------------------------------------------------------


def _pct(count: int, total: int) -> str:
    if total == 0:
        return "0.0"
    pct = Decimal(count * 100) / Decimal(total)
    return str(pct.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def step_stats(counts: dict[str, dict[int, int]]) -> dict[str, Any]:
    """Histogram rows per label plus "all": count, percentage and average steps.

    ``counts`` maps a row name ("yes", "no") to {steps: trajectories}.
    """
    rows: dict[str, dict[int, int]] = {k: dict(v) for k, v in counts.items()}
    total: Counter[int] = Counter()
    for hist in rows.values():
        total.update(hist)
    rows["all"] = dict(total)
    out: dict[str, Any] = {}
    for name, hist in rows.items():
        n = sum(hist.values())
        avg = Decimal(sum(k * v for k, v in hist.items())) / Decimal(n) if n else Decimal(0)
        out[name] = {
            "total": n,
            "histogram": {str(k): {"count": v, "percent": _pct(v, n)} for k, v in sorted(hist.items())},
            "avg_steps": str(avg.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)),
        }
    return out


def format_step_table(stats: dict[str, Any]) -> str:
    steps = sorted({int(k) for row in stats.values() for k in row["histogram"]})
    header = ["", *[f"{s}-step" for s in steps], "Avg."]
    lines = []
    names = {"yes": "Sarcastic", "no": "Non-sarcastic", "all": "All"}
    for key, row in stats.items():
        cells = [names.get(key, key)]
        for s in steps:
            h = row["histogram"].get(str(s))
            cells.append(f"{h['count']:,} ({h['percent']}%)" if h else "0 (0.0%)")
        cells.append(row["avg_steps"])
        lines.append(cells)
    widths = [max(len(r[i]) for r in [header, *lines]) for i in range(len(header))]

    def fmt(row: list[str]) -> str:
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))

    return "\n".join(fmt(r) for r in [header, *lines])


def synthesize_corpus(
    samples: Sequence[Sample],
    teacher: Backend,
    critic: Backend | None,
    cfg: EngineConfig,
    out_dir: str | Path,
) -> dict[str, Any]:
    """Run rollouts for every sample and write drafts/triples/discards/stats."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    book = PromptBook(cfg.prompt_dir, cfg.template)

    def work(sample: Sample) -> SynthesisRecord:
        try:
            return synthesize_one(sample, teacher, critic, cfg, book)
        except BackendError as exc:
            log.warning("sample %s skipped: %s", sample.id, exc)
            return SynthesisRecord(sample.id, None, Discarded(f"backend_error: {exc}"))

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        records = list(pool.map(work, samples))

    drafts, triples, discards = [], [], []
    hist: dict[str, Counter[int]] = {"yes": Counter(), "no": Counter()}
    for sample, rec in zip(samples, records):
        base = {"id": sample.id, "image": sample.image_ref, "text": sample.text,
                "label": sample.gold.value if sample.gold else None}
        if rec.trajectory is not None and sample.gold is not None:
            hist[sample.gold.value][rec.trajectory.num_steps] += 1
        if isinstance(rec.outcome, CorrectFlattened):
            drafts.append({**base, "sequence": rec.outcome.sequence})
        elif isinstance(rec.outcome, FlawedTriple):
            o = rec.outcome
            triples.append({**base, "draft": o.draft, "feedback": o.feedback, "revision": o.revision})
        else:
            reason = rec.outcome.reason if isinstance(rec.outcome, Discarded) else "pending"
            discards.append({"id": sample.id, "reason": reason})
    write_jsonl(out_dir / "drafts.jsonl", drafts)
    write_jsonl(out_dir / "triples.jsonl", triples)
    write_jsonl(out_dir / "discards.jsonl", discards)
    stats = {
        "steps": step_stats({k: dict(v) for k, v in hist.items()}),
        "corpus": {"single_turn": len(drafts), "triples": len(triples),
                   "total": len(drafts) + len(triples), "discarded": len(discards)},
    }
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return stats
