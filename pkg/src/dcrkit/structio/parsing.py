"""Tag grammars, the rollout step grammar, and trajectory flattening.

Parsers for reward-bearing output are strict: the first tag pair is
extracted, and any repeated or out-of-order tags fail ``format_ok``.
"""

from __future__ import annotations

import json
import re

from dcrkit.core import (
    Critique,
    DcrError,
    Label,
    NextAction,
    Prediction,
    ReasoningOutput,
    RoleStep,
    Trajectory,
)


class StepParseError(DcrError, ValueError):
    pass


class NotJson(StepParseError):
    pass


class MissingKey(StepParseError):
    def __init__(self, name: str) -> None:
        super().__init__(f"missing key: {name}")
        self.name = name


class BadNextAction(StepParseError):
    def __init__(self, value: object) -> None:
        super().__init__(f"bad next_action: {value!r}")
        self.value = value


class InvalidAnswer(DcrError, ValueError):
    pass


_DECODER = json.JSONDecoder()


def _first_object(raw: str) -> dict:
    start = raw.find("{")
    while start != -1:
        try:
            obj, _ = _DECODER.raw_decode(raw, start)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            return obj
        start = raw.find("{", start + 1)
    raise NotJson(f"no JSON object in completion: {raw[:80]!r}")


def parse_role_step(raw: str) -> RoleStep:
    obj = _first_object(raw)
    fields = {}
    for key in ("title", "content", "next_action"):
        value = obj.get(key)
        if not isinstance(value, str) or not value.strip():
            raise MissingKey(key)
        fields[key] = value
    try:
        action = NextAction(fields["next_action"].strip().lower())
    except ValueError:
        raise BadNextAction(fields["next_action"]) from None
    return RoleStep(fields["title"].strip(), fields["content"].strip(), action)


def flatten_trajectory(traj: Trajectory) -> str:
    if not traj.final_answer.is_valid:
        raise InvalidAnswer(f"trajectory {traj.sample_id!r} has no valid answer")
    body = "\n\n".join(
        f"Step{i}: {step.title}\n{step.content}" for i, step in enumerate(traj.steps, 1)
    )
    return f"<think>{body}</think>\n<answer>{traj.final_answer.render()}</answer>"


def _tag_block(raw: str, tag: str) -> tuple[str | None, bool, int]:
    """Return (first content, exactly-one-pair, start offset)."""
    open_t, close_t = f"<{tag}>", f"</{tag}>"
    m = re.search(re.escape(open_t) + "(.*?)" + re.escape(close_t), raw, re.DOTALL)
    if m is None:
        return None, False, -1
    single = raw.count(open_t) == 1 and raw.count(close_t) == 1
    return m.group(1), single, m.start()


def parse_answer_text(text: str) -> Prediction:
    norm = text.strip().lower()
    if norm == "yes":
        return Prediction(Label.SARCASTIC, text)
    if norm == "no":
        return Prediction(Label.NOT_SARCASTIC, text)
    return Prediction.invalid(text)


def parse_reasoning(raw: str) -> ReasoningOutput:
    think, think_single, think_at = _tag_block(raw, "think")
    answer, answer_single, answer_at = _tag_block(raw, "answer")
    pred = parse_answer_text(answer) if answer is not None else Prediction.invalid("")
    ok = (
        think is not None
        and answer is not None
        and think_single
        and answer_single
        and think_at < answer_at
        and raw.index("</think>") < answer_at
        and bool(think.strip())
        and pred.is_valid
    )
    return ReasoningOutput(think_text=think or "", prediction=pred, format_ok=ok, raw=raw)


_SCORE = re.compile(r"[0-9]+")


def parse_critique(raw: str) -> Critique:
    feedback, fb_single, _ = _tag_block(raw, "feedback")
    score_text, sc_single, _ = _tag_block(raw, "score")
    score = None
    if score_text is not None and _SCORE.fullmatch(score_text.strip()):
        value = int(score_text.strip())
        if value in (0, 1, 2):
            score = value
    feedback = (feedback or "").strip()
    ok = bool(feedback) and score is not None and fb_single and sc_single
    return Critique(feedback=feedback, score=score, format_ok=ok, raw=raw)


def format_reward(parsed: ReasoningOutput | Critique) -> int:
    return 1 if parsed.format_ok else 0
