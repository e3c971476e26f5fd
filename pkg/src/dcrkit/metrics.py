"""Binary sarcasm-detection metrics over DCR result files. Positive class: "yes"."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Sequence

from dcrkit.core import DcrError, Label, Prediction


class LengthMismatch(DcrError, ValueError):
    pass


class Empty(DcrError, ValueError):
    pass


class ParseError(DcrError, ValueError):
    def __init__(self, path: str | Path, lineno: int, msg: str) -> None:
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(preds: Sequence[Prediction], golds: Sequence[Label]) -> Confusion:
    """Invalid predictions count as errors: fn on positives, fp on negatives."""
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} labels")
    if not preds:
        raise Empty("nothing to evaluate")
    tp = fp = fn = tn = 0
    for pred, gold in zip(preds, golds):
        positive = gold is Label.SARCASTIC
        if pred.is_label(gold):
            tp, tn = tp + positive, tn + (not positive)
        else:
            fn, fp = fn + positive, fp + (not positive)
    return Confusion(tp, fp, fn, tn)


@dataclass(frozen=True)
class Scores:
    p: float
    r: float
    f1: float
    acc: float


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def prf1(c: Confusion) -> Scores:
    p = _div(c.tp, c.tp + c.fp)
    r = _div(c.tp, c.tp + c.fn)
    f1 = _div(2 * p * r, p + r)
    return Scores(p=p, r=r, f1=f1, acc=_div(c.tp + c.tn, c.total))


def pct(x: float) -> float:
    """Percentage rounded half-up to one decimal, as reported in tables."""
    return float(Decimal(repr(x * 100)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ReportRow:
    name: str
    f1: float
    acc: float
    p: float
    r: float
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def build(cls, name: str, c: Confusion) -> "ReportRow":
        s = prf1(c)
        return cls(name, pct(s.f1), pct(s.acc), pct(s.p), pct(s.r), c.tp, c.fp, c.fn, c.tn)


@dataclass(frozen=True)
class Report:
    rows: tuple[ReportRow, ...]

    def to_json(self) -> dict[str, Any]:
        return {"rows": [asdict(r) for r in self.rows]}

    def to_text(self) -> str:
        head = f"{'Round':<10}{'F1':>7}{'Acc':>7}{'P':>7}{'R':>7}{'TP':>7}{'FP':>7}{'FN':>7}{'TN':>7}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.name:<10}{r.f1:>7.1f}{r.acc:>7.1f}{r.p:>7.1f}{r.r:>7.1f}{r.tp:>7}{r.fp:>7}{r.fn:>7}{r.tn:>7}"
            )
        return "\n".join(lines)


def _load_results(path: str | Path) -> list:
    from dcrkit.pipeline import DcrRecord

    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = DcrRecord.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if rec.gold is None:
                raise ParseError(path, lineno, "record has no gold label")
            records.append(rec)
    if not records:
        raise Empty(f"{path}: no records")
    return records


def evaluate_run(results_file: str | Path, round_selector: str | int | None = None) -> Report:
    """Metrics per round ("Draft", "Revise 1", ...).

    ``round_selector`` picks one row: "draft", "final", or a round number;
    ``None`` reports every round present in the file.
    """
    records = _load_results(results_file)
    golds = [r.gold for r in records]
    max_round = max(len(r.rounds) for r in records)

    def row(r: int, name: str) -> ReportRow:
        return ReportRow.build(name, confusion([rec.prediction_at(r) for rec in records], golds))

    if round_selector is None:
        return Report(tuple(row(r, "Draft" if r == 0 else f"Revise {r}") for r in range(max_round + 1)))
    if round_selector == "draft" or round_selector == 0:
        return Report((row(0, "Draft"),))
    if round_selector == "final":
        c = confusion([rec.final_prediction for rec in records], golds)
        return Report((ReportRow.build("Final", c),))
    r = int(round_selector)
    if not 1 <= r <= max_round:
        raise ValueError(f"round {r} not present (max {max_round})")
    return Report((row(r, f"Revise {r}"),))
