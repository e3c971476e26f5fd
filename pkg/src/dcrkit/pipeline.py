"""Draft-critique-revise inference and RL batch generation for both agents."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import httpx

from dcrkit.backend import Backend, BackendError, BackendSpec, DecodeParams, generate, make_backend
from dcrkit.conversation import critic_messages, draft_messages, prompt_text, revise_messages
from dcrkit.core import (
    Critique,
    DcrError,
    DraftCandidate,
    EngineConfig,
    Label,
    ParentRecord,
    Prediction,
    ReasoningOutput,
    RevisionCandidate,
    RolloutGroup,
    Sample,
    ValidationError,
    iter_jsonl,
    write_jsonl,
)
from dcrkit.grpo import group_advantages, select_parents
from dcrkit.rewards import critic_reward, draft_reward, revise_reward
from dcrkit.seeding import derive_rng
from dcrkit.structio import PromptBook, parse_critique, parse_reasoning

log = logging.getLogger(__name__)


class EmptyFeedback(DcrError, ValueError):
    pass


class MissingEndpoint(DcrError):
    pass


class BatchFailure(DcrError):
    pass


@dataclass
class AgentEndpoints:
    proposal: Backend
    critic: Backend
    teacher: Backend | None = None

    @classmethod
    def from_specs(cls, specs: dict[str, dict[str, Any]], need: Iterable[str] = ("proposal", "critic")) -> "AgentEndpoints":
        built: dict[str, Backend | None] = {}
        for role in ("proposal", "critic", "teacher"):
            if role in specs:
                built[role] = make_backend(BackendSpec.from_dict(specs[role]))
            elif role in need:
                raise MissingEndpoint(f"no backend configured for {role!r}")
            else:
                built[role] = None
        return cls(**built)  # type: ignore[arg-type]


class Engine:
    """Binds endpoints, config and prompts for the inference operations."""

    def __init__(self, endpoints: AgentEndpoints, cfg: EngineConfig | None = None, book: PromptBook | None = None) -> None:
        self.endpoints = endpoints
        self.cfg = cfg or EngineConfig()
        self.book = book or PromptBook(self.cfg.prompt_dir, self.cfg.template)

    def _proposal_params(self, n: int = 1, temperature: float | None = None) -> DecodeParams:
        temp = self.cfg.eval_temperature if temperature is None else temperature
        return DecodeParams(temperature=temp, max_new_tokens=self.cfg.proposal_max_tokens, n=n)

    def _critic_params(self, n: int = 1, temperature: float | None = None) -> DecodeParams:
        temp = self.cfg.eval_temperature if temperature is None else temperature
        return DecodeParams(temperature=temp, max_new_tokens=self.cfg.critic_max_tokens, n=n)

    def draft(self, sample: Sample) -> ReasoningOutput:
        raw = generate(self.endpoints.proposal, draft_messages(self.book, sample), self._proposal_params())[0]
        return parse_reasoning(raw)

    def critique(self, sample: Sample, reasoning: ReasoningOutput | str) -> Critique:
        raw_in = reasoning if isinstance(reasoning, str) else reasoning.raw
        if not raw_in:
            raise ValueError("nothing to critique")
        raw = generate(self.endpoints.critic, critic_messages(self.book, sample, raw_in), self._critic_params())[0]
        return parse_critique(raw)

    def revise(self, sample: Sample, previous: ReasoningOutput | str, feedback: str) -> ReasoningOutput:
        if not feedback.strip():
            raise EmptyFeedback(f"sample {sample.id!r}: feedback is empty")
        prev = previous if isinstance(previous, str) else previous.raw
        raw = generate(self.endpoints.proposal, revise_messages(self.book, sample, prev, feedback), self._proposal_params())[0]
        return parse_reasoning(raw)

    def run_dcr(self, sample: Sample, rounds: int | None = None) -> "DcrRecord":
        """Draft once, then ``rounds`` critique/revise cycles on the latest output."""
        rounds = self.cfg.revision_rounds if rounds is None else rounds
        if not 0 <= rounds <= self.cfg.max_revision_rounds:
            raise ValidationError(f"rounds must lie in [0, {self.cfg.max_revision_rounds}]")
        out = self.draft(sample)
        record = DcrRecord(sample.id, sample.gold, out)
        current = out
        for r in range(1, rounds + 1):
            try:
                crit = self.critique(sample, current)
                current = self.revise(sample, current, crit.feedback)
            except (BackendError, EmptyFeedback) as exc:
                record.error = f"round {r}: {exc}"
                break
            record.rounds.append((crit, current))
        return record


@dataclass
class DcrRecord:
    sample_id: str
    gold: Label | None
    draft: ReasoningOutput
    rounds: list[tuple[Critique, ReasoningOutput]] = field(default_factory=list)
    error: str | None = None

    @property
    def final_prediction(self) -> Prediction:
        return self.rounds[-1][1].prediction if self.rounds else self.draft.prediction

    def prediction_at(self, r: int) -> Prediction:
        """Round 0 is the draft; beyond the last completed round the final output stands."""
        if r == 0 or not self.rounds:
            return self.draft.prediction
        return self.rounds[min(r, len(self.rounds)) - 1][1].prediction

    def to_dict(self) -> dict[str, Any]:
        def out(o: ReasoningOutput) -> dict[str, Any]:
            return {"raw": o.raw, "pred": o.prediction.render(), "format_ok": o.format_ok}

        return {
            "sample_id": self.sample_id,
            "gold": self.gold.value if self.gold else None,
            "draft": out(self.draft),
            "rounds": [
                {"critique": {"raw": c.raw, "feedback": c.feedback, "score": c.score, "format_ok": c.format_ok},
                 "revision": out(o)}
                for c, o in self.rounds
            ],
            "final_prediction": self.final_prediction.render(),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DcrRecord":
        gold = Label.parse(d["gold"]) if d.get("gold") else None
        rounds = [(parse_critique(r["critique"]["raw"]), parse_reasoning(r["revision"]["raw"])) for r in d["rounds"]]
        return cls(d["sample_id"], gold, parse_reasoning(d["draft"]["raw"]), rounds, d.get("error"))


def run_dcr_dataset(engine: Engine, samples: Sequence[Sample], rounds: int | None, out_path: str | Path) -> list[DcrRecord]:
    def work(sample: Sample) -> DcrRecord | None:
        try:
            return engine.run_dcr(sample, rounds)
        except BackendError as exc:
            log.warning("sample %s skipped: %s", sample.id, exc)
            return None

    with ThreadPoolExecutor(max_workers=engine.cfg.workers) as pool:
        results = [r for r in pool.map(work, samples) if r is not None]
    write_jsonl(out_path, (r.to_dict() for r in results))
    _check_skips(len(samples) - len(results), len(samples), engine.cfg)
    return results


def _check_skips(skipped: int, total: int, cfg: EngineConfig) -> None:
    if total and skipped / total > cfg.max_skip_fraction:
        raise BatchFailure(f"{skipped} of {total} samples failed")


# -- proposal RL batches ------------------------------------------------------


def _rollout_group(engine: Engine, sample: Sample, index: int) -> tuple[RolloutGroup, list[dict[str, Any]]]:
    cfg, book = engine.cfg, engine.book
    gold = sample.gold
    assert gold is not None
    d_msgs = draft_messages(book, sample)
    d_prompt = prompt_text(d_msgs)
    raws = generate(engine.endpoints.proposal, d_msgs, engine._proposal_params(cfg.G, cfg.rl_temperature))
    drafts = []
    for raw in raws:
        out = parse_reasoning(raw)
        crit = engine.critique(sample, raw) if raw else parse_critique("")
        drafts.append(DraftCandidate(out, crit, draft_reward(out, crit, gold, cfg.eval_divisor)))
    d_adv = group_advantages([d.reward.total for d in drafts], cfg.adv_epsilon)
    lines = [
        {"sample_id": sample.id, "group": "draft", "idx": i, "prompt": d_prompt, "completion": d.output.raw,
         "reward": d.reward.to_dict(), "advantage": a, "pred": d.output.prediction.render(), "gold": gold.value}
        for i, (d, a) in enumerate(zip(drafts, d_adv.values))
    ]
    flags = [d.output.prediction.is_label(gold) for d in drafts]
    parents = select_parents(flags, cfg.K, derive_rng(cfg.seed, "parents", index))
    parent_recs, r_advs = [], []
    for k in parents:
        parent = drafts[k]
        r_msgs = revise_messages(book, sample, parent.output.raw, parent.critique.feedback)
        r_prompt = prompt_text(r_msgs)
        r_raws = generate(engine.endpoints.proposal, r_msgs, engine._proposal_params(cfg.M, cfg.rl_temperature))
        revs = []
        for raw in r_raws:
            out = parse_reasoning(raw)
            revs.append(RevisionCandidate(out, revise_reward(parent.output.prediction, out, gold)))
        rewards = [r.reward.total for r in revs]
        adv = group_advantages(rewards, cfg.adv_epsilon) if len(revs) >= 2 else None
        values = adv.values if adv is not None else (0.0,) * len(revs)
        if adv is not None:
            r_advs.append(adv)
        parent_recs.append(ParentRecord(k, parent.critique.feedback, tuple(revs)))
        lines += [
            {"sample_id": sample.id, "group": "revise", "parent_idx": k, "idx": j, "prompt": r_prompt,
             "completion": r.output.raw, "reward": r.reward.to_dict(), "advantage": a,
             "pred": r.output.prediction.render(), "gold": gold.value}
            for j, (r, a) in enumerate(zip(revs, values))
        ]
    group = RolloutGroup(sample.id, tuple(drafts), tuple(parent_recs), d_adv, tuple(r_advs))
    return group, lines


def _require_gold(samples: Sequence[Sample]) -> None:
    missing = [s.id for s in samples if s.gold is None]
    if missing:
        raise ValidationError(f"samples without gold labels: {missing[:5]}")


def generate_proposal_rl_batch(
    samples: Sequence[Sample], engine: Engine, out_path: str | Path | None = None
) -> list[RolloutGroup]:
    """Draft groups, critic scoring, balanced parents and revision groups per sample."""
    _require_gold(samples)

    def work(item: tuple[int, Sample]):
        i, sample = item
        try:
            return _rollout_group(engine, sample, i)
        except BackendError as exc:
            log.warning("sample %s skipped: %s", sample.id, exc)
            return None

    with ThreadPoolExecutor(max_workers=engine.cfg.workers) as pool:
        results = list(pool.map(work, enumerate(samples)))
    done = [r for r in results if r is not None]
    if out_path is not None:
        write_jsonl(out_path, (line for _, lines in done for line in lines))
    _check_skips(len(samples) - len(done), len(samples), engine.cfg)
    return [g for g, _ in done]


# -- critic RL batches --------------------------------------------------------


def load_drafts(path: str | Path) -> dict[str, str]:
    """Map sample id to raw draft text from a JSONL file ({sample_id|id, draft|completion})."""
    drafts = {}
    for _, row in iter_jsonl(path):
        sid = row.get("sample_id", row.get("id"))
        drafts[sid] = row.get("draft", row.get("completion"))
    return drafts


def _critic_group(engine: Engine, sample: Sample, draft_raw: str | None) -> list[dict[str, Any]]:
    cfg, book = engine.cfg, engine.book
    gold = sample.gold
    assert gold is not None
    if draft_raw is None:
        draft_raw = generate(engine.endpoints.proposal, draft_messages(book, sample), engine._proposal_params())[0]
    draft_pred = parse_reasoning(draft_raw).prediction
    c_msgs = critic_messages(book, sample, draft_raw)
    c_prompt = prompt_text(c_msgs)
    raws = generate(engine.endpoints.critic, c_msgs, engine._critic_params(cfg.G, cfg.rl_temperature))
    rows = []
    for raw in raws:
        crit = parse_critique(raw)
        probe: Prediction | None = None
        if crit.feedback:
            # probe revisions run greedy so the reward is stable
            probe_raw = generate(
                engine.endpoints.proposal,
                revise_messages(book, sample, draft_raw, crit.feedback),
                engine._proposal_params(1, 0.0),
            )[0]
            probe = parse_reasoning(probe_raw).prediction
        rows.append((crit, probe, critic_reward(crit, draft_pred, probe, gold)))
    adv = group_advantages([r.total for _, _, r in rows], cfg.adv_epsilon)
    return [
        {"sample_id": sample.id, "group": "critic", "idx": i, "prompt": c_prompt, "completion": crit.raw,
         "reward": reward.to_dict(), "advantage": a, "score": crit.score,
         "probe_pred": probe.render() if probe is not None else None,
         "draft_pred": draft_pred.render(), "gold": gold.value}
        for i, ((crit, probe, reward), a) in enumerate(zip(rows, adv.values))
    ]


def generate_critic_rl_batch(
    samples: Sequence[Sample],
    engine: Engine,
    out_path: str | Path | None = None,
    drafts: dict[str, str] | None = None,
) -> list[dict[str, Any]]:
    """G critiques per draft, each probed with one frozen-proposal revision."""
    _require_gold(samples)
    drafts = drafts or {}

    def work(sample: Sample):
        try:
            return _critic_group(engine, sample, drafts.get(sample.id))
        except BackendError as exc:
            log.warning("sample %s skipped: %s", sample.id, exc)
            return None

    with ThreadPoolExecutor(max_workers=engine.cfg.workers) as pool:
        results = list(pool.map(work, samples))
    lines = [line for r in results if r is not None for line in r]
    if out_path is not None:
        write_jsonl(out_path, lines)
    _check_skips(sum(r is None for r in results), len(samples), engine.cfg)
    return lines


# -- mutual refinement schedule ----------------------------------------------


@dataclass(frozen=True)
class Stage:
    name: str
    trains: str
    frozen: str
    samples: int
    batch_file: str


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]

    def to_json(self) -> str:
        return json.dumps({"stages": [asdict(s) for s in self.stages]}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StagePlan":
        return cls(tuple(Stage(**s) for s in json.loads(text)["stages"]))


def mutual_refinement_schedule(cfg: EngineConfig) -> StagePlan:
    """Critic stage (proposal frozen), then proposal stage (critic frozen), per cycle."""
    for role in ("proposal", "critic"):
        if role not in cfg.backends:
            raise MissingEndpoint(f"no backend configured for {role!r}")
    stages = []
    for c in range(1, cfg.refinement_cycles + 1):
        suffix = "" if cfg.refinement_cycles == 1 else f"_c{c}"
        stages.append(Stage(f"critic_rl{suffix}", "critic", "proposal", cfg.critic_stage_samples, f"critic_batch{suffix}.jsonl"))
        stages.append(Stage(f"proposal_rl{suffix}", "proposal", "critic", cfg.proposal_stage_samples, f"proposal_batch{suffix}.jsonl"))
    return StagePlan(tuple(stages))


def wait_for_ready(spec: BackendSpec, timeout_s: float, interval_s: float = 2.0) -> bool:
    """Poll an HTTP backend's model listing until it answers 200."""
    if spec.kind != "http" or timeout_s <= 0:
        return True
    url = spec.base_url.rstrip("/") + "/v1/models"
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            if httpx.get(url, timeout=min(5.0, timeout_s)).status_code == 200:
                return True
        except httpx.HTTPError:
            pass
        if time.monotonic() >= deadline:
            return False
        time.sleep(interval_s)


def execute_plan(
    plan: StagePlan,
    samples: Sequence[Sample],
    cfg: EngineConfig,
    out_dir: str | Path,
    wait: Callable[[Stage], bool] | None = None,
    endpoints: AgentEndpoints | None = None,
) -> list[Path]:
    """Run each stage's batch generator in order, waiting for redeployment in between."""
    out_dir = Path(out_dir)
    written = []
    for n, stage in enumerate(plan.stages):
        if n and wait is not None and not wait(stage):
            raise BackendError(f"frozen {stage.frozen} service not ready before {stage.name}")
        ep = endpoints or AgentEndpoints.from_specs(cfg.backends)
        engine = Engine(ep, cfg)
        subset = list(samples[: stage.samples])
        path = out_dir / stage.batch_file
        if stage.trains == "critic":
            generate_critic_rl_batch(subset, engine, path)
        else:
            generate_proposal_rl_batch(subset, engine, path)
        written.append(path)
    return written

