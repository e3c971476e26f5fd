"""Command-line entry point: ``dcrkit <command> --config c.json [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from dcrkit.backend import BackendError, BackendSpec, make_backend
from dcrkit.config import ConfigError, config_hash, load_config
from dcrkit.core import DcrError, EngineConfig, ValidationError, read_dataset
from dcrkit.grpo import ToyConfig, gradient_check, toy_train
from dcrkit.metrics import evaluate_run
from dcrkit.pipeline import (
    AgentEndpoints,
    Engine,
    execute_plan,
    generate_critic_rl_batch,
    generate_proposal_rl_batch,
    load_drafts,
    mutual_refinement_schedule,
    run_dcr_dataset,
    wait_for_ready,
)
from dcrkit.synthesis import synthesize_corpus

log = logging.getLogger("dcrkit")

COMMANDS = (
    "synthesize", "draft", "dcr", "rl-batch-proposal", "rl-batch-critic",
    "schedule", "toy-grpo-check", "toy-grpo-train", "eval",
)
GRAD_TOLERANCE = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default; usage errors are 1 here
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcrkit", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, help="root seed (overrides config)")
    p.add_argument("--out", default="runs", help="parent directory for run directories")
    p.add_argument("--rounds", type=int, help="critique/revise rounds for dcr")
    p.add_argument("--template", choices=("dynamic", "fixed", "generic"), help="drafting prompt")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--results", help="DCR results file for eval")
    p.add_argument("--round", dest="round_selector", help="eval row: draft, final or a round number")
    p.add_argument("--execute", action="store_true", help="schedule: run the stages, not just plan them")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    path = Path(value)
    return str(path if path.is_absolute() else base / path)


def _resolve_paths(data: dict[str, Any], base: Path) -> dict[str, Any]:
    for key in ("data", "drafts_file", "prompt_dir"):
        if isinstance(data.get(key), str):
            data[key] = _resolve(base, data[key])
    for spec in data.get("backends", {}).values():
        if isinstance(spec, dict) and isinstance(spec.get("script"), str):
            spec["script"] = _resolve(base, spec["script"])
    return data


class Run:
    """A run directory with a manifest written before any work starts."""

    def __init__(self, command: str, out: str, seed: int, cfg_data: dict[str, Any]) -> None:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        base = Path(out) / f"{command}-{stamp}-s{seed}"
        path, n = base, 1
        while path.exists():
            n += 1
            path = base.with_name(f"{base.name}-{n}")
        path.mkdir(parents=True)
        self.dir = path
        self.manifest: dict[str, Any] = {
            "command": command,
            "seed": seed,
            "config_hash": config_hash(cfg_data),
            "config": cfg_data,
            "inputs": [],
            "outputs": [],
            "started_at": datetime.now(timezone.utc).isoformat(),
            "status": "running",
        }
        self.save()

    def add_input(self, path: str | None) -> None:
        if path:
            self.manifest["inputs"].append(path)
            self.save()

    def output(self, name: str) -> Path:
        self.manifest["outputs"].append(name)
        return self.dir / name

    def save(self) -> None:
        (self.dir / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finish(self, status: str) -> None:
        self.manifest["status"] = status
        self.manifest["finished_at"] = datetime.now(timezone.utc).isoformat()
        self.save()


def _samples(cfg: EngineConfig, run: Run):
    if not cfg.data:
        raise ConfigError("config has no 'data' dataset path")
    run.add_input(cfg.data)
    return read_dataset(cfg.data)


def _write_report(run: Run, results: Path) -> str:
    report = evaluate_run(results)
    run.output("report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    text = report.to_text()
    run.output("report.txt").write_text(text + "\n", encoding="utf-8")
    return text


def _dispatch(args: argparse.Namespace, cfg: EngineConfig, run: Run) -> int:
    cmd = args.command
    if cmd == "synthesize":
        specs = cfg.backends
        if "teacher" not in specs:
            raise ConfigError("synthesize needs a 'teacher' backend")
        teacher = make_backend(BackendSpec.from_dict(specs["teacher"]))
        critic = make_backend(BackendSpec.from_dict(specs["critic"])) if "critic" in specs else None
        samples = _samples(cfg, run)
        for name in ("drafts.jsonl", "triples.jsonl", "discards.jsonl", "stats.json"):
            run.output(name)
        run.save()
        stats = synthesize_corpus(samples, teacher, critic, cfg, run.dir)
        print(json.dumps(stats["corpus"], sort_keys=True))
    elif cmd in ("draft", "dcr"):
        engine = Engine(AgentEndpoints.from_specs(cfg.backends), cfg)
        samples = _samples(cfg, run)
        rounds = 0 if cmd == "draft" else (args.rounds if args.rounds is not None else cfg.revision_rounds)
        results = run.output("results.jsonl")
        run.save()
        run_dcr_dataset(engine, samples, rounds, results)
        if all(s.gold is not None for s in samples):
            print(_write_report(run, results))
    elif cmd == "rl-batch-proposal":
        engine = Engine(AgentEndpoints.from_specs(cfg.backends), cfg)
        samples = _samples(cfg, run)
        out = run.output("proposal_batch.jsonl")
        run.save()
        groups = generate_proposal_rl_batch(samples, engine, out)
        print(f"{len(groups)} groups -> {out}")
    elif cmd == "rl-batch-critic":
        engine = Engine(AgentEndpoints.from_specs(cfg.backends), cfg)
        samples = _samples(cfg, run)
        drafts = None
        if cfg.drafts_file:
            run.add_input(cfg.drafts_file)
            drafts = load_drafts(cfg.drafts_file)
        out = run.output("critic_batch.jsonl")
        run.save()
        lines = generate_critic_rl_batch(samples, engine, out, drafts)
        print(f"{len(lines)} critic records -> {out}")
    elif cmd == "schedule":
        plan = mutual_refinement_schedule(cfg)
        run.output("plan.json").write_text(plan.to_json() + "\n", encoding="utf-8")
        run.save()
        print(plan.to_json())
        if args.execute:
            samples = _samples(cfg, run)

            def wait(stage) -> bool:
                spec = BackendSpec.from_dict(cfg.backends[stage.frozen])
                return wait_for_ready(spec, cfg.readiness_timeout_s)

            for stage in plan.stages:
                run.output(stage.batch_file)
            run.save()
            execute_plan(plan, samples, cfg, run.dir, wait)
    elif cmd == "toy-grpo-check":
        err = gradient_check(range(20), 1e-5)
        ok = err < GRAD_TOLERANCE
        run.output("grad_check.json").write_text(
            json.dumps({"max_relative_error": err, "tolerance": GRAD_TOLERANCE, "pass": ok}) + "\n", encoding="utf-8"
        )
        print(f"max relative gradient error: {err:.3e} ({'pass' if ok else 'FAIL'})")
        return 0 if ok else 2
    elif cmd == "toy-grpo-train":
        tcfg = ToyConfig.from_engine(cfg)
        trace = toy_train(tcfg, cfg.seed)
        trace.write_csv(run.output("trace.csv"))
        print(f"mean draft reward {trace.mean_draft_reward[0]:.4f} -> {trace.mean_draft_reward[-1]:.4f}")
    elif cmd == "eval":
        if not args.results:
            raise UsageError("eval needs --results")
        run.add_input(args.results)
        selector = args.round_selector
        if selector is not None and selector.isdigit():
            selector = int(selector)
        report = evaluate_run(args.results, selector)
        run.output("report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
        run.output("report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
        print(report.to_text())
    return 0


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"dcrkit: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.template is not None:
            overrides.append(f"template={json.dumps(args.template)}")
        cfg, data = load_config(args.config, overrides)
        data = _resolve_paths(data, Path(args.config).resolve().parent)
        cfg = dataclasses.replace(cfg, **{k: data[k] for k in ("data", "drafts_file", "prompt_dir", "backends") if k in data})
        if args.rounds is not None and not 0 <= args.rounds <= cfg.max_revision_rounds:
            raise UsageError(f"--rounds must lie in [0, {cfg.max_revision_rounds}]")
    except FileNotFoundError as exc:
        print(f"dcrkit: error: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ValidationError, ConfigError) as exc:
        print(f"dcrkit: error: {exc}", file=sys.stderr)
        return 1
    run_ = Run(args.command, args.out, cfg.seed, data)
    try:
        code = _dispatch(args, cfg, run_)
    except (UsageError, ValidationError) as exc:
        run_.finish("usage_error")
        print(f"dcrkit: error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except (BackendError, DcrError, OSError, ValueError) as exc:
        run_.finish("failed")
        print(f"dcrkit: error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    run_.finish("ok" if code == 0 else "failed")
    print(f"run directory: {run_.dir}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
