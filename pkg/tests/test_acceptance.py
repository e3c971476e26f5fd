"""Acceptance criteria. Each test records one PASS/FAIL line, printed in the session summary."""

import itertools
import json
import math
import shutil
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from conftest import completion
from dcrkit.backend import ChatMessage, DecodeParams, HttpBackend, HttpStatus, ImageRef, ScriptedBackend
from dcrkit.backend.base import BackendSpec
from dcrkit.cli import run as cli_run
from dcrkit.core import EngineConfig, Label, NextAction, Prediction, RoleStep, Sample, Trajectory
from dcrkit.grpo import TokenSequence, ToyConfig, clipped_surrogate, group_advantages, kl_k3, toy_train
from dcrkit.grpo.toy import finite_difference_grad, max_relative_error, random_check_problem, toy_dual_stage_grad
from dcrkit.metrics import Confusion, pct, prf1
from dcrkit.rewards import actionability_reward, improvement_reward, score_alignment_reward
from dcrkit.structio import flatten_trajectory, parse_critique, parse_reasoning
from dcrkit.synthesis import run_rollout
from fakes import step
from oracles import ALIGNMENT_TABLE, IMPROVEMENT_TABLE, pred

RESULTS: list[str] = []
DEMO = Path(__file__).resolve().parent.parent / "demo"


def record(n, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {name} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_01_reward_truth_tables():
    t0 = time.perf_counter()
    mismatches = 0
    for d, r, g in itertools.product(("yes", "no", "invalid"), ("yes", "no", "invalid"), ("yes", "no")):
        want = IMPROVEMENT_TABLE[(d, r, g)]
        mismatches += improvement_reward(pred(d), pred(r), Label(g)) != want
        mismatches += actionability_reward(pred(d), pred(r), Label(g)) != want
    for (s, correct), want in ALIGNMENT_TABLE.items():
        p = Prediction.valid(Label.SARCASTIC if correct else Label.NOT_SARCASTIC)
        mismatches += score_alignment_reward(s, p, Label.SARCASTIC) != want
    dt = time.perf_counter() - t0
    record(1, "reward truth tables", mismatches == 0 and dt < 1.0, f"{mismatches} mismatches over 36+6 cases, {dt:.3f}s")


def test_02_advantage_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_mean, shift_ok = 0.0, True
    for _ in range(1000):
        size = int(rng.integers(2, 65))
        rewards = (rng.integers(-2, 7, size) * 0.5).tolist()  # composite rewards move in half steps
        adv = group_advantages(rewards)
        if adv.std > 0:
            worst_mean = max(worst_mean, abs(sum(adv.values) / size))
        c = float(rng.integers(-8, 9)) * 0.25
        shift_ok &= group_advantages([x + c for x in rewards]).values == adv.values
    const = group_advantages([2, 2, 2]).values == (0.0, 0.0, 0.0)
    mpmath.mp.dps = 50
    r = [mpmath.mpf(v) for v in (1, 2, 3)]
    mu = sum(r) / 3
    sd = mpmath.sqrt(sum((x - mu) ** 2 for x in r) / 3)
    oracle = [float((x - mu) / (sd + mpmath.mpf("1e-4"))) for x in r]
    err = max(abs(a - b) for a, b in zip(group_advantages([1, 2, 3], 1e-4).values, oracle))
    dt = time.perf_counter() - t0
    ok = worst_mean <= 1e-9 and shift_ok and const and err <= 1e-12 and dt < 5.0
    record(2, "advantage properties", ok,
           f"max |mean| {worst_mean:.1e}, shift exact {shift_ok}, [1,2,3] err {err:.1e}, {dt:.2f}s")


def one(new, old, ref=None):
    return TokenSequence(np.array([new]), np.array([old]), None if ref is None else np.array([ref]))


def test_03_objective_correctness():
    cases = [
        (clipped_surrogate(one(0.0, 0.0), 1.0, 0.2, 0.0), -1.0),
        (clipped_surrogate(one(math.log(1.5), 0.0), 1.0, 0.2, 0.0), -1.2),
        (clipped_surrogate(one(math.log(0.5), 0.0), -1.0, 0.2, 0.0), 0.8),
    ]
    err = max(abs(a - b) for a, b in cases)
    rng = np.random.default_rng(3)
    old = rng.normal(-2, 0.5, 50)
    seq = TokenSequence(old + rng.uniform(-0.15, 0.15, 50), old)
    unclipped = -float(np.mean(np.exp(seq.new_logps - seq.old_logps) * 0.7))
    inactive_err = abs(clipped_surrogate(seq, 0.7, 0.2) - unclipped)
    same = TokenSequence(old, old + 0.1, old)
    kl_zero = bool(np.all(kl_k3(same) == 0.0)) and clipped_surrogate(same, 1.0, 0.2, 0.02) == clipped_surrogate(same, 1.0, 0.2, 0.0)
    ok = err <= 1e-12 and inactive_err <= 1e-12 and kl_zero
    record(3, "clipped objective", ok, f"hand-case err {err:.1e}, clip-inactive err {inactive_err:.1e}, KL zero {kl_zero}")


def test_04_gradient_check():
    toy_dual_stage_grad(*random_check_problem(0))  # compile kernels outside the timed region
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        policy, batch, cfg = random_check_problem(seed)
        worst = max(worst, max_relative_error(toy_dual_stage_grad(policy, batch, cfg),
                                              finite_difference_grad(policy, batch, cfg, 1e-5)))
    dt = time.perf_counter() - t0
    record(4, "gradient check", worst < 1e-5 and dt < 10.0, f"max rel err {worst:.2e} over 20 seeds, {dt:.2f}s")


def test_05_desk_scale_learning():
    t0 = time.perf_counter()
    gains = []
    for seed in range(5):
        trace = toy_train(ToyConfig(lam=0.5, iterations=500), seed)
        gains.append(trace.mean_draft_reward[-1] - trace.mean_draft_reward[0])
    dt = time.perf_counter() - t0
    wins = sum(g >= 0.5 for g in gains)
    record(5, "toy learning", wins >= 4 and dt < 60.0,
           f"gains {', '.join(f'{g:.4f}' for g in gains)}; {wins}/5 seeds >= 0.5, {dt:.1f}s")


def test_06_metrics_fixture():
    rows = {
        "revise": ((949, 298, 88, 1074), (83.1, 84.0, 76.1, 91.5)),
        "draft": ((906, 291, 131, 1081), (81.1, 82.5, 75.7, 87.4)),
    }
    worst = 0.0
    for counts, want in rows.values():
        s = prf1(Confusion(*counts))
        got = (pct(s.f1), pct(s.acc), pct(s.p), pct(s.r))
        worst = max(worst, *(abs(a - b) for a, b in zip(got, want)))
    record(6, "metrics fixture", worst <= 0.1 + 1e-9, f"max deviation {worst:.2f} pp")


def random_words(rng, k):
    alphabet = list("abcdefghijklmnopqrstuvwxyz{}[]\":,.!?#<>/ éü漢") + ["\n"]
    out = "".join(rng.choice(alphabet, size=k)).strip()
    for tag in ("<think>", "</think>", "<answer>", "</answer>"):
        out = out.replace(tag, "")
    return out.strip() or "x"


def test_07_round_trip_and_totality():
    rng = np.random.default_rng(7)
    recovered = 0
    for i in range(1000):
        n = int(rng.integers(2, 8))
        steps = [(random_words(rng, int(rng.integers(1, 20))), random_words(rng, int(rng.integers(1, 80)))) for _ in range(n)]
        label = Label.SARCASTIC if rng.random() < 0.5 else Label.NOT_SARCASTIC
        rs = tuple(RoleStep(t, c, NextAction.CONTINUE if j < n - 1 else NextAction.FINAL_ANSWER)
                   for j, (t, c) in enumerate(steps))
        out = parse_reasoning(flatten_trajectory(Trajectory(f"t{i}", rs, Prediction.valid(label))))
        recovered += (out.format_ok and out.prediction.label is label
                      and all(f"Step{j}: {t}\n{c}" in out.think_text for j, (t, c) in enumerate(steps, 1)))
    crashes = 0
    for _ in range(10_000):
        blob = rng.bytes(int(rng.integers(0, 120))).decode("utf-8", errors="replace")
        try:
            r, c = parse_reasoning(blob), parse_critique(blob)
            assert isinstance(r.format_ok, bool) and isinstance(c.format_ok, bool)
        except Exception:
            crashes += 1
    record(7, "round-trip fuzz", recovered == 1000 and crashes == 0,
           f"{recovered}/1000 recovered, {crashes} crashes on 10000 byte strings")


def test_08_pipeline_determinism(tmp_path):
    demo = tmp_path / "demo"
    shutil.copytree(DEMO, demo)
    texts = [f"caption {i}: {'what a lovely traffic jam' if i % 2 else 'kids playing in the park'}" for i in range(20)]
    with open(demo / "data.jsonl", "w") as fh:
        for i, t in enumerate(texts):
            fh.write(json.dumps({"id": f"a{i:02d}", "text": t, "image": f"img/{i}.jpg", "label": "yes" if i % 2 else "no"}) + "\n")
    outs = []
    for name in ("a", "b"):
        code = cli_run(["rl-batch-proposal", "--config", str(demo / "config.json"), "--seed", "11",
                        "--set", "G=8", "--set", "K=2", "--set", "M=4", "--out", str(tmp_path / name)])
        assert code == 0
        (rd,) = (tmp_path / name).iterdir()
        outs.append((rd / "proposal_batch.jsonl").read_bytes())
    lines = [json.loads(x) for x in outs[0].decode().splitlines()]
    counts, groups = {}, {}
    for x in lines:
        counts[(x["sample_id"], x["group"])] = counts.get((x["sample_id"], x["group"]), 0) + 1
        groups.setdefault((x["sample_id"], x["group"], x.get("parent_idx")), []).append(x["advantage"])
    per_sample = all(counts.get((f"a{i:02d}", g)) == 8 for i in range(20) for g in ("draft", "revise"))
    worst = max(abs(sum(v) / len(v)) for v in groups.values())
    ok = outs[0] == outs[1] and per_sample and worst <= 1e-9
    record(8, "pipeline determinism", ok,
           f"identical {outs[0] == outs[1]}, 8+8 lines per sample {per_sample}, max group mean {worst:.1e}")


def test_09_rollout_protocol():
    cfg = EngineConfig(max_steps=6, min_steps=2, parse_retries=2)
    s = Sample("r", "nice", None, Label.SARCASTIC)

    def teacher(*resp, cycle=False):
        return ScriptedBackend({"default": list(resp), "cycle": cycle})

    early = run_rollout(s, teacher(step("a", "yes", "final_answer"), step("b", "yes", "final_answer")), cfg)
    endless = run_rollout(s, teacher(step("a", "hmm"), cycle=True), cfg)
    flaky = run_rollout(s, teacher("{oops", "nothing", step("a", "look"), step("b", "so no", "final_answer")), cfg)

    def shape(t):
        return [x.next_action is NextAction.FINAL_ANSWER for x in t.steps]

    ok = (early.num_steps >= 2 and shape(early) == [False] * (early.num_steps - 1) + [True]
          and endless.num_steps == cfg.max_steps + 1 and shape(endless) == [False] * cfg.max_steps + [True]
          and flaky.num_steps == 2 and flaky.final_answer.label is Label.NOT_SARCASTIC)
    record(9, "rollout protocol", ok,
           f"premature T={early.num_steps}, endless T={endless.num_steps}, recovered T={flaky.num_steps}")


def test_10_http_conformance(stub_server, tmp_path):
    t0 = time.perf_counter()
    img = tmp_path / "x.png"
    img.write_bytes(b"png")
    spec = BackendSpec("http", base_url=stub_server.url, model_name="critic", max_retries=2,
                       backoff_base_s=0.01, backoff_cap_s=0.02, timeout_s=2)
    be = HttpBackend(spec)
    stub_server.queue.append((200, completion("a", "b")))
    be.generate([ChatMessage.user(ImageRef(str(img)), "Text: t")], DecodeParams(max_new_tokens=32, n=2))
    body = stub_server.requests[0]["body"]
    parts = body["messages"][0]["content"]
    schema = (body["model"] == "critic" and body["n"] == 2 and body["max_tokens"] == 32
              and body["messages"][0]["role"] == "user"
              and [p["type"] for p in parts] == ["image_url", "text"]
              and parts[0]["image_url"]["url"].startswith("data:image/png;base64,"))
    stub_server.requests.clear()
    stub_server.default = (500, {"error": "down"})
    try:
        be.generate([ChatMessage.user("q")], DecodeParams())
        capped = False
    except HttpStatus:
        capped = len(stub_server.requests) == 1 + spec.max_retries
    stub_server.requests.clear()
    stub_server.queue += [(500, {}), (500, {}), (200, completion("finally"))]
    recovered = be.generate([ChatMessage.user("q")], DecodeParams()) == ["finally"]
    dt = time.perf_counter() - t0
    record(10, "HTTP conformance", schema and capped and recovered and dt < 5.0,
           f"schema {schema}, retries capped {capped}, 200-after-500s {recovered}, {dt:.2f}s")
