"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7-10 share a single deterministic ablation over the default world
(four arms x five seeds x 2000 steps), run once as a module fixture.
"""

import json
import time

import numpy as np
import pytest

from ltdr.autodiff import Tensor, matmul, softmax_rows, variance_rows
from ltdr.balancing import (
    TailSelectorConfig,
    classify_vision_tokens,
    load_balancing_loss,
    modality_balancing_loss,
)
from ltdr.cli import main
from ltdr.config import config_from_dict
from ltdr.gradcheck import run_gradcheck
from ltdr.moe import ExpertEnsemble, MoEConfig, Router, moe_forward, select_topk
from ltdr.train import ablation_suite

ABLATION_TIME_BUDGET_S = 600.0


def report(criterion: int, passed: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion:2d} {'PASS' if passed else 'FAIL'}: {detail}")


@pytest.fixture(scope="module")
def ablation():
    """Default-world ablation: arms {baseline, DAR, EEA, LTDR} x seeds 0-4,
    2000 steps each. Deterministic; shared by criteria 7-10."""
    base = config_from_dict({})
    assert base.steps == 2000 and list(base.seeds) == [0, 1, 2, 3, 4]
    t0 = time.perf_counter()
    rows = ablation_suite(base, workers=2)
    wall = time.perf_counter() - t0
    assert all(r["status"] == "ok" for r in rows)
    return rows, wall


def median_of(rows, arm, field):
    return float(np.median([r[field] for r in rows if r["arm"] == arm]))


class TestCriterion1Gradients:
    def test_gradcheck_suite(self):
        result = run_gradcheck(seed=0)
        detail = (
            f"worst rel err {result.worst_error:.2e} (< 1e-4) over "
            f"{len(result.block_errors)} objective/block pairs in {result.runtime_s:.1f}s"
        )
        ok = result.worst_error < 1e-4 and result.runtime_s < 10.0 and result.passed
        report(1, ok, detail)
        assert result.worst_error < 1e-4
        assert result.runtime_s < 10.0
        assert result.passed


class TestCriterion2ModalityExactness:
    def test_vision_gradient_exactly_zero(self):
        rng = np.random.default_rng(7)
        tokens = Tensor(rng.standard_normal((40, 32)))
        weight = Tensor(rng.standard_normal((32, 4)) * 0.2, requires_grad=True)
        logits = matmul(tokens, weight)
        probs = softmax_rows(logits)
        selected = np.argsort(-probs.data, axis=1, kind="stable")[:, :2]
        language = np.zeros(40, dtype=bool)
        language[30:] = True
        loss = modality_balancing_loss(probs, selected, language)
        loss.backward()
        vision_block = logits.grad[~language]
        language_block = logits.grad[language]
        ok = bool(np.all(vision_block == 0.0) and np.any(language_block != 0.0))
        report(
            2,
            ok,
            f"vision-logit grad max |g| = {np.abs(vision_block).max():.1f} (exact 0), "
            f"language-logit grad max |g| = {np.abs(language_block).max():.2e} (nonzero)",
        )
        assert np.all(vision_block == 0.0)
        assert np.any(language_block != 0.0)


class TestCriterion3BalancingFloor:
    def test_uniform_probs_floor(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for m, k in [(1, 4), (5, 2), (64, 4), (33, 8), (7, 3)]:
            probs = Tensor(np.full((m, k), 1.0 / k))
            for _ in range(4):
                selections = [
                    sorted(rng.choice(k, size=rng.integers(1, k + 1), replace=False))
                    for _ in range(m)
                ]
                loss = load_balancing_loss(probs, selections)
                worst = max(worst, abs(loss.item() - 1.0))
        report(3, worst < 1e-12, f"uniform-probability loss within {worst:.2e} of 1.0")
        assert worst < 1e-12


class TestCriterion4RpvExactness:
    @pytest.mark.parametrize("k", [2, 4, 8])
    def test_one_hot_and_uniform(self, k):
        one_hot = np.zeros((k, k))
        one_hot[np.arange(k), np.arange(k)] = 1.0
        got = variance_rows(Tensor(one_hot)).data
        expected = (k - 1) / k**2
        uniform = variance_rows(Tensor(np.full((3, k), 1.0 / k))).data
        ok = bool(np.all(got == expected) and np.all(uniform == 0.0))
        report(
            4,
            ok,
            f"K={k}: one-hot RPV == {expected} exactly, uniform RPV == 0 exactly",
        )
        assert np.all(got == expected)
        assert np.all(uniform == 0.0)


class TestCriterion5TailMechanics:
    def test_equal_rpvs_select_nothing(self):
        probs = np.tile([[0.4, 0.3, 0.2, 0.1]], (20, 1))
        vision = np.ones(20, dtype=bool)
        flags = classify_vision_tokens(probs, vision, TailSelectorConfig("vtt"))
        report(5, not flags.any(), f"all-equal RPVs select {int(flags.sum())} tail tokens")
        assert not flags.any()

    def test_generic_batch_widths_and_partition(self):
        rng = np.random.default_rng(11)
        d, m = 32, 60
        ensemble = ExpertEnsemble.init(d, 8, 4, rng)
        router = Router.init(d, 4, rng, scale=0.6)
        tokens = Tensor(rng.standard_normal((m, d)))
        language = np.zeros(m, dtype=bool)
        language[48:] = True
        cfg = MoEConfig(n_experts=4, top_k=2, tail_experts=4, selector="vtt")
        probs = softmax_rows(matmul(tokens, router.weight))
        vtt = classify_vision_tokens(probs.data, ~language, TailSelectorConfig("vtt"))
        vht = classify_vision_tokens(probs.data, ~language, TailSelectorConfig("vht"))
        assert vtt.any(), "generic batch must produce tail tokens"
        _, ro = moe_forward(tokens, router, ensemble, cfg, language, vtt, probs=probs)
        lengths = np.array([len(s) for s in ro.selection])
        widths_ok = bool(
            np.all(lengths[vtt] == 4) and np.all(lengths[~vtt] == 2)
        )
        partition_ok = bool(np.all((vtt | vht) == ~language) and not (vtt & vht).any())
        report(
            5,
            widths_ok and partition_ok,
            f"{int(vtt.sum())} tail tokens at width 4, others at 2; VTT/VHT partition vision",
        )
        assert widths_ok
        assert partition_ok


class TestCriterion6DispatchOracle:
    def test_thousand_rows(self):
        rng = np.random.default_rng(42)
        mismatches = 0
        for _ in range(1000):
            k = int(rng.integers(2, 9))
            row = rng.random(k)
            if rng.random() < 0.25:
                row[rng.integers(0, k)] = row[rng.integers(0, k)]
            count = int(rng.integers(1, k + 1))
            oracle = sorted(range(k), key=lambda j: (-row[j], j))[:count]
            if select_topk(row, count) != oracle:
                mismatches += 1
        report(6, mismatches == 0, f"{mismatches} mismatches vs full-sort prefix in 1000 rows")
        assert mismatches == 0


class TestCriterion7DirectionalAblation:
    def test_tail_accuracy_ordering(self, ablation):
        rows, wall = ablation
        med = {arm: median_of(rows, arm, "acc_tail") for arm in ("baseline", "DAR", "EEA", "LTDR")}
        checks = [
            ("LTDR >= DAR", med["LTDR"] >= med["DAR"]),
            ("DAR >= baseline", med["DAR"] >= med["baseline"]),
            ("LTDR >= EEA", med["LTDR"] >= med["EEA"]),
            ("EEA >= baseline", med["EEA"] >= med["baseline"]),
        ]
        ok = all(c for _, c in checks)
        detail = (
            "median tail acc "
            + " ".join(f"{arm}={med[arm]:.4f}" for arm in ("baseline", "DAR", "EEA", "LTDR"))
            + "; "
            + ", ".join(f"{name}:{'ok' if c else 'VIOLATED'}" for name, c in checks)
        )
        report(7, ok, detail)
        for name, c in checks:
            assert c, f"tail-accuracy ordering violated: {name} ({detail})"

    def test_suite_runtime(self, ablation):
        _, wall = ablation
        report(7, wall < ABLATION_TIME_BUDGET_S, f"ablation wall time {wall/60:.1f} min (< 10 min)")
        assert wall < ABLATION_TIME_BUDGET_S


class TestCriterion8RpvShift:
    def test_vision_rpv_rises_language_stable(self, ablation):
        rows, _ = ablation
        dar = median_of(rows, "DAR", "mean_rpv_vision")
        base = median_of(rows, "baseline", "mean_rpv_vision")
        dar_lang = median_of(rows, "DAR", "mean_rpv_language")
        base_lang = median_of(rows, "baseline", "mean_rpv_language")
        rel_change = abs(dar_lang - base_lang) / base_lang
        vision_ok = dar > base
        lang_ok = rel_change < 0.25
        report(
            8,
            vision_ok and lang_ok,
            f"median vision RPV: DAR {dar:.4f} vs baseline {base:.4f} "
            f"({'up' if vision_ok else 'NOT up'}); language RPV rel change {rel_change:.1%} (< 25%)",
        )
        assert lang_ok, f"language RPV changed {rel_change:.1%} between arms"
        assert vision_ok, f"DAR vision RPV {dar:.4f} does not exceed baseline {base:.4f}"


class TestCriterion9ExpertLoading:
    BALANCED_ARMS = ("baseline", "DAR", "EEA", "LTDR")

    def test_language_loading_balanced(self, ablation):
        rows, _ = ablation
        offenders = [
            (r["arm"], r["seed"], r["language_load_ratio_pooled"])
            for r in rows
            if r["arm"] in self.BALANCED_ARMS and r["language_load_ratio_pooled"] >= 2.0
        ]
        worst = max(
            r["language_load_ratio_pooled"] for r in rows if r["arm"] in self.BALANCED_ARMS
        )
        report(
            9,
            not offenders,
            f"language max/min load ratio (pooled layers) worst {worst:.2f}; "
            + (f"{len(offenders)} cells >= 2.0: {offenders[:4]}" if offenders else "all < 2.0"),
        )
        assert not offenders, f"language loading skewed beyond 2.0: {offenders}"

    def test_dar_vision_loading_long_tailed(self, ablation):
        rows, _ = ablation
        vis = median_of(rows, "DAR", "vision_load_ratio_pooled")
        lang = median_of(rows, "DAR", "language_load_ratio_pooled")
        ok = vis > lang
        report(
            9,
            ok,
            f"DAR median load ratios: vision {vis:.2f} vs language {lang:.2f} "
            f"({'long-tailed vision loading emerges' if ok else 'NOT exceeding'})",
        )
        assert ok


class TestCriterion10TailFraction:
    def test_reported_and_bounded(self, ablation):
        rows, _ = ablation
        fractions = [(r["arm"], r["seed"], r["tail_fraction"]) for r in rows]
        bad = [(a, s, f) for a, s, f in fractions if not (0.0 < f < 0.5)]
        lo = min(f for _, _, f in fractions)
        hi = max(f for _, _, f in fractions)
        report(
            10,
            not bad,
            f"tail fraction reported for all {len(fractions)} runs, range [{lo:.3f}, {hi:.3f}]; "
            + (f"{len(bad)} outside (0, 0.5): {bad[:4]}" if bad else "all inside (0, 0.5)"),
        )
        assert not bad, f"tail fractions outside (0, 0.5): {bad}"


class TestCriterion11Determinism:
    CONFIG = {
        "steps": 25,
        "eval_batches": 3,
        "world": {"vision_tokens": 64, "language_tokens": 16},
    }

    def test_train_rerun_byte_identical(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(self.CONFIG))
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(path), "--out", str(out1)]) == 0
        assert main(["train", "--config", str(path), "--out", str(out2)]) == 0

        def strip_wall_clock(p):
            lines = p.read_text().split("\n")
            return ["," .join(line.split(",")[:3]) for line in lines]

        identical = {
            "router_log.jsonl": (out1 / "router_log.jsonl").read_bytes()
            == (out2 / "router_log.jsonl").read_bytes(),
            "trace.csv (excl. wall-clock column)": strip_wall_clock(out1 / "trace.csv")
            == strip_wall_clock(out2 / "trace.csv"),
        }
        for name in ("expert_load.csv", "rpv_histogram.csv", "rpv_summary.csv", "specialization.csv", "accuracy.csv"):
            identical[f"stats/{name}"] = (out1 / "stats" / name).read_bytes() == (
                out2 / "stats" / name
            ).read_bytes()
        ok = all(identical.values())
        report(
            11,
            ok,
            "rerun byte-identical: "
            + ", ".join(f"{k}={'yes' if v else 'NO'}" for k, v in identical.items()),
        )
        assert ok, identical
