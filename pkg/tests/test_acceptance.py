"""Acceptance suite: one test per acceptance criterion, at its pinned tolerance.

Each test prints a single ``ACCEPTANCE <n> PASS`` line with its wall-clock
time (run with ``pytest -s tests/test_acceptance.py`` to see them live) and
asserts the stated runtime budget. Everything here runs on table LMs only; no
secondary component is involved.
"""

import json
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.special import softmax
from scipy.stats import ks_2samp

from gumbelcf import kernels
from gumbelcf.cli import EXIT_OK, main
from gumbelcf.engine import generate, generate_with_noise
from gumbelcf.gumbel import standard_gumbel_from_uniform, uniform_open
from gumbelcf.hindsight import infer_posterior_noise, paired_samples_many
from gumbelcf.interventions import LogitBias, apply_intervention
from gumbelcf.metrics import normalized_lcp, token_log_ratio
from gumbelcf.oracle import (
    CONTRAST_OBSERVED,
    CONTRAST_ORDERINGS,
    CONTRAST_PHI,
    CONTRAST_PHI_CF,
    check_counterfactual_stability,
    empirical_distribution,
    enumerate_distribution,
    find_inverse_cdf_witness,
    inverse_cdf_counterfactual,
    tv_distance,
)

from conftest import random_table_lm


@contextmanager
def criterion(num: int, description: str, budget_s: float):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    print(f"ACCEPTANCE {num} PASS ({description}): {elapsed:.1f}s of {budget_s:.0f}s budget")
    assert elapsed < budget_s, f"criterion {num} exceeded its {budget_s}s budget ({elapsed:.1f}s)"


def test_criterion_1_gumbel_max_correctness():
    """Argmax of logits + Gumbel noise samples the softmax: TV < 0.01."""
    with criterion(1, "Gumbel-max correctness", 30):
        rng = np.random.default_rng(1001)
        n = 100_000
        for case in range(20):
            width = 2 + case % 9  # vocabulary sizes 2..10
            phi = rng.normal(size=width) * 1.5
            noise = standard_gumbel_from_uniform(uniform_open(rng, (n, width)))
            picks = np.argmax(phi[None, :] + noise, axis=1)
            emp = np.bincount(picks, minlength=width) / n
            tv = 0.5 * np.abs(emp - softmax(phi)).sum()
            assert tv < 0.01, f"case {case}: TV {tv:.4f}"


def test_criterion_2_sequence_distributional_equivalence():
    """generate() matches exact chain-rule enumeration: TV < 0.02."""
    with criterion(2, "sequence-level equivalence", 120):
        lm_rng = np.random.default_rng(1002)
        n = 200_000
        for case in range(10):
            lm = random_table_lm(lm_rng, vocab_size=3, order=2)
            exact = enumerate_distribution(lm, [], 3)
            counts: dict[tuple, float] = {}
            sample_rng = np.random.default_rng(2000 + case)
            for _ in range(n):
                seq = tuple(generate(lm, [], 3, sample_rng).tokens)
                counts[seq] = counts.get(seq, 0.0) + 1.0
            emp = {seq: c / n for seq, c in counts.items()}
            tv = tv_distance(emp, exact.entries)
            assert tv < 0.02, f"table {case}: TV {tv:.4f}"


def test_criterion_3_replay_identity():
    """10^4 hindsight inferences regenerate the observed string exactly."""
    with criterion(3, "replay identity", 60):
        lm_rng = np.random.default_rng(1003)
        run_rng = np.random.default_rng(3001)
        hits = 0
        trials = 10_000
        for case in range(5):
            lm = random_table_lm(lm_rng, vocab_size=4, order=2)
            for _ in range(trials // 5):
                gen = generate(lm, [0], 5, run_rng)
                post = infer_posterior_noise(lm, [0], gen.tokens, run_rng)
                hits += generate_with_noise(lm, [0], post, len(gen.tokens)) == gen.tokens
        assert hits == trials, f"replay failed on {trials - hits} of {trials}"


def test_criterion_4_posterior_correctness():
    """Hindsight sampler vs rejection-sampling oracle: per-entry KS < 0.015."""
    with criterion(4, "posterior correctness", 120):
        n = 100_000
        rng = np.random.default_rng(1004)
        cases = [
            np.array([0.0, 0.0]),
            np.array([0.4, -0.4, 0.1]),
            np.array([0.6, -0.2, 0.3, -0.5]),
        ]
        for phi in cases:
            width = phi.shape[0]
            observed = int(np.argmax(softmax(phi)))  # keeps rejection cheap
            accept = softmax(phi)[observed]
            draws = standard_gumbel_from_uniform(
                uniform_open(rng, (int(n / accept * 1.3), width))
            )
            kept = draws[np.argmax(phi[None, :] + draws, axis=1) == observed][:n]
            assert kept.shape[0] == n
            hs = kernels.posterior_rows(
                np.broadcast_to(phi, (n, width)),
                np.full(n, observed, dtype=np.int64),
                uniform_open(rng, (n, width)),
            )
            for j in range(width):
                stat = ks_2samp(hs[:, j], kept[:, j]).statistic
                assert stat < 0.015, f"vocab {width}, entry {j}: KS {stat:.4f}"


def test_criterion_5_counterfactual_marginal_law():
    """Averaged counterfactuals equal the intervened model's distribution."""
    with criterion(5, "counterfactual marginal law", 180):
        lm_rng = np.random.default_rng(1005)
        lm = random_table_lm(lm_rng, vocab_size=3, order=2)
        cf = apply_intervention(lm, LogitBias({"s0": 0.9, "s1": -0.6}))
        exact = enumerate_distribution(cf, [], 3)
        _, _, cf_tokens, cf_lengths = paired_samples_many(
            lm, cf, [], 200_000, 3, np.random.default_rng(5001)
        )
        emp = empirical_distribution(cf_tokens, cf_lengths)
        tv = tv_distance(emp, exact.entries)
        assert tv < 0.02, f"TV {tv:.4f}"


def test_criterion_6_counterfactual_stability_and_contrast():
    """Gumbel-max: zero violations in 10^6 trials; inverse-CDF violates."""
    with criterion(6, "stability + inverse-CDF contrast", 120):
        pair_rng = np.random.default_rng(1006)
        trial_rng = np.random.default_rng(6001)
        violations = 0
        for _ in range(10):
            phi = pair_rng.normal(size=5) * 2.0
            phi_cf = pair_rng.normal(size=5) * 2.0
            violations += check_counterfactual_stability(phi, phi_cf, 100_000, trial_rng)
        assert violations == 0, f"{violations} stability violations"

        witness = find_inverse_cdf_witness(np.random.default_rng(6002))
        assert witness is not None and witness["violation_probability"] > 0

        n = 100_000
        counts = []
        for ordering in CONTRAST_ORDERINGS:
            draws = np.array([
                inverse_cdf_counterfactual(
                    CONTRAST_PHI, CONTRAST_PHI_CF, CONTRAST_OBSERVED, ordering, trial_rng
                )
                for _ in range(n)
            ])
            counts.append(np.bincount(draws, minlength=3) / n)
        ordering_tv = 0.5 * np.abs(counts[0] - counts[1]).sum()
        assert ordering_tv > 0.05, f"ordering sensitivity TV {ordering_tv:.4f}"


def test_criterion_7_metric_correctness():
    """LCP hand cases exact; log-ratio identities exact to 1e-12."""
    with criterion(7, "metric correctness", 30):
        assert normalized_lcp([0, 1, 2], [0, 1, 3]) == pytest.approx(2 / 3, abs=0)
        assert normalized_lcp([0, 1, 2], [0, 1, 2]) == 1.0
        assert normalized_lcp([0, 1], [1, 0]) == 0.0

        lm = random_table_lm(np.random.default_rng(1007), vocab_size=4, order=2)
        biased = apply_intervention(lm, LogitBias({"s2": 0.8}))
        shifted = apply_intervention(lm, LogitBias({s: 2.5 for s in lm.vocabulary.symbols}))
        tokens = [2, 0, 1, 3]
        identity = token_log_ratio(lm, lm, [1], tokens)
        np.testing.assert_allclose(identity, 0.0, atol=1e-12)
        ab = token_log_ratio(lm, biased, [1], tokens)
        ba = token_log_ratio(biased, lm, [1], tokens)
        np.testing.assert_allclose(ab, -ba, atol=1e-12)
        np.testing.assert_allclose(token_log_ratio(lm, shifted, [1], tokens), 0.0, atol=1e-12)


def test_criterion_8_end_to_end_reproducibility(tmp_path):
    """fit-table -> generate 500 -> counterfactual -> eval, byte-identical."""
    with criterion(8, "end-to-end reproducibility", 120):
        rng = np.random.default_rng(1008)
        vocab = ["w0", "w1", "w2", "w3", "<eos>"]
        (tmp_path / "vocab.json").write_text(json.dumps(vocab))
        with open(tmp_path / "corpus.jsonl", "w") as fh:
            for _ in range(400):
                toks = rng.integers(0, 4, size=int(rng.integers(3, 9))).tolist()
                fh.write(json.dumps({"tokens": toks}) + "\n")
        with open(tmp_path / "prompts.jsonl", "w") as fh:
            for _ in range(500):
                fh.write(json.dumps({"prompt_tokens": rng.integers(0, 4, size=2).tolist()}) + "\n")
        (tmp_path / "bias.json").write_text(
            json.dumps({"kind": "logit_bias", "bias": {"w1": 1.2, "w3": -0.8}})
        )

        def run(name: str):
            work = tmp_path / name
            work.mkdir()
            cwd = os.getcwd()
            os.chdir(work)  # identical relative paths => identical config hashes
            try:
                assert main(["fit-table", "--corpus", "../corpus.jsonl", "--vocab", "../vocab.json",
                             "--eos", "<eos>", "--order", "2", "--out", "table.json"]) == EXIT_OK
                assert main(["generate", "--original", "table.json", "--prompts", "../prompts.jsonl",
                             "--max-len", "25", "--seed", "77", "--out", "gen"]) == EXIT_OK
                assert main(["counterfactual", "--original", "table.json",
                             "--intervention", "../bias.json",
                             "--prompts", "gen/generations.jsonl", "--max-len", "25",
                             "--seed", "77", "--out", "cf"]) == EXIT_OK
                assert main(["eval", "--pairs", "cf/pairs.jsonl", "--original", "table.json",
                             "--intervention", "../bias.json", "--seed", "77",
                             "--out", "ev", "--csv"]) == EXIT_OK
            finally:
                os.chdir(cwd)
            return work

        a, b = run("runA"), run("runB")
        compared = 0
        for rel in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), f"{rel} differs"
            compared += 1
        assert compared >= 1003  # table + 2 jsonl + report + csv + 2*500 noise files
        report = json.loads((a / "ev" / "report.json").read_text())
        assert report["n"] == 500
