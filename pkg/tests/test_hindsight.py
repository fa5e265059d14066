"""Posterior inference and counterfactual generation.

The two statistical oracles here are independent of the hindsight path:
rejection sampling (draw prior noise, keep draws whose argmax matches the
observation) and exact chain-rule enumeration of the intervened model.
"""

import numpy as np
import pytest
from scipy.stats import ks_2samp, kstest

from gumbelcf.engine import generate, generate_with_noise
from gumbelcf.gumbel import standard_gumbel_from_uniform, uniform_open
from gumbelcf.hindsight import (
    ImpossibleObservation,
    counterfactual,
    infer_posterior_noise,
    joint_sample,
    paired_samples_many,
)
from gumbelcf.interventions import LogitBias, SymbolClamp, TopK, apply_intervention
from gumbelcf.oracle import empirical_distribution, enumerate_distribution, tv_distance
from gumbelcf import kernels

from conftest import random_table_lm


def test_replay_invariant_random_tables():
    rng = np.random.default_rng(30)
    for _ in range(5):
        lm = random_table_lm(rng, vocab_size=4, order=2)
        for _ in range(400):
            gen = generate(lm, [0], 5, rng)
            post = infer_posterior_noise(lm, [0], gen.tokens, rng)
            assert generate_with_noise(lm, [0], post, len(gen.tokens)) == gen.tokens


def test_posterior_validity_exact(rng):
    lm = random_table_lm(rng, vocab_size=5, order=2, scale=3.0)
    for _ in range(300):
        gen = generate(lm, [], 4, rng)
        post = infer_posterior_noise(lm, [], gen.tokens, rng)
        prefix = []
        for t, w in enumerate(gen.tokens):
            phi = lm.next_logits(prefix)
            scores = phi + post.matrix[t]
            assert np.all(scores <= scores[w])
            assert int(np.argmax(scores)) == w
            prefix.append(w)
        assert post.origin == "posterior"


def test_rejection_oracle_two_symbols():
    # logits (0, 0), observed symbol 0: the noise difference must match
    # rejection sampling of the prior
    n = 100_000
    rng = np.random.default_rng(31)
    prior = standard_gumbel_from_uniform(uniform_open(rng, (4 * n, 2)))
    kept = prior[np.argmax(prior, axis=1) == 0][:n]
    phi = np.zeros((n, 2))
    hs = kernels.posterior_rows(phi, np.zeros(n, dtype=np.int64), uniform_open(rng, (n, 2)))
    stat = ks_2samp(hs[:, 1] - hs[:, 0], kept[:, 1] - kept[:, 0]).statistic
    assert stat < 0.015


def test_rejection_oracle_per_entry_vocab4():
    n = 100_000
    rng = np.random.default_rng(32)
    phi = np.array([0.5, -0.3, 0.2, -0.8])
    observed = 0  # softmax gives it ~0.38, rejection stays cheap
    draws = standard_gumbel_from_uniform(uniform_open(rng, (4 * n, 4)))
    kept = draws[np.argmax(phi[None, :] + draws, axis=1) == observed][:n]
    assert kept.shape[0] == n
    hs = kernels.posterior_rows(
        np.broadcast_to(phi, (n, 4)), np.full(n, observed, dtype=np.int64), uniform_open(rng, (n, 4))
    )
    for j in range(4):
        assert ks_2samp(hs[:, j], kept[:, j]).statistic < 0.015


def test_marginal_recovery_pools_to_prior(rng):
    # integrate the posterior over observations drawn from the model itself:
    # the pooled noise entries must follow the prior
    lm = random_table_lm(rng, vocab_size=3, order=2)
    pool = []
    sample_rng = np.random.default_rng(33)
    while sum(len(p) for p in pool) < 100_000:
        gen = generate(lm, [], 4, sample_rng)
        post = infer_posterior_noise(lm, [], gen.tokens, sample_rng)
        pool.append(post.matrix.ravel())
    pooled = np.concatenate(pool)[:100_000]
    assert kstest(pooled, lambda x: np.exp(-np.exp(-x))).statistic < 0.01


def test_masked_observation_rejected(rng):
    lm = random_table_lm(rng, vocab_size=4, order=1)
    top = apply_intervention(lm, TopK(1))
    best = int(np.argmax(lm.next_logits([])))
    masked = (best + 1) % 3  # a non-eos symbol outside the top-1
    with pytest.raises(ImpossibleObservation):
        infer_posterior_noise(top, [], [masked], rng)


def test_observed_validation(small_lm, rng):
    with pytest.raises(Exception):
        infer_posterior_noise(small_lm, [], [], rng)
    with pytest.raises(Exception):
        infer_posterior_noise(small_lm, [], [2, 0], rng)  # EOS mid-string


def test_identity_counterfactual_replays(rng):
    lm = random_table_lm(rng, vocab_size=3, order=2)
    run_rng = np.random.default_rng(34)
    for _ in range(1000):
        gen = generate(lm, [], 5, run_rng)
        if gen.stop != "eos":
            continue
        pair = counterfactual(lm, lm, [], gen.tokens, 8, run_rng)
        assert pair.counterfactual == gen.tokens
        assert pair.observed_stop == "eos" and pair.counterfactual_stop == "eos"


def test_clamp_counterfactual_fixes_position(rng):
    lm = random_table_lm(rng, vocab_size=3, order=2)
    clamped = apply_intervention(lm, SymbolClamp(((0, "s1"),)))
    run_rng = np.random.default_rng(35)
    for _ in range(200):
        gen = generate(lm, [], 4, run_rng)
        pair = counterfactual(lm, clamped, [], gen.tokens, 4, run_rng)
        assert pair.counterfactual[0] == 1


def test_exact_length_mode(rng):
    lm = random_table_lm(rng, vocab_size=3, order=2)
    other = apply_intervention(lm, LogitBias({"s0": 0.7}))
    run_rng = np.random.default_rng(36)
    for _ in range(200):
        gen = generate(lm, [], 4, run_rng)
        pair = counterfactual(lm, other, [], gen.tokens, len(gen.tokens), run_rng)
        assert len(pair.counterfactual) <= len(gen.tokens)
        assert pair.noise.num_positions == len(gen.tokens)


def test_extension_rows_are_fresh_prior(rng):
    # identity counterfactual of a cap-terminated observation reproduces the
    # observed prefix, then keeps generating
    lm = random_table_lm(rng, vocab_size=3, order=2)
    run_rng = np.random.default_rng(37)
    seen_longer = 0
    for _ in range(300):
        gen = generate(lm, [], 3, run_rng)
        if gen.stop == "eos":
            continue
        pair = counterfactual(lm, lm, [], gen.tokens, 10, run_rng)
        assert pair.counterfactual[:3] == gen.tokens
        assert pair.noise.num_positions == 10
        seen_longer += len(pair.counterfactual) > 3
    assert seen_longer > 0


def test_counterfactual_marginal_law(rng):
    lm = random_table_lm(rng, vocab_size=3, order=2)
    cf = apply_intervention(lm, LogitBias({"s0": 0.8, "s1": -0.5}))
    exact = enumerate_distribution(cf, [], 3)
    _, _, cf_tokens, cf_lengths = paired_samples_many(lm, cf, [], 100_000, 3, np.random.default_rng(38))
    emp = empirical_distribution(cf_tokens, cf_lengths)
    assert tv_distance(emp, exact.entries) < 0.02


def test_paired_samples_generic_path_matches_fsm(rng):
    from test_engine import HiddenFsm

    lm = random_table_lm(rng, vocab_size=3, order=2)
    cf = apply_intervention(lm, LogitBias({"s1": 1.0}))
    a = paired_samples_many(lm, cf, [0], 3000, 3, np.random.default_rng(39))
    b = paired_samples_many(HiddenFsm(lm), HiddenFsm(cf), [0], 3000, 3, np.random.default_rng(39))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_joint_identical_providers_agree(small_lm):
    rng = np.random.default_rng(40)
    for _ in range(300):
        pair = joint_sample(small_lm, small_lm, [], 4, rng)
        assert pair.observed == pair.counterfactual


def test_joint_marginals_match_enumeration(rng):
    from gumbelcf.hindsight import _decode_block

    lm = random_table_lm(rng, vocab_size=3, order=2)
    cf = apply_intervention(lm, LogitBias({"s0": 1.2}))
    n = 200_000
    u = uniform_open(np.random.default_rng(41), (n, 3, 3))
    noise = standard_gumbel_from_uniform(u)
    for provider in (lm, cf):
        tokens, lengths = _decode_block(provider, [], noise, 3)
        emp = empirical_distribution(tokens, lengths)
        exact = enumerate_distribution(provider, [], 3)
        assert tv_distance(emp, exact.entries) < 0.01


def test_joint_monotone_coupling_first_step(rng):
    # intervention that only raises one symbol's logit: any pair that agreed on
    # that symbol at step one cannot disagree about it counterfactually
    phi = rng.normal(size=4)
    s = 1
    phi_cf = phi.copy()
    phi_cf[s] += 1.5
    n = 1_000_000
    block_rng = np.random.default_rng(42)
    violations = 0
    for _ in range(10):
        noise = standard_gumbel_from_uniform(uniform_open(block_rng, (n // 10, 4)))
        w0 = np.argmax(phi[None, :] + noise, axis=1)
        w0_cf = np.argmax(phi_cf[None, :] + noise, axis=1)
        violations += int(np.sum((w0 == s) & (w0_cf != s)))
    assert violations == 0


def test_counterfactual_pair_json_schema(small_lm, rng):
    gen = generate(small_lm, [0], 4, rng)
    pair = counterfactual(small_lm, small_lm, [0], gen.tokens, 4, rng)
    rec = pair.to_json_record("noise/x.gnr")
    assert set(rec) == {"prompt", "observed", "counterfactual", "noise_file", "orig", "cf", "stop", "metrics"}
    assert rec["stop"]["observed"] in ("eos", "cap")
