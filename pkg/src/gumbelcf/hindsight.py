"""Posterior noise inference for observed strings and counterfactual decoding.

Given a string emitted by a provider, the sampling noise that produced it is
not observed, but its posterior factorizes per position and is sampled
top-down: the winning perturbed score is a Gumbel at logsumexp(logits)
(independent of which symbol won), and every losing symbol's Gumbel is
truncated at it. Decoding the inferred noise under an intervened provider
yields a draw from the counterfactual string distribution; decoding one fresh
noise block under both providers yields a draw from the joint (original,
counterfactual) distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .engine import (
    EngineError,
    NoiseRecord,
    _decode,
    generate_with_noise,
    sample_prior_noise,
)
from .gumbel import standard_gumbel_from_uniform, uniform_open
from .models import MASK_SENTINEL, Provider

__all__ = [
    "ImpossibleObservation",
    "CounterfactualPair",
    "infer_posterior_noise",
    "counterfactual",
    "joint_sample",
    "paired_samples_many",
]


class ImpossibleObservation(EngineError):
    """The observed string has zero probability under the provider, so the
    noise posterior is undefined."""


@dataclass
class CounterfactualPair:
    """An observed string and its counterfactual, sharing one noise record."""

    prompt: list[int]
    observed: list[int]
    counterfactual: list[int]
    noise: NoiseRecord
    original_descriptor: str
    counterfactual_descriptor: str
    observed_stop: str
    counterfactual_stop: str
    metrics: dict | None = None

    def to_json_record(self, noise_file: str = "", **extra) -> dict:
        rec = {
            "prompt": list(map(int, self.prompt)),
            "observed": list(map(int, self.observed)),
            "counterfactual": list(map(int, self.counterfactual)),
            "noise_file": noise_file,
            "orig": self.original_descriptor,
            "cf": self.counterfactual_descriptor,
            "stop": {"observed": self.observed_stop, "cf": self.counterfactual_stop},
            "metrics": self.metrics or {},
        }
        rec.update(extra)
        return rec


def _check_same_vocab(original: Provider, other: Provider) -> None:
    if len(original.vocabulary) != len(other.vocabulary) or (
        original.vocabulary.eos_id != other.vocabulary.eos_id
    ):
        raise EngineError("original and counterfactual providers must share a vocabulary")


def _stop_reason(tokens, eos_id) -> str:
    return "eos" if tokens and tokens[-1] == eos_id else "cap"


def _validate_observed(provider: Provider, observed) -> None:
    if len(observed) == 0:
        raise EngineError("observed string must be non-empty")
    vocab = provider.vocabulary
    vocab.check_ids(observed)
    if vocab.eos_id in observed[:-1]:
        raise EngineError("EOS may appear only as the final observed token")


def infer_posterior_noise(
    provider: Provider,
    prompt,
    observed,
    rng: np.random.Generator,
    seed: int | None = None,
) -> NoiseRecord:
    """Hindsight-sample the noise posterior given an observed continuation.

    Returns a record with one row per observed position. Decoding it under the
    same provider reproduces the observed string exactly. Positions the
    provider clamps carry fresh prior rows: a clamped symbol was set outright,
    so observing it tells us nothing about that position's noise.

    Raises ImpossibleObservation when an observed symbol is masked in its
    context (or contradicts a clamp).
    """
    vocab = provider.vocabulary
    vocab.check_ids(prompt)
    _validate_observed(provider, observed)
    observed = [int(t) for t in observed]
    width = len(vocab)
    num = len(observed)
    clamps = provider.clamps

    logits = np.zeros((num, width))
    unclamped = []
    prefix = list(prompt)
    for t, w in enumerate(observed):
        clamp_tok = clamps.get(t)
        if clamp_tok is not None:
            if clamp_tok != w:
                raise ImpossibleObservation(
                    f"observed token {w} at position {t} contradicts clamp {clamp_tok}"
                )
        else:
            row = provider.next_logits(prefix)
            if row[w] <= MASK_SENTINEL:
                raise ImpossibleObservation(
                    f"observed token {w} is masked at position {t}; posterior undefined"
                )
            logits[t] = row
            unclamped.append(t)
        prefix.append(w)

    u = uniform_open(rng, (num, width))
    matrix = kernels.posterior_rows(logits, np.asarray(observed), u)
    for t in range(num):
        if t not in clamps:
            continue
        matrix[t] = standard_gumbel_from_uniform(u[t])
    return NoiseRecord(matrix, origin="posterior", seed=seed)


def counterfactual(
    original: Provider,
    counterfactual_provider: Provider,
    prompt,
    observed,
    max_len: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> CounterfactualPair:
    """Regenerate an observed string under an intervened provider, hindsight
    style: posterior noise for the observed positions, fresh prior rows for
    positions beyond them, decoded under the counterfactual provider.

    max_len = len(observed) replays exactly the observed positions; a larger
    max_len lets the counterfactual run on (length-capped sampling produces
    observed strings without EOS, and their counterfactuals should not be
    forced to stop early).
    """
    _check_same_vocab(original, counterfactual_provider)
    if max_len < 1:
        raise EngineError("max_len must be >= 1")
    post = infer_posterior_noise(original, prompt, observed, rng)
    matrix = post.matrix
    if max_len > matrix.shape[0]:
        extra = uniform_open(rng, (max_len - matrix.shape[0], matrix.shape[1]))
        matrix = np.vstack([matrix, standard_gumbel_from_uniform(extra)])
    noise = NoiseRecord(matrix, origin="posterior", seed=seed)
    cf_tokens = generate_with_noise(counterfactual_provider, prompt, noise, max_len)
    eos = original.vocabulary.eos_id
    return CounterfactualPair(
        prompt=list(prompt),
        observed=[int(t) for t in observed],
        counterfactual=cf_tokens,
        noise=noise,
        original_descriptor=original.descriptor,
        counterfactual_descriptor=counterfactual_provider.descriptor,
        observed_stop=_stop_reason(list(observed), eos),
        counterfactual_stop=_stop_reason(cf_tokens, eos),
    )


def joint_sample(
    original: Provider,
    counterfactual_provider: Provider,
    prompt,
    max_len: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> CounterfactualPair:
    """One prior noise block decoded under both providers independently."""
    _check_same_vocab(original, counterfactual_provider)
    noise = sample_prior_noise(max_len, original.vocabulary, rng, seed=seed)
    w = generate_with_noise(original, prompt, noise, max_len)
    w_cf = generate_with_noise(counterfactual_provider, prompt, noise, max_len)
    eos = original.vocabulary.eos_id
    return CounterfactualPair(
        prompt=list(prompt),
        observed=w,
        counterfactual=w_cf,
        noise=noise,
        original_descriptor=original.descriptor,
        counterfactual_descriptor=counterfactual_provider.descriptor,
        observed_stop=_stop_reason(w, eos),
        counterfactual_stop=_stop_reason(w_cf, eos),
    )


def paired_samples_many(
    original: Provider,
    counterfactual_provider: Provider,
    prompt,
    n: int,
    max_len: int,
    rng: np.random.Generator,
):
    """Batch counterfactual sampling: draw observed strings from the original
    provider, hindsight-infer their noise, decode under the counterfactual
    provider. Returns (observed, observed_lengths, cf, cf_lengths) arrays.

    Uses the dense-table fast path when both providers compile to FSMs and the
    original has no clamps; the generic fallback consumes the same pre-drawn
    uniform blocks and returns identical arrays.
    """
    _check_same_vocab(original, counterfactual_provider)
    vocab = original.vocabulary
    vocab.check_ids(prompt)
    width = len(vocab)
    u_gen = uniform_open(rng, (n, max_len, width))
    obs_tokens, obs_lengths = _decode_block(original, prompt, standard_gumbel_from_uniform(u_gen), max_len)
    u_post = uniform_open(rng, (n, max_len, width))
    noise = _posterior_block(original, prompt, obs_tokens, obs_lengths, u_post)
    cf_tokens, cf_lengths = _decode_block(counterfactual_provider, prompt, noise, max_len)
    return obs_tokens, obs_lengths, cf_tokens, cf_lengths


def _decode_block(provider: Provider, prompt, noise: np.ndarray, max_len: int):
    fsm = provider.to_fsm()
    if fsm is not None:
        shifted = replace(fsm, start=fsm.state_of(prompt))
        return kernels.fsm_decode(shifted, noise, clamps=provider.clamps)
    n, t_max, _ = noise.shape
    tokens = np.full((n, t_max), -1, dtype=np.int32)
    lengths = np.zeros(n, dtype=np.int32)
    for i in range(n):
        out = _decode(provider, prompt, noise[i], t_max)
        tokens[i, : len(out)] = out
        lengths[i] = len(out)
    return tokens, lengths


def _posterior_block(provider: Provider, prompt, tokens, lengths, uniforms):
    fsm = provider.to_fsm()
    if fsm is not None and not provider.clamps:
        shifted = replace(fsm, start=fsm.state_of(prompt))
        return kernels.fsm_posterior(shifted, tokens, lengths, uniforms)
    n, t_max, width = uniforms.shape
    noise = np.empty((n, t_max, width))
    for i in range(n):
        num = int(lengths[i])
        obs = [int(t) for t in tokens[i, :num]]
        logits = np.zeros((num, width))
        prefix = list(prompt)
        for t, w in enumerate(obs):
            if t not in provider.clamps:
                logits[t] = provider.next_logits(prefix)
            prefix.append(w)
        noise[i, :num] = kernels.posterior_rows(logits, np.asarray(obs), uniforms[i, :num])
        for t in provider.clamps:
            if t < num:
                noise[i, t] = standard_gumbel_from_uniform(uniforms[i, t])
        if num < t_max:
            noise[i, num:] = standard_gumbel_from_uniform(uniforms[i, num:])
    return noise
