"""Independent brute-force oracles.

Exact string-distribution enumeration (chain rule over every sequence up to a
cap), an empirical checker for counterfactual stability of the Gumbel-max
mechanism, and the inverse-CDF contrast mechanism. The contrast mechanism
matches the Gumbel-max interventional marginals but its counterfactuals
depend on an arbitrary symbol ordering, which is exactly what stability rules
out; the two are kept side by side so tests can localize the difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from . import kernels
from .gumbel import standard_gumbel_from_uniform, uniform_open
from .models import Provider

__all__ = [
    "OracleError",
    "ExactDistribution",
    "enumerate_distribution",
    "check_counterfactual_stability",
    "single_step_counterfactuals",
    "inverse_cdf_sample",
    "inverse_cdf_counterfactual",
    "inverse_cdf_conditional",
    "find_inverse_cdf_witness",
    "tv_distance",
    "empirical_distribution",
    "CONTRAST_PHI",
    "CONTRAST_PHI_CF",
    "CONTRAST_ORDERINGS",
    "CONTRAST_OBSERVED",
]

ENUMERATION_LIMIT = 1_000_000

# Crafted 3-symbol contrast instance: under ordering (2, 0, 1) the inverse-CDF
# mechanism maps an observed symbol 1 to symbol 0 with probability 1/3 even
# though the intervention lowered symbol 0's probability ratio - a stability
# violation - and the two orderings give visibly different counterfactual
# distributions.
CONTRAST_PHI = np.log([0.5, 0.3, 0.2])
CONTRAST_PHI_CF = np.log([0.2, 0.5, 0.3])
CONTRAST_ORDERINGS = ((0, 1, 2), (2, 0, 1))
CONTRAST_OBSERVED = 1


class OracleError(Exception):
    """Enumeration infeasible or malformed oracle query."""


@dataclass
class ExactDistribution:
    """Exact probability of every sequence up to the cap.

    EOS-terminated sequences carry their full string probability; sequences of
    exactly cap tokens without EOS carry the probability of that prefix event
    (together they form the cap bucket).
    """

    entries: dict[tuple[int, ...], float]
    cap: int
    eos_id: int

    @property
    def total(self) -> float:
        return float(sum(self.entries.values()))

    @property
    def cap_mass(self) -> float:
        return float(
            sum(p for seq, p in self.entries.items() if not seq or seq[-1] != self.eos_id)
        )


def enumerate_distribution(provider: Provider, prompt, cap: int) -> ExactDistribution:
    """Chain-rule enumeration of every generated sequence up to cap tokens."""
    vocab = provider.vocabulary
    width = len(vocab)
    if cap < 1:
        raise OracleError("cap must be >= 1")
    if width**cap > ENUMERATION_LIMIT:
        raise OracleError(
            f"enumeration of {width}^{cap} sequences exceeds the {ENUMERATION_LIMIT} limit"
        )
    vocab.check_ids(prompt)
    clamps = provider.clamps
    entries: dict[tuple[int, ...], float] = {}

    def descend(prefix: tuple[int, ...], logp: float) -> None:
        depth = len(prefix)
        clamp_tok = clamps.get(depth)
        row = None if clamp_tok is not None else provider.next_logits(list(prompt) + list(prefix))
        logprobs = None if row is None else log_softmax(row)
        for tok in range(width):
            if clamp_tok is not None:
                if tok != clamp_tok:
                    continue
                lp = logp
            else:
                lp = logp + float(logprobs[tok])
            seq = prefix + (tok,)
            if tok == vocab.eos_id or len(seq) == cap:
                entries[seq] = entries.get(seq, 0.0) + float(np.exp(lp))
            else:
                descend(seq, lp)

    descend((), 0.0)
    return ExactDistribution(entries=entries, cap=cap, eos_id=vocab.eos_id)


def empirical_distribution(tokens: np.ndarray, lengths: np.ndarray) -> dict[tuple[int, ...], float]:
    """Frequency map over padded (tokens, lengths) batch output."""
    n = tokens.shape[0]
    counts: dict[tuple[int, ...], float] = {}
    for i in range(n):
        seq = tuple(int(t) for t in tokens[i, : lengths[i]])
        counts[seq] = counts.get(seq, 0.0) + 1.0
    return {seq: c / n for seq, c in counts.items()}


def tv_distance(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def single_step_counterfactuals(
    phi: np.ndarray,
    phi_cf: np.ndarray,
    observed: int,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """n single-step Gumbel-max counterfactual symbols given one observation."""
    phi = np.asarray(phi, dtype=np.float64)
    logits = np.broadcast_to(phi, (n, phi.shape[0]))
    obs = np.full(n, observed, dtype=np.int64)
    u = uniform_open(rng, (n, phi.shape[0]))
    noise = kernels.posterior_rows(logits, obs, u)
    return np.argmax(np.asarray(phi_cf)[None, :] + noise, axis=1)


def check_counterfactual_stability(
    phi: np.ndarray,
    phi_cf: np.ndarray,
    trials: int,
    rng: np.random.Generator,
    block: int = 100_000,
) -> int:
    """Count stability violations over fresh single-step trials.

    Per trial: sample i by Gumbel-max under phi, hindsight-infer the step's
    noise posterior, take j = counterfactual argmax under phi_cf. A violation
    is j != i although the intervention did not raise j's probability ratio
    above i's. Ratios are compared in log space.
    """
    phi = np.asarray(phi, dtype=np.float64)
    phi_cf = np.asarray(phi_cf, dtype=np.float64)
    delta = log_softmax(phi_cf) - log_softmax(phi)
    violations = 0
    done = 0
    while done < trials:
        b = min(block, trials - done)
        noise = standard_gumbel_from_uniform(uniform_open(rng, (b, phi.shape[0])))
        i = np.argmax(phi[None, :] + noise, axis=1)
        u = uniform_open(rng, (b, phi.shape[0]))
        post = kernels.posterior_rows(np.broadcast_to(phi, (b, phi.shape[0])), i, u)
        j = np.argmax(phi_cf[None, :] + post, axis=1)
        violations += int(np.sum((j != i) & (delta[i] >= delta[j])))
        done += b
    return violations


def _check_ordering(phi: np.ndarray, ordering) -> np.ndarray:
    ordering = np.asarray(ordering, dtype=np.int64)
    if sorted(ordering.tolist()) != list(range(phi.shape[0])):
        raise OracleError(f"ordering {ordering.tolist()} is not a permutation")
    return ordering


def _cdf_edges(phi: np.ndarray, ordering: np.ndarray) -> np.ndarray:
    probs = softmax(np.asarray(phi, dtype=np.float64))
    edges = np.zeros(len(ordering) + 1)
    edges[1:] = np.cumsum(probs[ordering])
    edges[-1] = 1.0
    return edges


def inverse_cdf_sample(phi: np.ndarray, ordering, u: float) -> int:
    """Categorical draw by inverting the CDF laid out in the given symbol order."""
    ordering = _check_ordering(np.asarray(phi), ordering)
    edges = _cdf_edges(phi, ordering)
    k = int(np.searchsorted(edges, u, side="right")) - 1
    k = min(max(k, 0), len(ordering) - 1)
    return int(ordering[k])


def inverse_cdf_counterfactual(
    phi: np.ndarray,
    phi_cf: np.ndarray,
    observed: int,
    ordering,
    rng: np.random.Generator,
) -> int:
    """Counterfactual of the inverse-CDF mechanism.

    The latent uniform's posterior given the observation is exactly uniform on
    the observed symbol's CDF sub-interval; a draw from it is pushed through
    the intervened CDF under the same ordering.
    """
    phi = np.asarray(phi, dtype=np.float64)
    ordering = _check_ordering(phi, ordering)
    edges = _cdf_edges(phi, ordering)
    pos = int(np.nonzero(ordering == observed)[0][0])
    lo, hi = edges[pos], edges[pos + 1]
    if hi <= lo:
        raise OracleError(f"observed symbol {observed} has zero probability")
    u = lo + (hi - lo) * rng.random()
    return inverse_cdf_sample(phi_cf, ordering, u)


def inverse_cdf_conditional(phi, phi_cf, observed: int, ordering) -> np.ndarray:
    """Exact counterfactual distribution of the inverse-CDF mechanism.

    Interval-overlap computation; serves as the analytic oracle for the
    sampled version.
    """
    phi = np.asarray(phi, dtype=np.float64)
    phi_cf = np.asarray(phi_cf, dtype=np.float64)
    ordering = _check_ordering(phi, ordering)
    edges = _cdf_edges(phi, ordering)
    edges_cf = _cdf_edges(phi_cf, ordering)
    pos = int(np.nonzero(ordering == observed)[0][0])
    lo, hi = edges[pos], edges[pos + 1]
    if hi <= lo:
        raise OracleError(f"observed symbol {observed} has zero probability")
    out = np.zeros(phi.shape[0])
    for k, sym in enumerate(ordering):
        overlap = min(hi, edges_cf[k + 1]) - max(lo, edges_cf[k])
        if overlap > 0:
            out[sym] = overlap / (hi - lo)
    return out


def find_inverse_cdf_witness(
    rng: np.random.Generator,
    max_instances: int = 1000,
) -> dict | None:
    """Randomized search for a 3-symbol instance where the inverse-CDF
    mechanism violates counterfactual stability with positive probability.

    The violation probability is computed analytically from interval overlaps,
    so a returned witness is exact, not sampled.
    """
    for _ in range(max_instances):
        phi = rng.normal(size=3)
        phi_cf = rng.normal(size=3)
        ordering = rng.permutation(3)
        delta = log_softmax(phi_cf) - log_softmax(phi)
        for observed in range(3):
            cond = inverse_cdf_conditional(phi, phi_cf, observed, ordering)
            bad = [
                j
                for j in range(3)
                if j != observed and cond[j] > 0 and delta[observed] >= delta[j]
            ]
            if bad:
                prob = float(sum(cond[j] for j in bad))
                return {
                    "phi": phi.tolist(),
                    "phi_cf": phi_cf.tolist(),
                    "ordering": [int(x) for x in ordering],
                    "observed": observed,
                    "violating_symbols": bad,
                    "violation_probability": prob,
                }
    return None
