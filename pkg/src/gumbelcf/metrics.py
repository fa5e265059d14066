"""String-level side-effect metrics: normalized longest common prefix and
per-token log-probability ratios between two providers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import log_softmax

from .models import MASK_SENTINEL, ModelError, Provider

__all__ = [
    "MetricBundle",
    "normalized_lcp",
    "token_log_ratio",
    "aggregate_ratios",
    "metric_report",
]


@dataclass
class MetricBundle:
    normalized_lcp: float
    per_token_log_ratio: list[float]
    summary: dict

    def to_json(self) -> dict:
        return {
            "normalized_lcp": self.normalized_lcp,
            "per_token_log_ratio": self.per_token_log_ratio,
            "summary": self.summary,
        }


def normalized_lcp(observed: Sequence[int], counterfactual: Sequence[int]) -> float:
    """Length of the shared prefix divided by the observed length.

    Asymmetric by design: normalization is always by the first argument.
    Prompt tokens are excluded by the caller.
    """
    if len(observed) == 0:
        raise ValueError("observed must be non-empty")
    shared = 0
    for a, b in zip(observed, counterfactual):
        if a != b:
            break
        shared += 1
    return shared / len(observed)


def _log_prob(provider: Provider, prefix, token: int) -> float:
    logits = provider.next_logits(prefix)
    if logits[token] <= MASK_SENTINEL:
        raise ModelError(f"token {token} is masked under {provider.descriptor}")
    return float(log_softmax(logits)[token])


def token_log_ratio(a: Provider, b: Provider, prompt, tokens: Sequence[int]) -> np.ndarray:
    """Per-position log p_a(w_t | prefix) - log p_b(w_t | prefix).

    Both providers are conditioned on the same prefix (prompt plus the scored
    tokens so far), so the entries compare the two models on identical events.
    """
    out = np.empty(len(tokens))
    prefix = list(prompt)
    for t, tok in enumerate(tokens):
        tok = int(tok)
        out[t] = _log_prob(a, prefix, tok) - _log_prob(b, prefix, tok)
        prefix.append(tok)
    return out


def aggregate_ratios(
    records: Iterable,
    a: Provider,
    b: Provider,
    top_n: int = 15,
    mode: str = "observed",
) -> dict:
    """Mean per-symbol change in log probability from provider a to b.

    mode "observed" scores the observed tokens of each pair; mode "paired"
    scores the observed and the counterfactual tokens (each under both
    providers, conditioned on its own text's prefix). Returns the ranked
    most-increased / most-decreased symbol lists, where "increased" means the
    symbol became more likely under b. Ties rank by token id.
    """
    if mode not in ("observed", "paired"):
        raise ValueError(f"mode must be observed|paired, got {mode!r}")
    width = len(a.vocabulary)
    totals = np.zeros(width)
    counts = np.zeros(width, dtype=np.int64)
    for rec in records:
        texts = [rec.observed]
        if mode == "paired":
            texts.append(rec.counterfactual)
        for text in texts:
            if not text:
                continue
            deltas = -token_log_ratio(a, b, rec.prompt, text)
            for tok, delta in zip(text, deltas):
                totals[tok] += delta
                counts[tok] += 1
    seen = counts > 0
    means = np.zeros(width)
    means[seen] = totals[seen] / counts[seen]
    ids = np.nonzero(seen)[0]
    # sort by mean descending, then token id ascending
    order = ids[np.lexsort((ids, -means[ids]))]
    symbols = a.vocabulary.symbols
    ranked = [[symbols[i], float(means[i])] for i in order]
    return {
        "top_increased": ranked[:top_n],
        "top_decreased": ranked[::-1][:top_n],
        "symbols_seen": int(seen.sum()),
    }


def metric_report(
    pairs: Sequence,
    a: Provider | None = None,
    b: Provider | None = None,
    top_n: int = 15,
    mode: str = "observed",
) -> dict:
    """The JSON metric report: LCP summary plus (optionally) ratio rankings."""
    lcps = [normalized_lcp(p.observed, p.counterfactual) for p in pairs if p.observed]
    report = {
        "n": len(lcps),
        "lcp": {
            "median": float(np.median(lcps)) if lcps else None,
            "mean": float(np.mean(lcps)) if lcps else None,
        },
    }
    if a is not None and b is not None:
        report["ratios"] = aggregate_ratios(pairs, a, b, top_n=top_n, mode=mode)
    return report
