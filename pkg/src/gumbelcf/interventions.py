"""Declarative intervention specs: edits that turn a provider into its
counterfactual twin.

Supported kinds operate at the logit level (bias, temperature, top-k,
nucleus), at the table level (row replacement), on outputs directly (symbol
clamps), or pass configuration through to a remote bridge. Heavyweight model
editing lives outside this package: from the engine's point of view an edited
checkpoint is simply a different provider.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .models import (
    BiasedProvider,
    ClampedProvider,
    ModelError,
    Provider,
    TableLm,
    TransformedProvider,
    apply_nucleus,
    apply_temperature,
    apply_top_k,
)

__all__ = [
    "InterventionSpec",
    "LogitBias",
    "Temperature",
    "TopK",
    "Nucleus",
    "TableEdit",
    "SymbolClamp",
    "RemoteConfig",
    "Compose",
    "apply_intervention",
    "compose",
    "parse_intervention",
    "load_intervention",
]


class InterventionSpec:
    """Base class; subclasses define one intervention kind each."""

    kind: str

    def apply(self, provider: Provider) -> Provider:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class LogitBias(InterventionSpec):
    """Add per-symbol deltas to every context's logits; unnamed symbols get 0."""

    bias: Mapping[str, float]
    kind = "logit_bias"

    def apply(self, provider: Provider) -> Provider:
        vec = np.zeros(len(provider.vocabulary))
        for symbol, delta in self.bias.items():
            vec[provider.vocabulary.id_of(symbol)] = float(delta)
        return BiasedProvider(provider, vec)

    def to_json(self) -> dict:
        return {"kind": self.kind, "bias": {k: float(v) for k, v in self.bias.items()}}


@dataclass(frozen=True)
class Temperature(InterventionSpec):
    tau: float
    kind = "temperature"

    def apply(self, provider: Provider) -> Provider:
        if not self.tau > 0:
            raise ModelError(f"temperature must be positive, got {self.tau}")
        tau = self.tau
        return TransformedProvider(provider, lambda x: apply_temperature(x, tau), f"temp[{tau}]")

    def to_json(self) -> dict:
        return {"kind": self.kind, "tau": self.tau}


@dataclass(frozen=True)
class TopK(InterventionSpec):
    k: int
    kind = "top_k"

    def apply(self, provider: Provider) -> Provider:
        k = int(self.k)
        if not 1 <= k <= len(provider.vocabulary):
            raise ModelError(f"top-k k={k} out of range")
        return TransformedProvider(provider, lambda x: apply_top_k(x, k), f"top_k[{k}]")

    def to_json(self) -> dict:
        return {"kind": self.kind, "k": int(self.k)}


@dataclass(frozen=True)
class Nucleus(InterventionSpec):
    p: float
    kind = "nucleus"

    def apply(self, provider: Provider) -> Provider:
        if not 0 < self.p <= 1:
            raise ModelError(f"nucleus p={self.p} out of range (0, 1]")
        p = self.p
        return TransformedProvider(provider, lambda x: apply_nucleus(x, p), f"nucleus[{p}]")

    def to_json(self) -> dict:
        return {"kind": self.kind, "p": self.p}


@dataclass(frozen=True)
class TableEdit(InterventionSpec):
    """Replace whole context rows of a table LM."""

    edits: tuple[tuple[tuple[str, ...], tuple[float, ...]], ...]
    kind = "table_edit"

    def apply(self, provider: Provider) -> Provider:
        if not isinstance(provider, TableLm):
            raise ModelError("table_edit requires a table-LM provider")
        vocab = provider.vocabulary
        rows = dict(provider.rows)
        for ctx_symbols, row in self.edits:
            ctx = tuple(vocab.id_of(s) for s in ctx_symbols)
            rows[ctx] = np.asarray(row, dtype=np.float64)
        return TableLm(
            vocabulary=vocab,
            order=provider.order,
            rows=rows,
            backoff=provider.backoff,
            descriptor=f"edit({provider.descriptor})",
        )

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "edits": [
                {"context": list(ctx), "logits": [float(x) for x in row]}
                for ctx, row in self.edits
            ],
        }


@dataclass(frozen=True)
class SymbolClamp(InterventionSpec):
    """Fix generated positions to given symbols, bypassing the argmax."""

    clamps: tuple[tuple[int, str | int], ...]  # (position, symbol-or-id)
    kind = "symbol_clamp"

    def __post_init__(self):
        positions = [p for p, _ in self.clamps]
        if len(set(positions)) != len(positions):
            raise ModelError("at most one clamp per position")

    def apply(self, provider: Provider) -> Provider:
        resolved = {}
        for pos, sym in self.clamps:
            tok = sym if isinstance(sym, int) else provider.vocabulary.id_of(sym)
            resolved[int(pos)] = int(tok)
        return ClampedProvider(provider, resolved)

    def to_json(self) -> dict:
        out = []
        for pos, sym in self.clamps:
            entry = {"position": int(pos)}
            entry["id" if isinstance(sym, int) else "symbol"] = sym
            out.append(entry)
        return {"kind": self.kind, "clamps": out}


@dataclass(frozen=True)
class RemoteConfig(InterventionSpec):
    """Opaque key-value map forwarded verbatim in every wire request."""

    config: Mapping[str, object]
    kind = "remote_config"

    def apply(self, provider: Provider) -> Provider:
        with_config = getattr(provider, "with_config", None)
        if with_config is None:
            raise ModelError("remote_config requires a remote provider")
        return with_config(dict(self.config))

    def to_json(self) -> dict:
        return {"kind": self.kind, "config": dict(self.config)}


@dataclass(frozen=True)
class Compose(InterventionSpec):
    specs: tuple[InterventionSpec, ...]
    kind = "compose"

    def apply(self, provider: Provider) -> Provider:
        for spec in self.specs:
            provider = spec.apply(provider)
        return provider

    def to_json(self) -> dict:
        return {"kind": self.kind, "specs": [s.to_json() for s in self.specs]}


def apply_intervention(provider: Provider, spec: InterventionSpec) -> Provider:
    """Build the counterfactual provider; the original is left untouched."""
    return spec.apply(provider)


def compose(specs: Sequence[InterventionSpec]) -> InterventionSpec:
    """Left-to-right composition, canonicalized.

    Adjacent logit biases merge into one summed bias. Clamp conflicts (two
    different symbols at one position) are rejected here rather than at apply
    time.
    """
    flat: list[InterventionSpec] = []
    for spec in specs:
        parts = spec.specs if isinstance(spec, Compose) else [spec]
        for part in parts:
            if flat and isinstance(part, LogitBias) and isinstance(flat[-1], LogitBias):
                merged = dict(flat[-1].bias)
                for sym, delta in part.bias.items():
                    merged[sym] = merged.get(sym, 0.0) + float(delta)
                flat[-1] = LogitBias(merged)
            else:
                flat.append(part)
    seen_clamps: dict[int, str | int] = {}
    for spec in flat:
        if isinstance(spec, SymbolClamp):
            for pos, sym in spec.clamps:
                if pos in seen_clamps and seen_clamps[pos] != sym:
                    raise ModelError(f"conflicting clamps at position {pos}")
                seen_clamps[pos] = sym
    if len(flat) == 1:
        return flat[0]
    return Compose(tuple(flat))


def parse_intervention(obj) -> InterventionSpec:
    """Parse the JSON form; a top-level array means composition."""
    if isinstance(obj, list):
        return compose([parse_intervention(o) for o in obj])
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ModelError("intervention JSON must be an object with a 'kind' field")
    kind = obj["kind"]
    try:
        if kind == "logit_bias":
            return LogitBias({str(k): float(v) for k, v in obj["bias"].items()})
        if kind == "temperature":
            return Temperature(float(obj["tau"]))
        if kind == "top_k":
            return TopK(int(obj["k"]))
        if kind == "nucleus":
            return Nucleus(float(obj["p"]))
        if kind == "table_edit":
            edits = tuple(
                (tuple(e["context"]), tuple(float(x) for x in e["logits"]))
                for e in obj["edits"]
            )
            return TableEdit(edits)
        if kind == "symbol_clamp":
            clamps = []
            for e in obj["clamps"]:
                sym = e["symbol"] if "symbol" in e else int(e["id"])
                clamps.append((int(e["position"]), sym))
            return SymbolClamp(tuple(clamps))
        if kind == "remote_config":
            return RemoteConfig(dict(obj["config"]))
        if kind == "compose":
            return compose([parse_intervention(o) for o in obj["specs"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed intervention payload for kind {kind!r}: {exc}") from exc
    raise ModelError(f"unknown intervention kind {kind!r}")


def load_intervention(path) -> InterventionSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_intervention(json.load(fh))
