"""Logit providers: vocabulary handling, exact table LMs, decoding transforms.

A provider maps a prefix of token ids to one unnormalized score per vocabulary
symbol (EOS included). Providers are deterministic and immutable: the engine's
structural equations require that the same prefix always yields the same
logits. Decoding transforms (top-k, nucleus, temperature) are deterministic
logit maps applied inside the provider, before any sampling noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "MASK_SENTINEL",
    "ModelError",
    "Vocabulary",
    "Provider",
    "TableLm",
    "TableFsm",
    "BiasedProvider",
    "TransformedProvider",
    "ClampedProvider",
    "apply_top_k",
    "apply_nucleus",
    "apply_temperature",
    "load_table_lm",
    "save_table_lm",
    "fit_table_lm",
]

# Large-negative finite mask value. Finite keeps all arithmetic NaN-free; the
# standard-Gumbel right tail makes promoting a masked symbol impossible in
# practice (P ~ exp(-1e9)).
MASK_SENTINEL = -1.0e9

_CTX_SEP = ""


class ModelError(Exception):
    """Malformed model file, unknown token id, or invalid query."""


@dataclass(frozen=True)
class Vocabulary:
    """Finite symbol set with a distinguished end-of-sequence symbol."""

    symbols: tuple[str, ...]
    eos_id: int

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ModelError("vocabulary symbols must be distinct")
        if not 0 <= self.eos_id < len(self.symbols):
            raise ModelError(f"eos_id {self.eos_id} out of range")

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def eos_symbol(self) -> str:
        return self.symbols[self.eos_id]

    def id_of(self, symbol: str) -> int:
        index = getattr(self, "_index", None)
        if index is None:
            index = {s: i for i, s in enumerate(self.symbols)}
            object.__setattr__(self, "_index", index)
        try:
            return index[symbol]
        except KeyError:
            raise ModelError(f"unknown symbol {symbol!r}") from None

    def symbol_of(self, token_id: int) -> str:
        self.check_ids([token_id])
        return self.symbols[token_id]

    def check_ids(self, ids: Iterable[int]) -> None:
        n = len(self.symbols)
        for i in ids:
            if not 0 <= int(i) < n:
                raise ModelError(f"token id {i} out of range for vocabulary of size {n}")


@dataclass(frozen=True)
class TableFsm:
    """Dense finite-state view of a table LM, for the batched kernels.

    ``rows[s]`` holds the logits of state ``s`` and ``next_state[s, w]`` the
    state reached after emitting ``w``. States enumerate every context of
    length < order.
    """

    rows: np.ndarray  # (S, V) float64, C-contiguous
    next_state: np.ndarray  # (S, V) int32
    start: int
    eos_id: int

    def state_of(self, prefix: Sequence[int]) -> int:
        state = self.start
        for tok in prefix:
            state = int(self.next_state[state, tok])
        return state


class Provider:
    """Base class for deterministic logit providers."""

    vocabulary: Vocabulary
    descriptor: str

    # position -> token id; honored by the generation loop, empty by default
    @property
    def clamps(self) -> Mapping[int, int]:
        return {}

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def to_fsm(self, max_states: int = 200_000) -> TableFsm | None:
        """Dense FSM form when this provider is table-backed, else None."""
        return None


class TableLm(Provider):
    """Exact n-gram-style LM: logits looked up by the last order-1 tokens.

    Contexts shorter than order-1 (the beginning of a string) use the whole
    prefix as key. A missing context either falls back to uniform logits
    (``backoff=True``) or raises.
    """

    def __init__(
        self,
        vocabulary: Vocabulary,
        order: int,
        rows: Mapping[tuple[int, ...], np.ndarray],
        backoff: bool = False,
        descriptor: str = "table",
    ):
        if order < 1:
            raise ModelError("table LM order must be >= 1")
        self.vocabulary = vocabulary
        self.order = int(order)
        self.backoff = bool(backoff)
        self.descriptor = descriptor
        width = len(vocabulary)
        self.rows: dict[tuple[int, ...], np.ndarray] = {}
        for ctx, row in rows.items():
            ctx = tuple(int(t) for t in ctx)
            if len(ctx) > order - 1:
                raise ModelError(f"context {ctx} longer than order-1 = {order - 1}")
            vocabulary.check_ids(ctx)
            arr = np.asarray(row, dtype=np.float64)
            if arr.shape != (width,):
                raise ModelError(
                    f"row for context {ctx} has width {arr.shape}, expected ({width},)"
                )
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"row for context {ctx} contains non-finite logits")
            arr.setflags(write=False)
            self.rows[ctx] = arr
        self._uniform = np.zeros(width)
        self._uniform.setflags(write=False)

    def context_key(self, prefix: Sequence[int]) -> tuple[int, ...]:
        if self.order == 1:
            return ()
        return tuple(int(t) for t in prefix[-(self.order - 1):])

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        self.vocabulary.check_ids(prefix)
        key = self.context_key(prefix)
        row = self.rows.get(key)
        if row is None:
            if self.backoff:
                return self._uniform
            raise ModelError(f"no row for context {key} and uniform fallback disabled")
        return row

    def to_fsm(self, max_states: int = 200_000) -> TableFsm | None:
        v = len(self.vocabulary)
        depth = self.order - 1
        num_states = sum(v**k for k in range(depth + 1))
        if num_states > max_states:
            return None

        # contexts enumerated by length, lexicographically within a length
        offsets = [0]
        for k in range(depth):
            offsets.append(offsets[-1] + v**k)

        def index_of(ctx: tuple[int, ...]) -> int:
            idx = 0
            for t in ctx:
                idx = idx * v + t
            return offsets[len(ctx)] + idx

        rows = np.empty((num_states, v), dtype=np.float64)
        next_state = np.empty((num_states, v), dtype=np.int32)
        for length in range(depth + 1):
            for flat in range(v**length):
                ctx, rem = [], flat
                for _ in range(length):
                    ctx.append(rem % v)
                    rem //= v
                ctx = tuple(reversed(ctx))
                sid = index_of(ctx)
                row = self.rows.get(ctx)
                if row is None:
                    if not self.backoff:
                        return None
                    row = self._uniform
                rows[sid] = row
                for tok in range(v):
                    nxt = (ctx + (tok,))[-depth:] if depth else ()
                    next_state[sid, tok] = index_of(nxt)
        return TableFsm(rows=rows, next_state=next_state, start=0, eos_id=self.vocabulary.eos_id)


def apply_temperature(logits: np.ndarray, tau: float) -> np.ndarray:
    """Divide every logit by tau (> 0)."""
    if not tau > 0:
        raise ModelError(f"temperature must be positive, got {tau}")
    return np.asarray(logits, dtype=np.float64) / tau


def _descending_order(logits: np.ndarray) -> np.ndarray:
    # stable sort on negated logits: equal logits rank by lower token id
    return np.argsort(-logits, kind="stable")


def apply_top_k(logits: np.ndarray, k: int) -> np.ndarray:
    """Mask every entry outside the k largest with the sentinel.

    Ties at the cut rank by lower token id. Idempotent, and the argmax symbol
    is always kept.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not 1 <= k <= logits.shape[0]:
        raise ModelError(f"top-k k={k} out of range for width {logits.shape[0]}")
    out = np.full_like(logits, MASK_SENTINEL)
    keep = _descending_order(logits)[:k]
    out[keep] = logits[keep]
    return out


def apply_nucleus(logits: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest head of the softmax, by descending probability, whose
    mass reaches p; mask the rest. p = 1 is the identity."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 < p <= 1:
        raise ModelError(f"nucleus p={p} out of range (0, 1]")
    if p == 1.0:
        return logits.copy()
    order = _descending_order(logits)
    shifted = logits[order] - logits[order[0]]
    probs = np.exp(shifted)
    probs /= probs.sum()
    # 1e-12 slack: keep the set minimal when p falls exactly on a partial sum
    cut = int(np.searchsorted(np.cumsum(probs), p - 1e-12)) + 1
    out = np.full_like(logits, MASK_SENTINEL)
    keep = order[:cut]
    out[keep] = logits[keep]
    return out


class TransformedProvider(Provider):
    """A provider composed with a deterministic logit map (itself a provider)."""

    def __init__(self, base: Provider, fn: Callable[[np.ndarray], np.ndarray], label: str):
        self.base = base
        self.fn = fn
        self.vocabulary = base.vocabulary
        self.descriptor = f"{label}({base.descriptor})"

    @property
    def clamps(self) -> Mapping[int, int]:
        return self.base.clamps

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        return self.fn(self.base.next_logits(prefix))

    def to_fsm(self, max_states: int = 200_000) -> TableFsm | None:
        fsm = self.base.to_fsm(max_states)
        if fsm is None:
            return None
        rows = np.stack([self.fn(row) for row in fsm.rows])
        return TableFsm(rows=rows, next_state=fsm.next_state, start=fsm.start, eos_id=fsm.eos_id)


class BiasedProvider(Provider):
    """Adds a fixed bias vector to every context's logits."""

    def __init__(self, base: Provider, bias: np.ndarray):
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (len(base.vocabulary),):
            raise ModelError(
                f"bias width {bias.shape} does not match vocabulary {len(base.vocabulary)}"
            )
        self.base = base
        self.bias = bias
        self.vocabulary = base.vocabulary
        self.descriptor = f"bias({base.descriptor})"

    @property
    def clamps(self) -> Mapping[int, int]:
        return self.base.clamps

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        return self.base.next_logits(prefix) + self.bias

    def to_fsm(self, max_states: int = 200_000) -> TableFsm | None:
        fsm = self.base.to_fsm(max_states)
        if fsm is None:
            return None
        return TableFsm(
            rows=fsm.rows + self.bias[None, :],
            next_state=fsm.next_state,
            start=fsm.start,
            eos_id=fsm.eos_id,
        )


class ClampedProvider(Provider):
    """Forces fixed symbols at given generated positions.

    The clamped positions are consumed by the generation loop directly (the
    structural assignment for that position is replaced outright), so logits
    pass through unchanged here.
    """

    def __init__(self, base: Provider, clamps: Mapping[int, int]):
        merged = dict(base.clamps)
        for pos, tok in clamps.items():
            pos, tok = int(pos), int(tok)
            if pos < 0:
                raise ModelError(f"clamp position {pos} must be >= 0")
            base.vocabulary.check_ids([tok])
            if pos in merged and merged[pos] != tok:
                raise ModelError(f"conflicting clamps at position {pos}")
            merged[pos] = tok
        self.base = base
        self._clamps = merged
        self.vocabulary = base.vocabulary
        self.descriptor = f"clamp({base.descriptor})"

    @property
    def clamps(self) -> Mapping[int, int]:
        return self._clamps

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        return self.base.next_logits(prefix)

    def to_fsm(self, max_states: int = 200_000) -> TableFsm | None:
        return self.base.to_fsm(max_states)


def _parse_table_json(obj: dict, descriptor: str) -> TableLm:
    for field in ("order", "vocab", "eos", "rows"):
        if field not in obj:
            raise ModelError(f"table LM file missing field {field!r}")
    symbols = tuple(obj["vocab"])
    eos = obj["eos"]
    if symbols.count(eos) != 1:
        raise ModelError(f"EOS symbol {eos!r} must appear exactly once in vocab")
    vocab = Vocabulary(symbols=symbols, eos_id=symbols.index(eos))
    rows = {}
    for key, row in obj["rows"].items():
        parts = key.split(_CTX_SEP) if key else []
        ctx = tuple(vocab.id_of(s) for s in parts)
        rows[ctx] = row
    return TableLm(
        vocabulary=vocab,
        order=obj["order"],
        rows=rows,
        backoff=bool(obj.get("backoff", False)),
        descriptor=descriptor,
    )


def _reject_duplicate_keys(pairs):
    seen = set()
    for key, _ in pairs:
        if key in seen:
            raise ModelError(f"duplicate context key {key!r}")
        seen.add(key)
    return dict(pairs)


def load_table_lm(path) -> TableLm:
    """Load a table LM from its JSON file format."""
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh, object_pairs_hook=_reject_duplicate_keys)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot load table LM from {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ModelError(f"table LM file {path} must hold a JSON object")
    return _parse_table_json(obj, descriptor=f"table:{path}")


def save_table_lm(lm: TableLm, path) -> None:
    vocab = lm.vocabulary
    rows = {
        _CTX_SEP.join(vocab.symbols[t] for t in ctx): [float(x) for x in row]
        for ctx, row in sorted(lm.rows.items())
    }
    obj = {
        "order": lm.order,
        "vocab": list(vocab.symbols),
        "eos": vocab.eos_symbol,
        "rows": rows,
    }
    if lm.backoff:
        obj["backoff"] = True
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=True, sort_keys=True, indent=1)
        fh.write("\n")


def fit_table_lm(
    corpus: Iterable[Sequence[int]],
    vocabulary: Vocabulary,
    order: int,
    smoothing: float = 1.0,
    descriptor: str = "table:fit",
) -> TableLm:
    """Count-based fit: logits are log(count + smoothing) per context.

    Each corpus sequence is a token-id string; an EOS is counted after its
    last token if not already present. Additive smoothing keeps every logit
    finite.
    """
    if smoothing <= 0:
        raise ModelError("smoothing must be positive to keep logits finite")
    width = len(vocabulary)
    counts: dict[tuple[int, ...], np.ndarray] = {}
    depth = order - 1
    for seq in corpus:
        seq = [int(t) for t in seq]
        vocabulary.check_ids(seq)
        if not seq or seq[-1] != vocabulary.eos_id:
            seq = seq + [vocabulary.eos_id]
        for t, tok in enumerate(seq):
            ctx = tuple(seq[max(0, t - depth):t]) if depth else ()
            if ctx not in counts:
                counts[ctx] = np.zeros(width)
            counts[ctx][tok] += 1.0
    rows = {ctx: np.log(c + smoothing) for ctx, c in counts.items()}
    return TableLm(vocabulary, order, rows, backoff=True, descriptor=descriptor)
