"""Generation as a deterministic function of explicit Gumbel noise.

A noise record holds one standard-Gumbel draw per (position, symbol); decoding
takes, at each position, the argmax of logits + noise over the vocabulary.
Everything downstream (hindsight inference, counterfactuals) relies on the
replay identity: decoding a recorded noise under the same provider reproduces
the recorded string exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .gumbel import standard_gumbel_from_uniform, uniform_open
from .models import Provider, Vocabulary

__all__ = [
    "EngineError",
    "NoiseRecord",
    "Generation",
    "sample_prior_noise",
    "generate_with_noise",
    "generate",
    "generate_many",
]

_MAGIC = b"GNR1"
_HEADER = struct.Struct("<4sIIBBq")
_DTYPE_CODES = {"f32": 0, "f64": 1}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}
_ORIGIN_CODES = {"prior": 0, "posterior": 1}
_ORIGIN_NAMES = {v: k for k, v in _ORIGIN_CODES.items()}

_DEBUG_VOCAB_LIMIT = 64


class EngineError(Exception):
    """Invalid noise record, exhausted noise, or invalid generation request."""


@dataclass
class NoiseRecord:
    """Per-position, per-symbol sampling noise, with provenance."""

    matrix: np.ndarray  # (positions, vocab) float64
    origin: str = "prior"
    seed: int | None = None

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise EngineError(f"noise matrix must be 2-D, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise EngineError("noise matrix contains non-finite entries")
        if self.origin not in _ORIGIN_CODES:
            raise EngineError(f"origin must be prior|posterior, got {self.origin!r}")

    @property
    def num_positions(self) -> int:
        return self.matrix.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[1]

    def save(self, path, dtype: str = "f64") -> None:
        """Write the binary container (magic GNR1, little-endian header + rows)."""
        if dtype not in _DTYPE_CODES:
            raise EngineError(f"dtype must be f32|f64, got {dtype!r}")
        seed = -1 if self.seed is None else int(self.seed)
        header = _HEADER.pack(
            _MAGIC,
            self.num_positions,
            self.vocab_size,
            _DTYPE_CODES[dtype],
            _ORIGIN_CODES[self.origin],
            seed,
        )
        data = self.matrix.astype("<f4" if dtype == "f32" else "<f8").tobytes()
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(data)

    @classmethod
    def load(cls, path) -> "NoiseRecord":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size or raw[:4] != _MAGIC:
            raise EngineError(f"{path}: not a GNR1 noise record")
        magic, positions, vocab, dtype_code, origin_code, seed = _HEADER.unpack_from(raw)
        if dtype_code not in _DTYPE_NAMES or origin_code not in _ORIGIN_NAMES:
            raise EngineError(f"{path}: bad dtype/origin code")
        wire = np.dtype("<f4" if _DTYPE_NAMES[dtype_code] == "f32" else "<f8")
        expected = _HEADER.size + positions * vocab * wire.itemsize
        if len(raw) != expected:
            raise EngineError(f"{path}: truncated record ({len(raw)} bytes, expected {expected})")
        matrix = np.frombuffer(raw, dtype=wire, offset=_HEADER.size).astype(np.float64)
        matrix = matrix.reshape(positions, vocab)
        return cls(matrix=matrix, origin=_ORIGIN_NAMES[origin_code], seed=None if seed == -1 else seed)

    def to_debug_json(self) -> str:
        """Human-readable JSON form, only for small vocabularies."""
        if self.vocab_size > _DEBUG_VOCAB_LIMIT:
            raise EngineError(f"debug JSON form limited to vocab <= {_DEBUG_VOCAB_LIMIT}")
        obj = {
            "format": "gnr-debug",
            "positions": self.num_positions,
            "vocab_size": self.vocab_size,
            "origin": self.origin,
            "seed": self.seed,
            "rows": [[float(x) for x in row] for row in self.matrix],
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_debug_json(cls, text: str) -> "NoiseRecord":
        obj = json.loads(text)
        if obj.get("format") != "gnr-debug":
            raise EngineError("not a gnr-debug record")
        matrix = np.asarray(obj["rows"], dtype=np.float64)
        matrix = matrix.reshape(obj["positions"], obj["vocab_size"])
        return cls(matrix=matrix, origin=obj["origin"], seed=obj.get("seed"))


@dataclass
class Generation:
    """An emitted string together with the noise that produced it."""

    prompt: list[int]
    tokens: list[int]
    noise: NoiseRecord
    provider_descriptor: str
    stop: str  # "eos" | "cap"


def sample_prior_noise(
    num_positions: int,
    vocabulary: Vocabulary,
    rng: np.random.Generator,
    seed: int | None = None,
) -> NoiseRecord:
    """i.i.d. standard Gumbel noise for num_positions rows."""
    if num_positions < 1:
        raise EngineError("num_positions must be >= 1")
    u = uniform_open(rng, (num_positions, len(vocabulary)))
    return NoiseRecord(standard_gumbel_from_uniform(u), origin="prior", seed=seed)


def _decode(provider: Provider, prompt, matrix: np.ndarray, max_len: int) -> list[int]:
    vocab = provider.vocabulary
    clamps = provider.clamps
    prefix = list(prompt)
    out: list[int] = []
    for t in range(max_len):
        tok = clamps.get(t)
        if tok is None:
            if t >= matrix.shape[0]:
                raise EngineError(
                    f"noise record too short: position {t} requested, {matrix.shape[0]} rows available"
                )
            scores = provider.next_logits(prefix) + matrix[t]
            tok = int(np.argmax(scores))
        out.append(tok)
        prefix.append(tok)
        if tok == vocab.eos_id:
            break
    return out


def generate_with_noise(provider: Provider, prompt, noise: NoiseRecord, max_len: int) -> list[int]:
    """Decode a noise record: argmax of logits + noise row at each position.

    Floating-point argmax ties break toward the lowest token id. Stops after
    EOS or after max_len tokens; a missing noise row only raises if the loop
    actually reaches it.
    """
    if max_len < 1:
        raise EngineError("max_len must be >= 1")
    vocab = provider.vocabulary
    vocab.check_ids(prompt)
    if noise.vocab_size != len(vocab):
        raise EngineError(
            f"noise width {noise.vocab_size} does not match vocabulary {len(vocab)}"
        )
    return _decode(provider, prompt, noise.matrix, max_len)


def generate(
    provider: Provider,
    prompt,
    max_len: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> Generation:
    """Sample a string, recording noise for exactly the emitted positions.

    Noise rows are drawn lazily, one per emitted position (clamped positions
    draw and record a row too, but never read it).
    """
    if max_len < 1:
        raise EngineError("max_len must be >= 1")
    vocab = provider.vocabulary
    vocab.check_ids(prompt)
    width = len(vocab)
    clamps = provider.clamps
    rows: list[np.ndarray] = []
    prefix = list(prompt)
    out: list[int] = []
    for t in range(max_len):
        row = standard_gumbel_from_uniform(uniform_open(rng, width))
        rows.append(row)
        tok = clamps.get(t)
        if tok is None:
            tok = int(np.argmax(provider.next_logits(prefix) + row))
        out.append(tok)
        prefix.append(tok)
        if tok == vocab.eos_id:
            break
    noise = NoiseRecord(np.stack(rows), origin="prior", seed=seed)
    stop = "eos" if out and out[-1] == vocab.eos_id else "cap"
    return Generation(list(prompt), out, noise, provider.descriptor, stop)


def generate_many(provider: Provider, prompt, n: int, max_len: int, rng: np.random.Generator):
    """Batch Monte-Carlo generation; the string distribution matches generate().

    Draws the whole (n, max_len, vocab) noise block up front, then decodes via
    the dense-table fast path when the provider supports it. The generic
    fallback consumes the identical block, so both paths return identical
    arrays. Returns (tokens, lengths) with tokens padded by -1 after EOS.
    """
    if max_len < 1 or n < 1:
        raise EngineError("n and max_len must be >= 1")
    vocab = provider.vocabulary
    vocab.check_ids(prompt)
    u = uniform_open(rng, (n, max_len, len(vocab)))
    noise = standard_gumbel_from_uniform(u)
    fsm = provider.to_fsm()
    if fsm is not None:
        shifted = replace(fsm, start=fsm.state_of(prompt))
        return kernels.fsm_decode(shifted, noise, clamps=provider.clamps)
    tokens = np.full((n, max_len), -1, dtype=np.int32)
    lengths = np.zeros(n, dtype=np.int32)
    for i in range(n):
        out = _decode(provider, prompt, noise[i], max_len)
        tokens[i, : len(out)] = out
        lengths[i] = len(out)
    return tokens, lengths
