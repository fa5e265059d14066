"""Kernel backend selection: compiled extension if available, numpy fallback.

Set ``GUMBELCF_KERNELS=py`` or ``=cy`` to force a backend (``cy`` raises if the
extension is missing). The two backends implement the same deterministic
functions of pre-drawn uniforms; a fixed seed reproduces results exactly
within a backend.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

__all__ = ["BACKEND", "posterior_rows", "fsm_decode", "fsm_posterior"]

_choice = os.environ.get("GUMBELCF_KERNELS", "auto")
if _choice not in {"auto", "py", "cy"}:
    raise ValueError(f"GUMBELCF_KERNELS must be auto|py|cy, got {_choice!r}")

_impl = None
if _choice in ("auto", "cy"):
    try:
        from . import _kernels_cy as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "cy":
            raise
        _impl = None
if _impl is None:
    _impl = _kernels_py

BACKEND = "cy" if _impl is not _kernels_py else "py"


def _clamp_array(t_max: int, clamps=None) -> np.ndarray:
    arr = np.full(t_max, -1, dtype=np.int32)
    if clamps:
        for pos, tok in clamps.items():
            if 0 <= pos < t_max:
                arr[pos] = tok
    return arr


def posterior_rows(logits, observed, uniforms) -> np.ndarray:
    """Hindsight noise rows; see ``_kernels_py.posterior_rows``."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    observed = np.ascontiguousarray(observed, dtype=np.int64)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    return _impl.posterior_rows(logits, observed, uniforms)


def fsm_decode(fsm, noise, clamps=None):
    """Batch-decode noise blocks (N, T, V) through a dense table FSM."""
    noise = np.ascontiguousarray(noise, dtype=np.float64)
    clamp = _clamp_array(noise.shape[1], clamps)
    return _impl.fsm_decode(fsm.rows, fsm.next_state, fsm.start, noise, fsm.eos_id, clamp)


def fsm_posterior(fsm, tokens, lengths, uniforms, clamps=None):
    """Batch hindsight inference (posterior rows + fresh-prior extension)."""
    tokens = np.ascontiguousarray(tokens, dtype=np.int32)
    lengths = np.ascontiguousarray(lengths, dtype=np.int32)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    clamp = _clamp_array(uniforms.shape[1], clamps)
    return _impl.fsm_posterior(fsm.rows, fsm.next_state, fsm.start, tokens, lengths, uniforms, clamp)
