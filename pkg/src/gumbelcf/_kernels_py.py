"""Pure-numpy kernel implementations.

These are the hot inner loops of the engine. A Cython twin with identical
semantics lives in ``_kernels_cy.pyx``; ``kernels`` picks one at import time.
All randomness is pre-drawn by the caller (uniform arrays), so a kernel is a
deterministic function of its inputs and the two backends are interchangeable.
"""

from __future__ import annotations

import numpy as np

MASK_SENTINEL = -1.0e9


def _std_gumbel(u):
    return -np.log(-np.log(u))


def _fixup_rows(phi, w, y, sw):
    """Nudge loser entries down by ulps until the observed symbol wins the
    argmax under first-maximum tie-breaking.

    Analytically ties happen with probability zero; in floating point the
    truncated draw can land within rounding error of its bound, so the argmax
    condition is enforced exactly here.
    """
    m, v = phi.shape
    ar = np.arange(m)
    cols = np.arange(v)[None, :]
    scores = phi + y
    bad = (scores > sw[:, None]) | ((scores == sw[:, None]) & (cols < w[:, None]))
    bad[ar, w] = False
    while bad.any():
        y[bad] = np.nextafter(y[bad], -np.inf)
        scores = phi + y
        still = (scores > sw[:, None]) | ((scores == sw[:, None]) & (cols < w[:, None]))
        bad &= still
    return y


def posterior_rows(logits: np.ndarray, observed: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Hindsight-sample noise rows conditioned on each row's observed symbol.

    Per row: the winner's perturbed score (logit + noise) is the maximum over
    the vocabulary, which is Gumbel(logsumexp(logits)) and independent of
    which symbol won; every loser's perturbed score is a Gumbel at its own
    logit truncated at that maximum. The returned rows satisfy the argmax
    condition exactly.
    """
    phi = np.ascontiguousarray(logits, dtype=np.float64)
    w = np.asarray(observed, dtype=np.int64)
    u = np.ascontiguousarray(uniforms, dtype=np.float64)
    m, v = phi.shape
    ar = np.arange(m)
    if np.any(phi[ar, w] <= MASK_SENTINEL):
        raise ValueError("observed symbol is masked; posterior undefined")
    mx = phi.max(axis=1)
    logz = mx + np.log(np.sum(np.exp(phi - mx[:, None]), axis=1))
    s = _std_gumbel(u[ar, w]) + logz  # the realized maximum score
    noise_w = s - phi[ar, w]
    y = -np.logaddexp(-(s[:, None] - phi), -_std_gumbel(u))
    y[ar, w] = noise_w
    sw = phi[ar, w] + noise_w  # winner score as the decoder will recompute it
    return _fixup_rows(phi, w, y, sw)


def fsm_decode(rows, next_state, start, noise, eos_id, clamp=None):
    """Decode N noise blocks through a dense table FSM.

    ``noise`` is (N, T, V); returns (tokens, lengths) with tokens padded by -1
    after EOS. ``clamp`` is an optional (T,) int array, -1 meaning unclamped;
    a clamped step emits the fixed symbol without reading its noise row.
    """
    n, t_max, _ = noise.shape
    tokens = np.full((n, t_max), -1, dtype=np.int32)
    lengths = np.zeros(n, dtype=np.int32)
    state = np.full(n, start, dtype=np.int64)
    alive = np.arange(n)
    for t in range(t_max):
        if alive.size == 0:
            break
        if clamp is not None and clamp[t] >= 0:
            tok = np.full(alive.size, clamp[t], dtype=np.int64)
        else:
            scores = rows[state[alive]] + noise[alive, t, :]
            tok = np.argmax(scores, axis=1)
        tokens[alive, t] = tok
        lengths[alive] = t + 1
        state[alive] = next_state[state[alive], tok]
        alive = alive[tok != eos_id]
    return tokens, lengths


def fsm_posterior(rows, next_state, start, tokens, lengths, uniforms, clamp=None):
    """Batched hindsight inference against a dense table FSM.

    For trial n, positions t < lengths[n] are posterior rows conditioned on
    tokens[n, t]; later positions (and clamped ones) are fresh prior rows from
    the same uniform block.
    """
    n, t_max, v = uniforms.shape
    noise = np.empty((n, t_max, v), dtype=np.float64)
    state = np.full(n, start, dtype=np.int64)
    for t in range(t_max):
        u_t = uniforms[:, t, :]
        active = lengths > t
        clamped = clamp is not None and clamp[t] >= 0
        idx = np.nonzero(active)[0]
        prior_idx = np.nonzero(~active)[0]
        if clamped:
            noise[:, t, :] = _std_gumbel(u_t)
        else:
            if prior_idx.size:
                noise[prior_idx, t, :] = _std_gumbel(u_t[prior_idx])
            if idx.size:
                w = tokens[idx, t].astype(np.int64)
                noise[idx, t, :] = posterior_rows(rows[state[idx]], w, u_t[idx])
        if idx.size:
            w = tokens[idx, t].astype(np.int64)
            state[idx] = next_state[state[idx], w]
    return noise
