# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel implementations; semantics mirror ``_kernels_py``.

Same contract: callers pre-draw all uniforms, kernels are deterministic.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, log, log1p, nextafter

cnp.import_array()

DEF MASK_SENTINEL = -1.0e9


cdef inline double _logaddexp(double a, double b) nogil:
    cdef double hi = a if a > b else b
    cdef double lo = b if a > b else a
    if hi == -INFINITY:
        return -INFINITY
    return hi + log1p(exp(lo - hi))


cdef inline double _std_gumbel(double u) nogil:
    return -log(-log(u))


cdef inline void _posterior_row(
    const double[::1] phi,
    Py_ssize_t w,
    const double[::1] u,
    double[::1] out,
) nogil:
    cdef Py_ssize_t v = phi.shape[0]
    cdef Py_ssize_t j
    cdef double mx, z, logz, s, noise_w, sw, bound, y, score
    mx = phi[0]
    for j in range(1, v):
        if phi[j] > mx:
            mx = phi[j]
    z = 0.0
    for j in range(v):
        z += exp(phi[j] - mx)
    logz = mx + log(z)
    s = _std_gumbel(u[w]) + logz  # the realized maximum score
    noise_w = s - phi[w]
    sw = phi[w] + noise_w  # winner score as the decoder will recompute it
    out[w] = noise_w
    for j in range(v):
        if j == w:
            continue
        bound = s - phi[j]
        y = -_logaddexp(-bound, -_std_gumbel(u[j]))
        score = phi[j] + y
        while score > sw or (score == sw and j < w):
            y = nextafter(y, -INFINITY)
            score = phi[j] + y
        out[j] = y


def posterior_rows(object logits, object observed, object uniforms):
    cdef double[:, ::1] phi = np.ascontiguousarray(logits, dtype=np.float64)
    cdef long long[::1] w = np.ascontiguousarray(observed, dtype=np.int64)
    cdef double[:, ::1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t t_max = phi.shape[0]
    cdef Py_ssize_t t
    out_arr = np.empty((phi.shape[0], phi.shape[1]), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for t in range(t_max):
        if phi[t, w[t]] <= MASK_SENTINEL:
            raise ValueError("observed symbol is masked; posterior undefined")
    with nogil:
        for t in range(t_max):
            _posterior_row(phi[t], <Py_ssize_t> w[t], u[t], out[t])
    return out_arr


def fsm_decode(object rows, object next_state, long long start, object noise,
               long long eos_id, object clamp):
    cdef double[:, ::1] rows_v = np.ascontiguousarray(rows, dtype=np.float64)
    cdef int[:, ::1] nxt = np.ascontiguousarray(next_state, dtype=np.int32)
    cdef double[:, :, ::1] noise_v = np.ascontiguousarray(noise, dtype=np.float64)
    cdef int[::1] clamp_v = np.ascontiguousarray(clamp, dtype=np.int32)
    cdef Py_ssize_t n = noise_v.shape[0]
    cdef Py_ssize_t t_max = noise_v.shape[1]
    cdef Py_ssize_t v = noise_v.shape[2]
    tokens_arr = np.full((n, t_max), -1, dtype=np.int32)
    lengths_arr = np.zeros(n, dtype=np.int32)
    cdef int[:, ::1] tokens = tokens_arr
    cdef int[::1] lengths = lengths_arr
    cdef Py_ssize_t i, t, j, s, best_j
    cdef double best, score
    with nogil:
        for i in range(n):
            s = start
            for t in range(t_max):
                if clamp_v[t] >= 0:
                    best_j = clamp_v[t]
                else:
                    best_j = 0
                    best = rows_v[s, 0] + noise_v[i, t, 0]
                    for j in range(1, v):
                        score = rows_v[s, j] + noise_v[i, t, j]
                        if score > best:
                            best = score
                            best_j = j
                tokens[i, t] = <int> best_j
                lengths[i] = <int> (t + 1)
                s = nxt[s, best_j]
                if best_j == eos_id:
                    break
    return tokens_arr, lengths_arr


def fsm_posterior(object rows, object next_state, long long start, object tokens,
                  object lengths, object uniforms, object clamp):
    cdef double[:, ::1] rows_v = np.ascontiguousarray(rows, dtype=np.float64)
    cdef int[:, ::1] nxt = np.ascontiguousarray(next_state, dtype=np.int32)
    cdef int[:, ::1] tok = np.ascontiguousarray(tokens, dtype=np.int32)
    cdef int[::1] lens = np.ascontiguousarray(lengths, dtype=np.int32)
    cdef double[:, :, ::1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef int[::1] clamp_v = np.ascontiguousarray(clamp, dtype=np.int32)
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t t_max = u.shape[1]
    cdef Py_ssize_t v = u.shape[2]
    noise_arr = np.empty((n, t_max, v), dtype=np.float64)
    cdef double[:, :, ::1] noise = noise_arr
    cdef Py_ssize_t i, t, j, s, w
    cdef int masked = 0
    with nogil:
        for i in range(n):
            s = start
            for t in range(lens[i]):
                w = tok[i, t]
                if clamp_v[t] < 0 and rows_v[s, w] <= MASK_SENTINEL:
                    masked = 1
                s = nxt[s, w]
    if masked:
        raise ValueError("observed symbol is masked; posterior undefined")
    with nogil:
        for i in range(n):
            s = start
            for t in range(t_max):
                if t >= lens[i] or clamp_v[t] >= 0:
                    for j in range(v):
                        noise[i, t, j] = _std_gumbel(u[i, t, j])
                if t < lens[i]:
                    w = tok[i, t]
                    if clamp_v[t] < 0:
                        _posterior_row(rows_v[s], w, u[i, t], noise[i, t])
                    s = nxt[s, w]
    return noise_arr
