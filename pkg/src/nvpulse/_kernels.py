"""Hot numerical kernels: midpoint-sampled piecewise propagation and the
exact GRAPE backward pass.

Two interchangeable backends are provided: numba @njit kernels and a pure
numpy path.  Selection: NVPULSE_BACKEND environment variable ("numba",
"numpy", or "auto" = numba when importable), overridable at runtime with
``set_backend``.  Both backends implement the same discrete model, so results
agree to floating-point accuracy; the numba path is the fast one (see
benchmarks/bench_propagation.py).

Model per substep: A_j = -i*dt*H(t_mid); the step propagator is the Taylor
polynomial of exp(A_j) truncated at an order chosen so the truncation is at
machine precision.  The backward pass differentiates exactly that polynomial,
so gradients match finite differences of the forward model to roundoff.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_ENV = os.environ.get("NVPULSE_BACKEND", "auto").lower()
if _ENV not in ("auto", "numba", "numpy"):
    raise ValueError(f"NVPULSE_BACKEND must be auto/numba/numpy, got {_ENV!r}")
if _ENV == "numba" and not HAS_NUMBA:
    raise ImportError("NVPULSE_BACKEND=numba but numba is not importable")
_BACKEND = "numpy" if _ENV == "numpy" or not HAS_NUMBA else "numba"


def set_backend(name):
    """Force the kernel backend ("numba" or "numpy")."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError("backend must be 'numba' or 'numpy'")
    if name == "numba" and not HAS_NUMBA:
        raise ImportError("numba backend requested but numba is not importable")
    _BACKEND = name


def get_backend():
    return _BACKEND


def taylor_order(a_norm):
    """Smallest Taylor order with truncation below ~1e-16 at ||A|| = a_norm."""
    if a_norm > 0.6:
        raise ValueError("substep too coarse for fixed-order Taylor (||A|| > 0.6)")
    order = 3
    while order < 16:
        if a_norm ** (order + 1) / math.factorial(order + 1) < 1e-16:
            break
        order += 1
    return order


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _build_h_np(static, rows, cols, vals, ptr, freqs, coefs, tmids):
    """Stack of substep Hamiltonians (nsub, n, n) from COO term data."""
    nsub = tmids.shape[0]
    n = static.shape[0]
    h = np.zeros((nsub, n, n), dtype=np.complex128)
    phase = np.exp(1j * np.outer(tmids, freqs)) * coefs  # (nsub, T)
    for m in range(len(freqs)):
        sl = slice(ptr[m], ptr[m + 1])
        contrib = phase[:, m:m + 1] * vals[sl]
        h[:, rows[sl], cols[sl]] += contrib
        h[:, cols[sl], rows[sl]] += contrib.conj()
    h += static
    return h


def _steps_np(static, rows, cols, vals, ptr, freqs, coefs, t0, dt, nsub, order):
    tmids = t0 + (np.arange(nsub) + 0.5) * dt
    a = -1j * dt * _build_h_np(static, rows, cols, vals, ptr, freqs, coefs, tmids)
    n = static.shape[0]
    eye = np.eye(n, dtype=np.complex128)
    e = eye + a / order
    for k in range(order - 1, 0, -1):
        e = eye + (a / k) @ e
    return e


def _chain_np(steps, u0):
    u = u0.copy()
    for j in range(steps.shape[0]):
        u = steps[j] @ u
    return u


def _grad_m_np(steps, f_in, r_after):
    """M_j = F_{j-1} @ R_{j+1} for every substep of one slice."""
    nsub, n, _ = steps.shape
    f_prev = np.empty_like(steps)
    f = f_in
    for j in range(nsub):
        f_prev[j] = f
        f = steps[j] @ f
    m = np.empty_like(steps)
    r = r_after
    for j in range(nsub - 1, -1, -1):
        m[j] = f_prev[j] @ r
        r = r @ steps[j]
    return m


def _frechet_traces_np(static, rows, cols, vals, ptr, freqs, coefs, t0, dt, m_all, order):
    """Per-term sums over substeps of tr(Y_j O_T) e^{i nu t} and
    tr(Y_j O_T^dag) e^{-i nu t}, with Y_j the adjoint Frechet factor of the
    truncated exponential at A_j against M_j."""
    nsub = m_all.shape[0]
    tmids = t0 + (np.arange(nsub) + 0.5) * dt
    a = -1j * dt * _build_h_np(static, rows, cols, vals, ptr, freqs, coefs, tmids)
    g = m_all.copy()
    y = m_all.copy()
    ap = a
    fact = 1.0
    for nn in range(2, order + 1):
        g = a @ g + m_all @ ap
        if nn < order:
            ap = a @ ap
        fact *= nn
        y = y + g / fact
    nterms = len(freqs)
    out = np.zeros((nterms, 2), dtype=np.complex128)
    phase = np.exp(1j * np.outer(tmids, freqs))  # (nsub, T)
    for m in range(nterms):
        sl = slice(ptr[m], ptr[m + 1])
        p = (y[:, cols[sl], rows[sl]] * vals[sl]).sum(axis=1)
        q = (y[:, rows[sl], cols[sl]] * vals[sl].conj()).sum(axis=1)
        out[m, 0] = (p * phase[:, m]).sum()
        out[m, 1] = (q * phase[:, m].conj()).sum()
    return out


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _build_h_nb(static, rows, cols, vals, ptr, freqs, coefs, t):
        n = static.shape[0]
        h = static.copy()
        for m in range(freqs.shape[0]):
            c = coefs[m] * np.exp(1j * freqs[m] * t)
            cc = np.conj(c)
            for p in range(ptr[m], ptr[m + 1]):
                r = rows[p]
                q = cols[p]
                v = vals[p]
                h[r, q] += c * v
                h[q, r] += cc * np.conj(v)
        return h

    @njit(cache=True)
    def _expm_taylor_nb(a, order):
        n = a.shape[0]
        e = a / order
        for i in range(n):
            e[i, i] += 1.0
        for k in range(order - 1, 0, -1):
            e = np.dot(a / k, e)
            for i in range(n):
                e[i, i] += 1.0
        return e

    @njit(cache=True, parallel=True)
    def _steps_nb(static, rows, cols, vals, ptr, freqs, coefs, t0, dt, nsub, order):
        n = static.shape[0]
        out = np.empty((nsub, n, n), dtype=np.complex128)
        for j in prange(nsub):
            tm = t0 + (j + 0.5) * dt
            h = _build_h_nb(static, rows, cols, vals, ptr, freqs, coefs, tm)
            out[j] = _expm_taylor_nb(-1j * dt * h, order)
        return out

    @njit(cache=True)
    def _chain_nb(steps, u0):
        u = u0.copy()
        for j in range(steps.shape[0]):
            u = np.dot(steps[j], u)
        return u

    @njit(cache=True)
    def _grad_m_nb(steps, f_in, r_after):
        nsub, n, _ = steps.shape
        f_prev = np.empty_like(steps)
        f = f_in.copy()
        for j in range(nsub):
            f_prev[j] = f
            f = np.dot(steps[j], f)
        m = np.empty_like(steps)
        r = r_after.copy()
        for j in range(nsub - 1, -1, -1):
            m[j] = np.dot(f_prev[j], r)
            r = np.dot(r, steps[j])
        return m

    @njit(cache=True)
    def _frechet_adjoint_nb(a, m, order):
        g = m.copy()
        y = m.copy()
        ap = a.copy()
        fact = 1.0
        for nn in range(2, order + 1):
            g = np.dot(a, g) + np.dot(m, ap)
            if nn < order:
                ap = np.dot(a, ap)
            fact *= nn
            y = y + g / fact
        return y

    @njit(cache=True, parallel=True)
    def _frechet_traces_nb(static, rows, cols, vals, ptr, freqs, coefs, t0, dt,
                           m_all, order):
        nsub = m_all.shape[0]
        nterms = freqs.shape[0]
        acc = np.zeros((nsub, nterms, 2), dtype=np.complex128)
        for j in prange(nsub):
            tm = t0 + (j + 0.5) * dt
            h = _build_h_nb(static, rows, cols, vals, ptr, freqs, coefs, tm)
            y = _frechet_adjoint_nb(-1j * dt * h, m_all[j], order)
            for m in range(nterms):
                ph = np.exp(1j * freqs[m] * tm)
                p = 0.0 + 0.0j
                q = 0.0 + 0.0j
                for k in range(ptr[m], ptr[m + 1]):
                    r = rows[k]
                    c = cols[k]
                    p += vals[k] * y[c, r]
                    q += np.conj(vals[k]) * y[r, c]
                acc[j, m, 0] = p * ph
                acc[j, m, 1] = q * np.conj(ph)
        return acc.sum(axis=0)


def step_unitaries(static, rows, cols, vals, ptr, freqs, coefs, t0, dt, nsub, order):
    """Substep propagators exp(-i dt H(t_mid)) for one slice, (nsub, n, n)."""
    if _BACKEND == "numba":
        return _steps_nb(static, rows, cols, vals, ptr, freqs, coefs, t0, dt,
                         nsub, order)
    return _steps_np(static, rows, cols, vals, ptr, freqs, coefs, t0, dt, nsub, order)


def chain(steps, u0):
    """Ordered product steps[-1] @ ... @ steps[0] @ u0."""
    if _BACKEND == "numba":
        return _chain_nb(steps, u0)
    return _chain_np(steps, u0)


def grad_m(steps, f_in, r_after):
    if _BACKEND == "numba":
        return _grad_m_nb(steps, f_in, r_after)
    return _grad_m_np(steps, f_in, r_after)


def frechet_traces(static, rows, cols, vals, ptr, freqs, coefs, t0, dt, m_all, order):
    if _BACKEND == "numba":
        return _frechet_traces_nb(static, rows, cols, vals, ptr, freqs, coefs,
                                  t0, dt, m_all, order)
    return _frechet_traces_np(static, rows, cols, vals, ptr, freqs, coefs, t0, dt,
                              m_all, order)


def set_num_threads(n):
    """Limit numba parallel workers (no-op on the numpy backend)."""
    if HAS_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
