"""Tensor-product bookkeeping: embedding operators into a register and partial traces.

The register factor order is fixed everywhere as e_A (3), n_A (2), e_B (3), n_B (2).
"""

from __future__ import annotations

import string

import numpy as np

REGISTER_DIMS = (3, 2, 3, 2)


def kron_all(*ops):
    """Kronecker product of the given operators, left to right."""
    out = np.asarray(ops[0], dtype=complex)
    for op in ops[1:]:
        out = np.kron(out, np.asarray(op, dtype=complex))
    return out


def embed(op, dims, axes):
    """Embed ``op`` (acting on the subsystems ``axes``, in that order) into the
    full tensor product with identity on every other factor.

    ``dims`` is the full factor-dimension list; ``axes`` indexes into it.
    """
    dims = list(dims)
    axes = list(axes)
    op = np.asarray(op, dtype=complex)
    d_axes = int(np.prod([dims[i] for i in axes]))
    if op.shape != (d_axes, d_axes):
        raise ValueError(f"operator shape {op.shape} does not match axes dims {d_axes}")
    rest = [i for i in range(len(dims)) if i not in axes]
    d_rest = int(np.prod([dims[i] for i in rest])) if rest else 1
    full = np.kron(op, np.eye(d_rest, dtype=complex))
    order = axes + rest
    if order == list(range(len(dims))):
        return full
    perm = list(np.argsort(order))
    nd = len(dims)
    t = full.reshape([dims[i] for i in order] * 2)
    t = t.transpose(perm + [p + nd for p in perm])
    d = int(np.prod(dims))
    return np.ascontiguousarray(t.reshape(d, d))


def partial_trace(mat, dims, keep):
    """Trace out every factor not listed in ``keep`` (kept factors stay in
    their original relative order)."""
    dims = list(dims)
    keep = sorted(keep)
    nd = len(dims)
    letters = string.ascii_lowercase
    row = list(letters[:nd])
    col = list(letters[nd:2 * nd])
    for i in range(nd):
        if i not in keep:
            col[i] = row[i]
    out = "".join(row[i] for i in keep) + "".join(col[i] for i in keep)
    spec = "".join(row) + "".join(col) + "->" + out
    t = np.asarray(mat, dtype=complex).reshape(dims * 2)
    dk = int(np.prod([dims[i] for i in keep]))
    return np.einsum(spec, t).reshape(dk, dk)


def is_hermitian(mat, tol=1e-12):
    mat = np.asarray(mat)
    scale = max(np.linalg.norm(mat), 1.0)
    return np.linalg.norm(mat - mat.conj().T) <= tol * scale


def basis_ket(dim, index):
    v = np.zeros(dim, dtype=complex)
    v[index] = 1.0
    return v
