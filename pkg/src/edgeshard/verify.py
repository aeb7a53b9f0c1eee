"""Randomized verification of claimed GEMM outputs.

Checks C == A @ B by projecting both sides onto random vectors:

    r^T C s  ==  (r^T A) (B s)

Each trial costs a few matrix-vector products, O(n) memory per vector, and
catches any corruption except with probability about 1/|field| per trial.
Integer inputs are checked exactly over random 32-bit vectors (intermediate
dots promoted to Python ints to avoid overflow); floating inputs use a
relative tolerance.
"""

from __future__ import annotations

import numpy as np

FIELD_BITS = 32
FLOAT_RTOL = 1e-6


def verify_gemm_output(a, b, c_claimed, trials: int = 16, rng=None) -> bool:
    """True iff every random projection of `c_claimed` matches A @ B."""
    a = np.asarray(a)
    b = np.asarray(b)
    c = np.asarray(c_claimed)
    if a.ndim != 2 or b.ndim != 2 or c.ndim != 2:
        raise ValueError("verify_gemm_output expects 2-D matrices")
    if a.shape[1] != b.shape[0] or c.shape != (a.shape[0], b.shape[1]):
        raise ValueError(
            f"dimension mismatch: A{a.shape} @ B{b.shape} vs C{c.shape}"
        )
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()

    exact = all(np.issubdtype(x.dtype, np.integer) for x in (a, b, c))
    m, q = c.shape
    if exact:
        # keep the int64 matvecs exact: |entry| * 2^32 * inner_dim < 2^62
        biggest = max(int(np.abs(x).max(initial=0)) for x in (a, b, c))
        inner = max(a.shape + b.shape)
        if biggest * (1 << FIELD_BITS) * max(inner, 1) >= 1 << 62:
            a, b, c = a.astype(object), b.astype(object), c.astype(object)
    for _ in range(trials):
        if exact:
            r = rng.integers(0, 1 << FIELD_BITS, size=m, dtype=np.int64)
            s = rng.integers(0, 1 << FIELD_BITS, size=q, dtype=np.int64)
            # r^T A and B s stay within int64 for test-scale matrices; the
            # final dots multiply 32-bit-scale vectors by ~2^50-scale ones,
            # so they run over Python ints.
            ra = (r @ a).tolist()
            bs = (b @ s).tolist()
            cs = (c @ s).tolist()
            lhs = sum(int(ri) * int(csi) for ri, csi in zip(r.tolist(), cs))
            rhs = sum(int(rai) * int(bsi) for rai, bsi in zip(ra, bs))
            if lhs != rhs:
                return False
        else:
            r = rng.standard_normal(m)
            s = rng.standard_normal(q)
            lhs = r @ (c @ s)
            rhs = (r @ a) @ (b @ s)
            scale = max(abs(lhs), abs(rhs), 1.0)
            if abs(lhs - rhs) > FLOAT_RTOL * scale:
                return False
    return True
