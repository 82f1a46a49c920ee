"""Reed-Solomon decoding of polynomial shares via Berlekamp-Welch.

A degree-d sharing evaluated at n distinct points is an RS codeword: with S
absent shares (erasures, simply omitted from the input) and E corrupted ones,
the polynomial is recoverable whenever S + 2E + d + 1 <= n.  The decoder finds
Q and L with Q(x_i) = y_i * L(x_i), deg Q <= d + e, deg L <= e, as a nonzero
kernel vector of the induced linear system; the codeword polynomial is their
exact quotient.  Honest inputs take a fast interpolate-and-verify path.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import fastops
from .poly import (
    lagrange_coeffs,
    matinv_mod,
    nullspace_vector,
    poly_deg,
    poly_divmod,
    poly_eval,
    poly_trim,
)


class DecodingError(ValueError):
    """No polynomial within the error budget explains the shares."""


@dataclass
class DecodeResult:
    """coeffs: recovered polynomial (low degree first, trimmed).
    error_positions: indices into the input arrays whose values disagree."""

    coeffs: list[int]
    error_positions: list[int]


def max_errors(n_points: int, degree: int) -> int:
    """Largest correctable error count for n present shares."""
    return max(0, (n_points - degree - 1) // 2)


def rs_decode(
    xs: list[int],
    ys: list[int],
    degree: int,
    p: int,
    error_budget: int | None = None,
) -> DecodeResult:
    """Decode shares (xs, ys) of a degree <= `degree` polynomial.

    error_budget defaults to the information-theoretic maximum
    (n - degree - 1) // 2.  Raises DecodingError when no polynomial of the
    stated degree agrees with all but error_budget shares.
    """
    n = len(xs)
    if n != len(ys):
        raise ValueError("xs and ys must align")
    if len(set(xs)) != n:
        raise ValueError("evaluation points must be distinct")
    if n < degree + 1:
        raise DecodingError(f"{n} shares cannot determine degree {degree}")
    e_max = max_errors(n, degree) if error_budget is None else error_budget
    if e_max < 0 or degree + 2 * e_max + 1 > n:
        raise DecodingError(f"error budget {e_max} infeasible for n={n}, degree={degree}")

    xs = [x % p for x in xs]
    ys = [y % p for y in ys]

    # Fast path: interpolate the first degree+1 shares and verify the rest.
    probe = lagrange_coeffs(xs[: degree + 1], ys[: degree + 1], p)
    if poly_deg(probe) <= degree:
        bad = [i for i in range(n) if poly_eval(probe, xs[i], p) != ys[i]]
        if not bad:
            return DecodeResult(probe, [])
    if e_max == 0:
        raise DecodingError("shares are inconsistent and no error budget remains")

    # Berlekamp-Welch at the full budget: unknowns are Q (deg <= degree+e)
    # and L (deg <= e); each share contributes Q(x) - y L(x) = 0.
    e = e_max
    nq = degree + e + 1
    rows = []
    for x, y in zip(xs, ys):
        xp = 1
        row = []
        for _ in range(nq):
            row.append(xp)
            xp = xp * x % p
        xp = 1
        for _ in range(e + 1):
            row.append((-y * xp) % p)
            xp = xp * x % p
        rows.append(row)
    sol = nullspace_vector(rows, p)
    if sol is None:
        raise DecodingError("no candidate polynomial within the error budget")
    q_coeffs = poly_trim(sol[:nq])
    l_coeffs = poly_trim(sol[nq:])
    if poly_deg(l_coeffs) < 0:
        raise DecodingError("degenerate error locator")
    quot, rem = poly_divmod(q_coeffs, l_coeffs, p)
    if poly_deg(rem) >= 0 or poly_deg(quot) > degree:
        raise DecodingError("shares exceed the correctable error budget")
    bad = [i for i in range(n) if poly_eval(quot, xs[i], p) != ys[i]]
    if len(bad) > e_max:
        raise DecodingError(f"{len(bad)} disagreeing shares exceed budget {e_max}")
    return DecodeResult(quot if quot else [0], bad)


@lru_cache(maxsize=64)
def _interp_matrix(head: tuple[int, ...], p: int) -> np.ndarray:
    """Inverse Vandermonde mapping values at `head` points to coefficients."""
    n = len(head)
    vand = [[pow(x, r, p) for r in range(n)] for x in head]
    inv = matinv_mod(vand, p)
    return np.array(inv, dtype=np.uint64)


def rs_decode_batch(
    xs: list[int],
    ys_mat: np.ndarray,
    degree: int,
    p: int,
    error_budget: int | None = None,
) -> list[DecodeResult]:
    """Decode many codewords sharing one evaluation-point set.

    Rows of ys_mat are independent codewords over the same xs.  Clean rows are
    recovered by one batched interpolate-and-verify pass; only rows with
    disagreements fall back to the per-row Berlekamp-Welch decoder.
    """
    ys_mat = np.atleast_2d(fastops.as_elems(ys_mat, p))
    n = len(xs)
    if ys_mat.shape[1] != n:
        raise ValueError("share matrix width must match point count")
    if n < degree + 1:
        raise DecodingError(f"{n} shares cannot determine degree {degree}")
    xs = [x % p for x in xs]
    interp = _interp_matrix(tuple(xs[: degree + 1]), p)
    coeff_mat = fastops.matmul_mod(ys_mat[:, : degree + 1], interp.T, p)
    evals = fastops.poly_eval_many(coeff_mat, xs, p)
    clean = (evals == ys_mat).all(axis=1)
    out: list[DecodeResult] = []
    for r in range(ys_mat.shape[0]):
        if clean[r]:
            out.append(DecodeResult(poly_trim([int(c) for c in coeff_mat[r]]), []))
        else:
            out.append(rs_decode(xs, [int(v) for v in ys_mat[r]], degree, p, error_budget))
    return out
