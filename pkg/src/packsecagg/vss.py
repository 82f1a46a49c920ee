"""Polynomial commitments that make packed shares verifiable.

A dealer commits to each sharing polynomial; every shareholder then checks its
own evaluation against the broadcast commitment, so a dealer cannot hand out
off-polynomial shares without being caught by the recipient.  Two
interchangeable backends sit behind one interface:

* ``coefficient`` (default): one group element per coefficient, C_t = g^{c_t},
  over a prime-order subgroup of Z_q^* whose order equals the share field, so
  exponent arithmetic and share arithmetic coincide.  Verification checks
  g^value == prod_t C_t^(x^t); no witness is needed.
* ``constant``: a single-element commitment g^{phi(tau)} from a trusted power
  setup, with a per-share witness g^{psi(tau)} for the quotient
  psi = (phi - phi(x)) / (X - x), checked through the bilinear relation
  e(C / g^v, g) == e(W, g^tau / g^x).  The pairing group here is a trapdoor
  stand-in (elements are exponents, the pairing multiplies them): the
  completeness/soundness algebra and element counts are exactly the real
  scheme's, but hiding rests on the coefficient backend in security tests.

The fast-simulation mode swaps the coefficient backend's group for exponents
in the clear, turning verification into plain polynomial evaluation with the
same contract.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import fastops
from .field import f_inv, is_probable_prime


class CommitmentError(ValueError):
    """Raised for malformed commitments or setup misuse."""


# ---------------------------------------------------------------------------
# Groups of order exactly the share field prime
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _subgroup_modulus(order: int) -> tuple[int, int]:
    """Smallest q = 2k*order + 1 prime, and a generator of the order-`order`
    subgroup of Z_q^*."""
    k = 1
    while True:
        q = 2 * k * order + 1
        if is_probable_prime(q):
            for h in range(2, 100):
                g = pow(h, 2 * k, q)
                if g != 1:
                    return q, g
        k += 1


@dataclass(frozen=True)
class ModGroup:
    """Prime-order multiplicative subgroup with order = share field prime."""

    order: int

    @property
    def modulus(self) -> int:
        return _subgroup_modulus(self.order)[0]

    @property
    def generator(self) -> int:
        return _subgroup_modulus(self.order)[1]

    @property
    def identity(self) -> int:
        return 1

    def exp_g(self, e: int) -> int:
        return pow(self.generator, e % self.order, self.modulus)

    def exp(self, base: int, e: int) -> int:
        return pow(base, e % self.order, self.modulus)

    def mul(self, a: int, b: int) -> int:
        return a * b % self.modulus

    @property
    def element_bytes(self) -> int:
        return (self.modulus.bit_length() + 7) // 8


@dataclass(frozen=True)
class PlainGroup:
    """Exponents in the clear: g^x is represented by x itself.

    Fast-simulation stand-in with the same algebraic contract (verification
    still fails on any wrong share) and none of the cost or the hiding.
    """

    order: int

    @property
    def identity(self) -> int:
        return 0

    def exp_g(self, e: int) -> int:
        return e % self.order

    def exp(self, base: int, e: int) -> int:
        return base * e % self.order

    def mul(self, a: int, b: int) -> int:
        return (a + b) % self.order

    @property
    def element_bytes(self) -> int:
        return 8


# ---------------------------------------------------------------------------
# Commitment containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Commitment:
    """Broadcast commitment to one polynomial (1 element for the constant
    scheme, degree+1 elements for the coefficient scheme)."""

    elements: tuple[int, ...]


@dataclass(frozen=True)
class Witness:
    """Per-share opening data; None for schemes that need none."""

    element: int | None = None


def _digest(*parts: bytes) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part)
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Coefficient backend (Feldman-style)
# ---------------------------------------------------------------------------


class CoefficientScheme:
    """Per-coefficient commitments; verification is evaluation in the exponent."""

    name = "coefficient"
    needs_witness = False

    def __init__(self, prime: int, max_degree: int, fast: bool = False):
        self.prime = prime
        self.max_degree = max_degree
        self.group = PlainGroup(prime) if fast else ModGroup(prime)
        self.setup_id = _digest(
            b"coefficient", str(prime).encode(), str(getattr(self.group, "modulus", 0)).encode()
        )

    def commit_batch(self, coeff_mat: np.ndarray) -> list[Commitment]:
        coeff_mat = np.atleast_2d(fastops.as_elems(coeff_mat, self.prime))
        if coeff_mat.shape[1] > self.max_degree + 1:
            raise CommitmentError("polynomial exceeds setup degree")
        if isinstance(self.group, PlainGroup):
            return [Commitment(tuple(int(c) for c in row)) for row in coeff_mat]
        return [Commitment(tuple(self.group.exp_g(int(c)) for c in row)) for row in coeff_mat]

    def open_batch(self, coeff_mat: np.ndarray, point: int) -> list[Witness]:
        return [Witness()] * np.atleast_2d(coeff_mat).shape[0]

    def verify(self, comm: Commitment, point: int, value: int, witness: Witness | None = None) -> bool:
        g = self.group
        acc = g.identity
        # Horner in the exponent: prod C_t^(x^t) == g^value
        for c in reversed(comm.elements):
            acc = g.mul(g.exp(acc, point), c)
        return acc == g.exp_g(value)

    def verify_many(self, comms: list[Commitment], point: int, values: np.ndarray) -> np.ndarray:
        if isinstance(self.group, PlainGroup):
            width = max(len(c.elements) for c in comms)
            mat = np.zeros((len(comms), width), dtype=np.uint64)
            for i, c in enumerate(comms):
                mat[i, : len(c.elements)] = c.elements
            evals = fastops.poly_eval_many(mat, [point], self.prime)[:, 0]
            return evals == fastops.as_elems(values, self.prime)
        return np.array(
            [self.verify(c, point, int(v)) for c, v in zip(comms, values)], dtype=bool
        )


# ---------------------------------------------------------------------------
# Constant-size backend (trusted power setup + quotient witnesses)
# ---------------------------------------------------------------------------


class ConstantScheme:
    """Single-element commitments with per-share quotient witnesses.

    setup() plays the trusted-setup ceremony once, centrally: powers
    g^(tau^i) are published and tau is discarded.  Elements live in a trapdoor
    pairing stand-in (see module docstring).
    """

    name = "constant"
    needs_witness = True

    def __init__(self, prime: int, max_degree: int, setup_seed: int = 0, fast: bool = False):
        self.prime = prime
        self.max_degree = max_degree
        rng = np.random.default_rng(np.random.SeedSequence([0x5E70, setup_seed]))
        tau = int(rng.integers(1, prime, dtype=np.uint64))
        self._powers = fastops.powers_mod(tau, max_degree + 1, prime)
        self._tau_elem = self._powers[1]  # g^tau as an element
        self.setup_id = _digest(b"constant", str(prime).encode(), str(setup_seed).encode())

    def commit_batch(self, coeff_mat: np.ndarray) -> list[Commitment]:
        coeff_mat = np.atleast_2d(fastops.as_elems(coeff_mat, self.prime))
        if coeff_mat.shape[1] > self.max_degree + 1:
            raise CommitmentError("polynomial exceeds setup degree")
        vals = fastops.matmul_mod(coeff_mat, self._powers[: coeff_mat.shape[1], None], self.prime)
        return [Commitment((int(v),)) for v in vals[:, 0]]

    def open_batch(self, coeff_mat: np.ndarray, point: int) -> list[Witness]:
        """Witnesses for every row polynomial at one evaluation point, via
        synthetic division by (X - point), vectorized across rows."""
        coeff_mat = np.atleast_2d(fastops.as_elems(coeff_mat, self.prime))
        m, w = coeff_mat.shape
        p = self.prime
        quot = np.zeros((m, max(w - 1, 1)), dtype=np.uint64)
        carry = coeff_mat[:, w - 1].copy()
        for j in range(w - 2, -1, -1):
            quot[:, j] = carry
            carry = fastops.add_mod(coeff_mat[:, j], fastops.mul_mod(carry, np.uint64(point % p), p), p)
        vals = fastops.matmul_mod(quot, self._powers[: quot.shape[1], None], self.prime)
        return [Witness(int(v)) for v in vals[:, 0]]

    def verify(self, comm: Commitment, point: int, value: int, witness: Witness) -> bool:
        if witness is None or witness.element is None:
            return False
        p = self.prime
        # e(C / g^v, g) == e(W, g^tau / g^point): in the trapdoor stand-in the
        # pairing multiplies exponents, so both sides are plain field values.
        lhs = (comm.elements[0] - value) % p
        rhs = witness.element * ((int(self._tau_elem) - point) % p) % p
        return lhs == rhs

    def verify_many(self, comms: list[Commitment], point: int, values: np.ndarray, witnesses: list[Witness] | None = None) -> np.ndarray:
        if witnesses is None:
            return np.zeros(len(comms), dtype=bool)
        return np.array(
            [self.verify(c, point, int(v), w) for c, v, w in zip(comms, values, witnesses)],
            dtype=bool,
        )


def make_scheme(kind: str, prime: int, max_degree: int, fast: bool = False, setup_seed: int = 0):
    if kind == "coefficient":
        return CoefficientScheme(prime, max_degree, fast=fast)
    if kind == "constant":
        return ConstantScheme(prime, max_degree, setup_seed=setup_seed, fast=fast)
    raise CommitmentError(f"unknown commitment scheme {kind!r}")
