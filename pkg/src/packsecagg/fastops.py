"""Vectorized mod-p kernels on numpy uint64 arrays.

numpy has no 128-bit integers, so products of 61-bit elements cannot be formed
directly.  Three strategies, picked per modulus:

* p = 2^61 - 1: split each factor into 31/30-bit halves and exploit
  2^61 = 1 (mod p), so every intermediate fits in uint64.  Matrix products
  split both operands into 21-bit limbs (nine uint64 matmuls) and recombine
  limb shifts as rotations.
* p < 2^31: products fit uint64 directly; matrix products split one operand
  into 16-bit limbs so row sums cannot overflow.
* anything else: fall back to Python-int object arrays (correct, slow; only
  exercised by tests).

Every kernel is checked against the scalar reference in `poly`/`field`.
"""

from __future__ import annotations

import numpy as np

from .field import MERSENNE61

_M61 = np.uint64(MERSENNE61)
_MASK31 = np.uint64((1 << 31) - 1)
_MASK30 = np.uint64((1 << 30) - 1)
_MASK21 = np.uint64((1 << 21) - 1)

# Inner-dimension caps that keep uint64 accumulation overflow-free.
_M61_MATMUL_MAX_INNER = 1 << 20
_SMALL_MATMUL_MAX_INNER = 1 << 15


def as_elems(values, p: int) -> np.ndarray:
    """Canonical uint64 array of field elements."""
    arr = np.asarray(values)
    if arr.dtype == object:
        arr = np.array([int(v) % p for v in arr.reshape(-1)], dtype=np.uint64).reshape(arr.shape)
        return arr
    return arr.astype(np.uint64) % np.uint64(p)


def _m61_reduce(t: np.ndarray) -> np.ndarray:
    r = (t >> np.uint64(61)) + (t & _M61)
    return np.where(r >= _M61, r - _M61, r)


def _m61_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ah = a >> np.uint64(31)
    al = a & _MASK31
    bh = b >> np.uint64(31)
    bl = b & _MASK31
    m = ah * bl + al * bh
    mh = m >> np.uint64(30)
    ml = m & _MASK30
    t = np.uint64(2) * (ah * bh) + mh + (ml << np.uint64(31)) + al * bl
    return _m61_reduce(_m61_reduce(t))


def _m61_shift(x: np.ndarray, k: int) -> np.ndarray:
    """x * 2^k mod 2^61-1 for x < 2^61, via rotation."""
    k %= 61
    if k == 0:
        return _m61_reduce(x)
    mask = np.uint64((1 << (61 - k)) - 1)
    return _m61_reduce(((x & mask) << np.uint64(k)) + (x >> np.uint64(61 - k)))


def mul_mod(a: np.ndarray, b: np.ndarray, p: int) -> np.ndarray:
    """Elementwise a*b mod p (broadcasting as numpy does)."""
    if p == MERSENNE61:
        a, b = np.broadcast_arrays(np.asarray(a, np.uint64), np.asarray(b, np.uint64))
        return _m61_mul(a, b)
    if p < (1 << 31):
        return (np.asarray(a, np.uint64) * np.asarray(b, np.uint64)) % np.uint64(p)
    obj = (np.asarray(a).astype(object) * np.asarray(b).astype(object)) % p
    return as_elems(obj, p)


def add_mod(a: np.ndarray, b: np.ndarray, p: int) -> np.ndarray:
    return (np.asarray(a, np.uint64) + np.asarray(b, np.uint64)) % np.uint64(p)


def sub_mod(a: np.ndarray, b: np.ndarray, p: int) -> np.ndarray:
    return (np.asarray(a, np.uint64) + np.uint64(p) - np.asarray(b, np.uint64)) % np.uint64(p)


def neg_mod(a: np.ndarray, p: int) -> np.ndarray:
    return (np.uint64(p) - np.asarray(a, np.uint64)) % np.uint64(p)


def sum_mod(a: np.ndarray, p: int, axis=None) -> np.ndarray:
    """Overflow-safe sum: reduce pairwise in Python-managed chunks."""
    arr = np.asarray(a, np.uint64)
    if arr.size == 0:
        return np.uint64(0)
    # Chunk so that chunk_size * (p-1) < 2^64.
    chunk = max(1, (1 << 63) // p)
    if axis is None:
        flat = arr.reshape(-1)
        total = np.uint64(0)
        for i in range(0, flat.size, chunk):
            total = (total + np.sum(flat[i : i + chunk] % np.uint64(p), dtype=np.uint64) % np.uint64(p)) % np.uint64(p)
        return total
    arr = np.moveaxis(arr, axis, 0)
    total = np.zeros(arr.shape[1:], dtype=np.uint64)
    for i in range(0, arr.shape[0], chunk):
        part = np.sum(arr[i : i + chunk] % np.uint64(p), axis=0, dtype=np.uint64) % np.uint64(p)
        total = (total + part) % np.uint64(p)
    return total


def matmul_mod(a: np.ndarray, b: np.ndarray, p: int) -> np.ndarray:
    """Exact (a @ b) mod p for canonical uint64 operands."""
    a = np.asarray(a, np.uint64)
    b = np.asarray(b, np.uint64)
    inner = a.shape[-1]
    if p == MERSENNE61 and inner <= _M61_MATMUL_MAX_INNER:
        a_limbs = [a & _MASK21, (a >> np.uint64(21)) & _MASK21, a >> np.uint64(42)]
        b_limbs = [b & _MASK21, (b >> np.uint64(21)) & _MASK21, b >> np.uint64(42)]
        out = None
        for i, ai in enumerate(a_limbs):
            for j, bj in enumerate(b_limbs):
                part = _m61_shift(_m61_reduce(ai @ bj), 21 * (i + j))
                out = part if out is None else _m61_reduce(out + part)
        return out
    if p < (1 << 31) and inner <= _SMALL_MATMUL_MAX_INNER:
        pp = np.uint64(p)
        hi = (a >> np.uint64(16)) @ b % pp
        lo = (a & np.uint64(0xFFFF)) @ b % pp
        return ((hi << np.uint64(16)) + lo) % pp
    obj = (a.astype(object) @ b.astype(object)) % p
    return as_elems(obj, p)


def powers_mod(x: int, n: int, p: int) -> np.ndarray:
    """[x^0, x^1, ..., x^(n-1)] as uint64."""
    out = np.empty(n, dtype=np.uint64)
    acc = 1
    for i in range(n):
        out[i] = acc
        acc = acc * x % p
    return out


def vandermonde(xs, n_rows: int, p: int) -> np.ndarray:
    """Matrix V[r, j] = xs[j]^r, r < n_rows."""
    xs = as_elems(xs, p)
    out = np.empty((n_rows, xs.size), dtype=np.uint64)
    out[0] = 1
    for r in range(1, n_rows):
        out[r] = mul_mod(out[r - 1], xs, p)
    return out


def poly_eval_many(coeff_mat: np.ndarray, xs, p: int) -> np.ndarray:
    """Evaluate each row polynomial at every x: (m, deg+1) x (n,) -> (m, n)."""
    coeff_mat = np.asarray(coeff_mat, np.uint64)
    v = vandermonde(xs, coeff_mat.shape[1], p)
    return matmul_mod(coeff_mat, v, p)


def rand_elems(rng: np.random.Generator, shape, p: int) -> np.ndarray:
    """Uniform field elements from a seeded Generator."""
    return rng.integers(0, p, size=shape, dtype=np.uint64)


def encode_signed_arr(values, p: int) -> np.ndarray:
    """Vectorized signed embedding: negatives map to the upper half."""
    v = np.asarray(values, dtype=np.int64)
    half = (p - 1) // 2
    if v.size and (np.abs(v) > half).any():
        worst = int(v.flat[np.abs(v).argmax()])
        raise OverflowError(f"{worst} exceeds signed field capacity +-{half}")
    return np.mod(v, np.int64(p)).astype(np.uint64)


def decode_signed_arr(values, p: int) -> np.ndarray:
    """Vectorized inverse of encode_signed_arr, as int64."""
    u = np.asarray(values, dtype=np.uint64)
    if u.size and (u >= p).any():
        raise ValueError("input contains non-canonical field elements")
    half = (p - 1) // 2
    s = u.astype(np.int64)
    return np.where(s > half, s - np.int64(p), s)


def quantize_arr(x, scale: int) -> np.ndarray:
    """Vectorized toward-zero fixed-point map: floor(q*x), plus one for
    negative inputs.  Matches the scalar reference except on inputs where the
    float product q*x is not exactly representable at an integer boundary;
    deterministic either way."""
    x = np.asarray(x, dtype=np.float64)
    v = np.floor(x * scale)
    v = v + (x < 0)
    return v.astype(np.int64)
