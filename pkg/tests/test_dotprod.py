"""Tests for the packed dot-product pipeline.

The ground truth throughout is plaintext integer arithmetic on the original
vectors; the pipeline must reproduce it exactly, including through dropouts
and planted share corruption at the recovery step.
"""

import numpy as np
import pytest

from packsecagg import fastops
from packsecagg.dotprod import (
    combine_reshares,
    extraction_weights_matrix,
    group_width,
    pack_consecutive,
    pack_strided,
    partial_products,
    pipeline_dot_products,
    recover_packed_values,
    reduction_weights,
    share_vector,
    unpack_consecutive,
    unpack_strided,
)
from packsecagg.field import MERSENNE61
from packsecagg.poly import lagrange_weights_at
from packsecagg.rsdecode import DecodingError
from packsecagg.sharing import SharingConfig, hadamard, reconstruct, share_batch

P = MERSENNE61


def test_strided_packing_layout():
    vec = np.arange(1, 7, dtype=np.uint64)  # [1..6], pack 3 -> groups of 2
    mat = pack_strided(vec, 3)
    assert mat.shape == (2, 3)
    # polynomial k holds position m*G + k at slot m
    assert mat.tolist() == [[1, 3, 5], [2, 4, 6]]
    assert unpack_strided(mat, 6).tolist() == [1, 2, 3, 4, 5, 6]
    ragged = pack_strided(np.arange(1, 6, dtype=np.uint64), 3)
    assert ragged.tolist() == [[1, 3, 5], [2, 4, 0]]
    assert unpack_strided(ragged, 5).tolist() == [1, 2, 3, 4, 5]


def test_consecutive_packing_layout():
    vec = np.arange(1, 8, dtype=np.uint64)
    mat = pack_consecutive(vec, 3)
    assert mat.tolist() == [[1, 2, 3], [4, 5, 6], [7, 0, 0]]
    assert unpack_consecutive(mat, 7).tolist() == list(range(1, 8))
    assert group_width(7, 3) == 3


WORKED_U = np.array([2, -1, 4, 5, 6, 3], dtype=np.int64)
WORKED_R = np.array([1, 2, 0, 3, -2, 1], dtype=np.int64)


def test_worked_example_partial_products_land_on_group_dots():
    # pack 3 over 6 coordinates: groups (0,1), (2,3), (4,5) with dot products
    # 2*1 + (-1)*2 = 0, 4*0 + 5*3 = 15, 6*(-2) + 3*1 = -9, summing to 6.
    cfg = SharingConfig(prime=P, n_parties=8, pack=3, degree=3)
    rng = np.random.default_rng(77)
    bu = share_vector(cfg, WORKED_U, rng)
    br = share_vector(cfg, WORKED_R, rng)
    prod = hadamard(bu, br)
    # sum the G=2 product polynomials share-wise, then read the secret slots
    summed = fastops.sum_mod(prod.shares, P, axis=0)[None, :]
    parties = list(range(1, 8))  # 2d+1 = 7 shares reconstruct degree 6
    vals = reconstruct(cfg, parties, summed[:, :7], degree_tag=6)
    got = fastops.decode_signed_arr(vals[0], P).tolist()
    assert got == [0, 15, -9]
    assert sum(got) == 6


def test_worked_example_full_pipeline():
    grad_cfg = SharingConfig(prime=P, n_parties=8, pack=3, degree=3)
    reshare_cfg = SharingConfig(prime=P, n_parties=8, pack=2, degree=3)
    rng = np.random.default_rng(123)
    dots, norms, offenders = pipeline_dot_products(
        grad_cfg, reshare_cfg, WORKED_U[None, :], WORKED_R, rng
    )
    assert dots.tolist() == [6]
    assert norms.tolist() == [int((WORKED_U.astype(object) ** 2).sum())]
    assert offenders == []


def test_reduction_weights_match_matrix_extraction():
    cfg = SharingConfig(prime=P, n_parties=9, pack=2, degree=4)
    senders = tuple(range(1, 10))
    points = [cfg.eval_point(s) for s in senders]
    w = reduction_weights(cfg, senders)
    total = np.zeros(len(points), dtype=np.uint64)
    for e in cfg.secret_points:
        col = extraction_weights_matrix(points, e, P)
        lag = lagrange_weights_at(points, e, P)
        assert col == lag  # matrix form agrees with the closed form
        total = fastops.add_mod(total, np.array(col, dtype=np.uint64), P)
    assert w.tolist() == total.tolist()


def test_reduction_weights_reject_too_few_senders():
    cfg = SharingConfig(prime=P, n_parties=9, pack=2, degree=4)
    with pytest.raises(DecodingError):
        reduction_weights(cfg, tuple(range(1, 9)))  # 8 < 2*4+1


def test_partial_products_shape_and_values():
    cfg = SharingConfig(prime=127, n_parties=7, pack=2, degree=2)
    rng = np.random.default_rng(3)
    vecs = np.array([[1, 2, 3, 4], [0, 1, 0, 1]], dtype=np.int64)
    root = np.array([2, 2, 2, 2], dtype=np.int64)
    batches = [share_vector(cfg, v, rng) for v in vecs]
    rb = share_vector(cfg, root, rng)
    parties = list(range(1, 6))  # 2d+1 = 5
    cs_rows = []
    for i in parties:
        cols = np.stack([b.column(i) for b in batches])
        cs, nr = partial_products(cols, rb.column(i), 127)
        cs_rows.append(cs)
    cs_mat = np.stack(cs_rows).T  # (n_users, n_parties)
    cfg_prod = cfg
    vals = reconstruct(cfg_prod, parties, cs_mat, degree_tag=4)
    # secret slot m holds the dot product of group m
    assert fastops.decode_signed_arr(vals[0], 127).tolist() == [6, 14]
    assert fastops.decode_signed_arr(vals[1], 127).tolist() == [2, 2]


@pytest.mark.parametrize(
    "n,l,pp,d,n_users,m",
    [
        (8, 2, 2, 3, 3, 10),
        (10, 2, 2, 3, 4, 20),
        (9, 3, 2, 4, 5, 7),
        (12, 2, 3, 4, 6, 9),
    ],
)
def test_pipeline_matches_plaintext(n, l, pp, d, n_users, m):
    grad_cfg = SharingConfig(prime=P, n_parties=n, pack=l, degree=d)
    reshare_cfg = SharingConfig(prime=P, n_parties=n, pack=pp, degree=d)
    rng = np.random.default_rng(1000 * n + m)
    vecs = rng.integers(-50, 51, size=(n_users, m)).astype(np.int64)
    root = rng.integers(-50, 51, size=m).astype(np.int64)
    dots, norms, _ = pipeline_dot_products(grad_cfg, reshare_cfg, vecs, root, rng)
    assert dots.tolist() == (vecs.astype(object) @ root.astype(object)).tolist()
    assert norms.tolist() == [int((v.astype(object) ** 2).sum()) for v in vecs]


def test_pipeline_survives_final_dropouts():
    grad_cfg = SharingConfig(prime=P, n_parties=10, pack=2, degree=3)
    reshare_cfg = SharingConfig(prime=P, n_parties=10, pack=2, degree=3)
    rng = np.random.default_rng(5)
    vecs = rng.integers(-9, 10, size=(4, 6)).astype(np.int64)
    root = rng.integers(-9, 10, size=6).astype(np.int64)
    # parties 2 and 7 vanish before sending final shares; 8 >= d+1 remain
    finalists = [1, 3, 4, 5, 6, 8, 9, 10]
    dots, _, offenders = pipeline_dot_products(
        grad_cfg, reshare_cfg, vecs, root, rng, final_senders=finalists
    )
    assert dots.tolist() == (vecs.astype(object) @ root.astype(object)).tolist()
    assert offenders == []


def test_recover_packed_values_flags_corrupted_party():
    cfg = SharingConfig(prime=P, n_parties=12, pack=2, degree=3)
    rng = np.random.default_rng(8)
    secrets = fastops.rand_elems(rng, (3, 2), P)
    batch = share_batch(cfg, secrets, rng)
    parties = list(range(1, 13))
    mat = batch.shares.T.copy()  # (n_parties, n_polys)
    mat[4] = (mat[4] + 17) % P  # party 5 lies on every polynomial
    values, offenders = recover_packed_values(cfg, parties, mat, 6)
    assert offenders == [5]
    assert values.tolist() == unpack_consecutive(secrets, 6).tolist()


def test_combine_reshares_is_weighted_sum():
    w = np.array([2, 3], dtype=np.uint64)
    rows = np.array([[1, 10], [100, 1000]], dtype=np.uint64)
    assert combine_reshares(w, rows, P).tolist() == [302, 3020]
