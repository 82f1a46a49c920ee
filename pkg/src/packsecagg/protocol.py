"""Four-round robust aggregation with verifiable packed sharing.

One training iteration runs through a relay server that never sees plaintext
gradients:

* Round 0 (down): the server publishes the model, the reference gradient's
  norm and quantized-norm bound, the client roster, and deals packed shares of
  the quantized reference gradient to every client, with commitments.
* Round 1 (up/down): every client normalizes its gradient to the reference
  norm, quantizes it, deals packed shares to all clients with broadcast
  commitments, and sends each peer its sealed column.  The server relays.
* Round 2: each client verifies the columns it received, locally excludes
  senders whose shares failed (reporting them to the server), computes its
  share of every surviving user's gradient-reference dot product and squared
  norm, and re-shares those partials at reduced degree, again committed.
* Round 3: each client verifies the re-shares, combines them with public
  degree-reduction weights, and returns the resulting final shares in the
  clear.  The server error-corrects the final-share codewords, recovers every
  user's dot product and norm, turns dot products into trust numerators
  (negatives and norm violators get zero), and broadcasts the numerators.
* Round 4: each client weights the share columns it stored in round 1 by the
  trust numerators and returns the sum; the server error-corrects once more,
  recovers the weighted gradient sum, and divides by the numerator total.

Parties that drop out are erasures; parties that send values off the expected
polynomials are corrected and identified by Reed-Solomon decoding of the
plaintext rounds.  Exclusions are consolidated by the server from client
reports, requiring strictly more than `report_threshold` distinct reporters,
so a small coalition can neither frame an honest client nor block detection.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field as dc_field
from functools import cached_property, lru_cache

import numpy as np

from . import dotprod, fastops
from .channel import (
    SERVER_ID,
    SIGNATURE_BYTES,
    DecryptionError,
    Directory,
    Envelope,
    PartyCrypto,
    ServerMailbox,
    SizeModel,
    DEFAULT_SIZE_MODEL,
)
from .field import (
    DEFAULT_SCALE,
    MERSENNE61,
    check_aggregate_capacity,
    check_capacity,
)
from .sharing import SharingConfig, deserialize_elems, serialize_elems, share_batch
from .vss import Commitment, Witness, make_scheme

BROADCAST = 0xFFFFFFFF

# message types
T_MODEL = 1
T_COMMIT = 2
T_SHARE = 3
T_RECOMMIT = 4
T_RESHARE = 5
T_FINAL = 6
T_TRUST = 7
T_AGG = 8

# wire round of each phase
R_MODEL = 0
R_SHARE = 1
R_RESHARE = 2
R_FINAL = 3
R_AGG = 4


class ProtocolError(Exception):
    """Configuration or message-format violation."""


class ProtocolAbort(ProtocolError):
    """The iteration cannot proceed (too few respondents or inconsistent state)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolConfig:
    n_clients: int
    dim: int
    pack: int
    reshare_pack: int
    degree: int
    prime: int = MERSENNE61
    scale: int = DEFAULT_SCALE
    response_threshold: int | None = None  # K, minimum respondents per round
    report_threshold: int | None = None  # exclusion needs > this many reporters
    max_norm: float = 2.0  # cap on the reference gradient norm
    crypto_mode: str = "fast"
    commitment: str = "coefficient"
    size_model: SizeModel = DEFAULT_SIZE_MODEL
    seed: int = 0

    def __post_init__(self):
        n, d = self.n_clients, self.degree
        if self.dim < 1:
            raise ProtocolError("dim must be positive")
        if 2 * d + 1 > n:
            raise ProtocolError(
                f"degree reduction needs 2*degree+1 <= n_clients ({2 * d + 1} > {n})"
            )
        k = self.min_respondents
        if not d + 1 <= k <= n:
            raise ProtocolError(f"response threshold {k} outside [degree+1, n]")
        if not 0 <= self.exclusion_votes < n:
            raise ProtocolError("report threshold out of range")
        if self.crypto_mode not in ("fast", "real"):
            raise ProtocolError(f"unknown crypto mode {self.crypto_mode!r}")
        # constructing the sharing configs validates pack/degree/prime bounds
        self.grad_cfg, self.reshare_cfg
        check_capacity(self.prime, n, self.norm_q)
        check_aggregate_capacity(self.prime, n, self.norm_q)

    @cached_property
    def grad_cfg(self) -> SharingConfig:
        return SharingConfig(self.prime, self.n_clients, self.pack, self.degree)

    @cached_property
    def reshare_cfg(self) -> SharingConfig:
        return SharingConfig(self.prime, self.n_clients, self.reshare_pack, self.degree)

    @property
    def n_poly(self) -> int:
        """Packed polynomials per gradient vector."""
        return dotprod.group_width(self.dim, self.pack)

    @property
    def min_respondents(self) -> int:
        if self.response_threshold is not None:
            return self.response_threshold
        return -(-4 * self.n_clients // 5)  # ceil(0.8 n)

    @property
    def exclusion_votes(self) -> int:
        if self.report_threshold is not None:
            return self.report_threshold
        return (3 * self.n_clients) // 10  # floor(0.3 n)

    @property
    def privacy_threshold(self) -> int:
        """Largest coalition that learns nothing from its share columns."""
        return self.degree - self.pack + 1

    @property
    def norm_q(self) -> int:
        """Bound on any honest quantized gradient norm (reference-normalized
        values plus per-coordinate rounding slack)."""
        return int(self.scale * self.max_norm) + math.isqrt(self.dim) + 2

    @property
    def norm_bound(self) -> int:
        """Published cap on quantized squared norms."""
        return self.norm_q * self.norm_q

    def scheme(self):
        return make_scheme(
            self.commitment,
            self.prime,
            self.degree,
            fast=self.crypto_mode == "fast",
            setup_seed=self.seed,
        )


def normalize_and_quantize(
    grad: np.ndarray, ref_norm: float, scale: int, bound: int
) -> np.ndarray:
    """Rescale a gradient to the reference norm and quantize it, guaranteeing
    the integer squared norm stays within the published bound."""
    grad = np.asarray(grad, dtype=np.float64)
    nrm = float(np.linalg.norm(grad))
    if nrm == 0.0 or ref_norm == 0.0:
        return np.zeros(grad.size, dtype=np.int64)
    factor = ref_norm / nrm
    for _ in range(64):
        ints = fastops.quantize_arr(grad * factor, scale)
        if int(np.dot(ints, ints)) <= bound:
            return ints
        factor *= 1.0 - 2.0**-16
    raise ProtocolError("could not quantize within the norm bound")


def trust_numerator(dot_value: int, norm_value: int, bound: int) -> int:
    """Integer trust-score numerator: clipped-positive dot product, zeroed for
    norm violations.  The common denominator cancels during aggregation."""
    if norm_value > bound or norm_value < 0:
        return 0
    return max(0, dot_value)


# ---------------------------------------------------------------------------
# Plaintext reference computation (baseline and oracle target)
# ---------------------------------------------------------------------------


@dataclass
class PlainStep:
    numerators: dict[int, int]
    denominator: int
    trust: dict[int, float]
    flagged: list[int]
    update: np.ndarray


def plaintext_trust_step(
    grads: dict[int, np.ndarray], root_grad: np.ndarray, scale: int
) -> PlainStep:
    """The aggregation rule on plaintext gradients: what the protocol must
    reproduce exactly on the same inputs."""
    root_ints = fastops.quantize_arr(root_grad, scale).astype(object)
    ref_norm = float(np.linalg.norm(root_grad))
    denom_sq = int((root_ints**2).sum())
    bound = (math.isqrt(denom_sq) + math.isqrt(root_ints.size) + 2) ** 2
    nums: dict[int, int] = {}
    trust: dict[int, float] = {}
    flagged: list[int] = []
    total = np.zeros(root_ints.size, dtype=object)
    for uid, g in sorted(grads.items()):
        ints = normalize_and_quantize(g, ref_norm, scale, bound).astype(object)
        dot = int((ints * root_ints).sum())
        nrm = int((ints**2).sum())
        num = trust_numerator(dot, nrm, bound)
        if nrm > bound:
            flagged.append(uid)
        nums[uid] = num
        trust[uid] = num / denom_sq if denom_sq else 0.0
        total += num * ints
    den = sum(nums.values())
    update = (total / (scale * den)).astype(np.float64) if den else np.zeros(root_ints.size)
    return PlainStep(nums, den, trust, flagged, update)


# ---------------------------------------------------------------------------
# Wire helpers
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def u8(self) -> int:
        (v,) = struct.unpack_from("<B", self.buf, self.off)
        self.off += 1
        return v

    def u16(self) -> int:
        (v,) = struct.unpack_from("<H", self.buf, self.off)
        self.off += 2
        return v

    def u32(self) -> int:
        (v,) = struct.unpack_from("<I", self.buf, self.off)
        self.off += 4
        return v

    def u64(self) -> int:
        (v,) = struct.unpack_from("<Q", self.buf, self.off)
        self.off += 8
        return v

    def f64(self) -> float:
        (v,) = struct.unpack_from("<d", self.buf, self.off)
        self.off += 8
        return v

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ProtocolError("message truncated")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def blob(self) -> bytes:
        return self.raw(self.u32())

    def elems(self) -> np.ndarray:
        arr, self.off = deserialize_elems(self.buf, self.off)
        return arr

    def ids(self) -> list[int]:
        n = self.u32()
        return [self.u32() for _ in range(n)]

    def floats(self) -> np.ndarray:
        n = self.u32()
        out = np.frombuffer(self.buf, dtype="<f8", count=n, offset=self.off).copy()
        self.off += 8 * n
        return out

    def done(self) -> None:
        if self.off != len(self.buf):
            raise ProtocolError("trailing bytes in message")


def _ids_blob(ids) -> bytes:
    return struct.pack("<I", len(ids)) + b"".join(struct.pack("<I", int(i)) for i in ids)


def _floats_blob(arr) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    return struct.pack("<I", arr.size) + arr.astype("<f8").tobytes()


def _fixed(value: int, width: int) -> bytes:
    return int(value).to_bytes(width, "little")


def _commit_blob(comms: list[Commitment], width: int) -> bytes:
    parts = [struct.pack("<I", len(comms))]
    for c in comms:
        parts.append(struct.pack("<H", len(c.elements)))
        for e in c.elements:
            parts.append(_fixed(e, width))
    return b"".join(parts)


def _read_commit_limbs(r: _Reader, width: int) -> np.ndarray:
    """Vectorized commitment-block parse to (n_polys, k, width/8) uint64
    little-endian limbs.  Requires a uniform element count per polynomial,
    which every scheme here produces."""
    n = r.u32()
    if n == 0:
        return np.zeros((0, 0, width // 8), dtype=np.uint64)
    (k,) = struct.unpack_from("<H", r.buf, r.off)
    stride = 2 + k * width
    flat = np.frombuffer(r.raw(n * stride), dtype=np.uint8).reshape(n, stride)
    if k and not (flat[:, :2].copy().view("<u2")[:, 0] == k).all():
        raise ProtocolError("ragged commitment block")
    limbs = flat[:, 2:].copy().view("<u8").reshape(n, k, width // 8)
    return limbs.astype(np.uint64)


def _limbs_to_commits(limbs: np.ndarray) -> list[Commitment]:
    shifts = [64 * i for i in range(limbs.shape[2])]
    out = []
    for row in limbs:
        out.append(
            Commitment(
                tuple(sum(int(v) << s for v, s in zip(elem, shifts)) for elem in row)
            )
        )
    return out


def _witness_blob(wits: list[Witness], width: int) -> bytes:
    parts = [struct.pack("<I", len(wits))]
    for w in wits:
        if w.element is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01" + _fixed(w.element, width))
    return b"".join(parts)


@lru_cache(maxsize=8)
def _empty_witness_blob(n: int) -> bytes:
    return struct.pack("<I", n) + b"\x00" * n


def _read_witnesses(r: _Reader, width: int) -> list[Witness]:
    n = r.u32()
    if n == 0:
        return []
    present = r.buf[r.off]
    if not present:
        # witness-free scheme: n flag bytes, all zero
        flags = np.frombuffer(r.raw(n), dtype=np.uint8)
        if flags.any():
            raise ProtocolError("mixed witness presence")
        return [Witness(None)] * n
    stride = 1 + width
    flat = np.frombuffer(r.raw(n * stride), dtype=np.uint8).reshape(n, stride)
    if not (flat[:, 0] == 1).all():
        raise ProtocolError("mixed witness presence")
    limbs = flat[:, 1:].copy().view("<u8")
    shifts = [64 * i for i in range(width // 8)]
    return [Witness(sum(int(v) << s for v, s in zip(row, shifts))) for row in limbs]


def _sig_context(sender: int, recipient: int, rnd: int, iteration: int, body: bytes) -> bytes:
    return struct.pack("<IIBI", sender, recipient, rnd, iteration) + body


class _IterationMemo:
    """Cross-client cache for work that repeats per (receiver, sender) pair on
    identical broadcast bytes: body digests, broadcast signature checks, and
    commitment parses.  Cleared at the start of every iteration."""

    def __init__(self):
        self.digests: dict[bytes, bytes] = {}
        self.sig_ok: dict[tuple, bool] = {}
        self.limbs: dict[tuple, np.ndarray] = {}

    def clear(self) -> None:
        self.digests.clear()
        self.sig_ok.clear()
        self.limbs.clear()

    def digest(self, body: bytes) -> bytes:
        d = self.digests.get(body)
        if d is None:
            d = hashlib.sha256(body).digest()
            self.digests[body] = d
        return d

    def verify_broadcast(
        self, directory: Directory, sender: int, rnd: int, iteration: int, body: bytes, sig: bytes
    ) -> bool:
        key = (sender, rnd, body, sig)
        ok = self.sig_ok.get(key)
        if ok is None:
            ok = directory.verify(
                sender, _sig_context(sender, BROADCAST, rnd, iteration, body), sig
            )
            self.sig_ok[key] = ok
        return ok

    def commit_limbs(self, body: bytes, width: int) -> np.ndarray:
        key = (body, width)
        limbs = self.limbs.get(key)
        if limbs is None:
            r = _Reader(body)
            r.u8(), r.u32()
            limbs = _read_commit_limbs(r, width)
            self.limbs[key] = limbs
        return limbs

    def fast_matrix(self, body: bytes, width: int, builder) -> np.ndarray | None:
        key = (body, width, "mat")
        if key in self.limbs:
            return self.limbs[key]
        mat = builder(self.commit_limbs(body, width))
        self.limbs[key] = mat
        return mat


_MEMO = _IterationMemo()


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class RoundResult:
    iteration: int
    update: np.ndarray
    numerators: dict[int, int]
    denominator: int
    trust: dict[int, float]
    roster: list[int]
    excluded: list[int]
    flagged: list[int]
    offenders: list[int]
    respondents: dict[int, list[int]] = dc_field(default_factory=dict)


@dataclass
class ClientFlags:
    """Misbehavior toggles for simulated adversaries."""

    invalid_shares: bool = False
    wrong_computation: bool = False


# ---------------------------------------------------------------------------
# Client state machine
# ---------------------------------------------------------------------------


class ClientSession:
    def __init__(
        self,
        cfg: ProtocolConfig,
        party_id: int,
        crypto: PartyCrypto,
        directory: Directory,
        flags: ClientFlags | None = None,
    ):
        self.cfg = cfg
        self.id = party_id
        self.crypto = crypto
        self.directory = directory
        self.flags = flags or ClientFlags()
        self.scheme = cfg.scheme()
        self._fast = cfg.crypto_mode == "fast" and cfg.commitment == "coefficient"

    # -- helpers ------------------------------------------------------------

    def _rng(self, label: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.cfg.seed, self.iteration, self.id, label])
        )

    def _sign(self, recipient: int, rnd: int, body: bytes) -> bytes:
        return self.crypto.sign(_sig_context(self.id, recipient, rnd, self.iteration, body))

    def _check_sig(self, env: Envelope, body: bytes, sig: bytes, broadcast: bool) -> bool:
        rcpt = BROADCAST if broadcast else env.recipient
        return self.directory.verify(
            env.sender, _sig_context(env.sender, rcpt, env.round, self.iteration, body), sig
        )

    def _garbage_elems(self, shape) -> np.ndarray:
        return fastops.rand_elems(self._rng(99), shape, self.cfg.prime)

    # -- round 0: model intake ---------------------------------------------

    def begin_iteration(self, iteration: int) -> None:
        self.iteration = iteration
        self.weights: np.ndarray | None = None
        self.columns: dict[int, np.ndarray] = {}
        self.layout: list[int] = []
        self.reported: list[int] = []
        self.reshare_rows: dict[int, np.ndarray] = {}

    def handle_model(self, env: Envelope) -> None:
        r = _Reader(env.body)
        if r.u8() != T_MODEL:
            raise ProtocolAbort("expected model message")
        iteration = r.u32()
        if iteration != self.iteration:
            raise ProtocolAbort("model for a different iteration")
        body_end_sig = env.body[: len(env.body) - SIGNATURE_BYTES]
        self.weights = r.floats()
        self.ref_norm = r.f64()
        self.norm_bound = r.u64()
        roster0 = r.ids()
        limbs = _read_commit_limbs(r, self.cfg.size_model.commitment_bytes)
        sealed = r.blob()
        sig = r.raw(SIGNATURE_BYTES)
        r.done()
        if not self.directory.verify(
            SERVER_ID, _sig_context(SERVER_ID, self.id, env.round, self.iteration, body_end_sig), sig
        ):
            raise ProtocolAbort("server model signature failed")
        box = self.crypto.box_with(SERVER_ID, self.directory)
        plain = box.open_in(env.round, self.iteration, sealed, aad=b"model")
        pr = _Reader(plain)
        col = pr.elems()
        wits = _read_witnesses(pr, self.cfg.size_model.witness_bytes)
        pr.done()
        point = self.cfg.grad_cfg.eval_point(self.id)
        ok = self._verify_one_sender(limbs, col, wits, point)
        if not ok:
            raise ProtocolAbort("reference-gradient shares failed verification")
        self.root_column = col
        self.roster0 = roster0

    def _fast_commit_matrix(self, limbs: np.ndarray) -> np.ndarray | None:
        """Exponent-in-the-clear commitments as a coefficient matrix; None if
        the block is malformed for this mode."""
        if limbs.shape[2] > 1 and limbs[:, :, 1:].any():
            return None
        return np.mod(limbs[:, :, 0], np.uint64(self.cfg.prime))

    def _verify_one_sender(self, limbs, col, wits, point) -> bool:
        if self._fast:
            mat = self._fast_commit_matrix(limbs)
            if mat is None:
                return False
            evals = fastops.poly_eval_many(mat, [point], self.cfg.prime)[:, 0]
            return bool((evals == col).all())
        comms = _limbs_to_commits(limbs)
        if self.scheme.needs_witness:
            if len(wits) != len(comms):
                return False
            return all(
                self.scheme.verify(c, point, int(v), w) for c, v, w in zip(comms, col, wits)
            )
        return all(self.scheme.verify(c, point, int(v)) for c, v in zip(comms, col))

    # -- round 1: deal gradient shares -------------------------------------

    def round_share(self, gradient: np.ndarray) -> list[Envelope]:
        cfg = self.cfg
        ints = normalize_and_quantize(gradient, self.ref_norm, cfg.scale, self.norm_bound)
        batch = dotprod.share_vector(cfg.grad_cfg, ints, self._rng(1))
        comms = self.scheme.commit_batch(batch.coeffs)
        commit_body = struct.pack("<BI", T_COMMIT, self.iteration) + _commit_blob(
            comms, cfg.size_model.commitment_bytes
        )
        commit_sig = self._sign(BROADCAST, R_SHARE, commit_body)
        out = [Envelope(self.id, SERVER_ID, R_SHARE, commit_body + commit_sig)]
        self.own_commit_body = commit_body
        digest = hashlib.sha256(commit_body).digest()
        shares = batch.shares
        if self.flags.invalid_shares:
            shares = self._garbage_elems(shares.shape)
        for peer in self.roster0:
            if peer == self.id:
                self.columns[self.id] = shares[:, self.id - 1].copy()
                continue
            col = shares[:, peer - 1]
            if self.scheme.needs_witness:
                if not self.flags.invalid_shares:
                    wits = self.scheme.open_batch(batch.coeffs, cfg.grad_cfg.eval_point(peer))
                else:
                    wits = [Witness(int(x)) for x in self._garbage_elems(len(comms))]
                wblob = _witness_blob(wits, cfg.size_model.witness_bytes)
            else:
                wblob = _empty_witness_blob(len(comms))
            plain = serialize_elems(col) + wblob
            box = self.crypto.box_with(peer, self.directory)
            sealed = box.seal(R_SHARE, self.iteration, plain, aad=digest)
            body = struct.pack("<BI", T_SHARE, self.iteration) + struct.pack("<I", len(sealed)) + sealed
            sig = self._sign(peer, R_SHARE, body + digest)
            out.append(Envelope(self.id, peer, R_SHARE, body + sig))
        return out

    # -- round 2: verify columns, exclude, re-share partials ----------------

    def _split_envs(self, envs: list[Envelope], bcast_type: int, direct_type: int):
        bcast: dict[int, bytes] = {}
        direct: dict[int, Envelope] = {}
        for env in envs:
            raw = env.body
            if len(raw) < 5 + SIGNATURE_BYTES:
                continue
            if struct.unpack_from("<I", raw, 1)[0] != self.iteration:
                continue
            t = raw[0]
            if t == bcast_type:
                body = raw[: len(raw) - SIGNATURE_BYTES]
                sig = raw[len(raw) - SIGNATURE_BYTES :]
                if _MEMO.verify_broadcast(
                    self.directory, env.sender, env.round, self.iteration, body, sig
                ):
                    bcast[env.sender] = body
            elif t == direct_type:
                direct[env.sender] = env
        return bcast, direct

    def _verify_bundles(self, envs, bcast_type, direct_type, n_polys_expect, rnd, point, own, own_body):
        """Common round-2/3 intake.  The broadcast set defines a public layout
        every client must agree on, so this client's own broadcast must come
        back through the server unmodified; its self-dealt column `own` is then
        trusted without a message.  Returns (broadcast senders, verified
        columns by sender, bad sender list)."""
        cfg = self.cfg
        bcast, direct = self._split_envs(envs, bcast_type, direct_type)
        if bcast.get(self.id) != own_body:
            raise ProtocolAbort("own broadcast missing from the forwarded set")
        seen = sorted(bcast.keys())
        cols: dict[int, np.ndarray] = {}
        mats: dict[int, np.ndarray] = {}
        bad: list[int] = []
        for sender in seen:
            if sender == self.id:
                cols[sender] = own
                continue
            body = bcast[sender]
            try:
                limbs = _MEMO.commit_limbs(body, cfg.size_model.commitment_bytes)
            except (ProtocolError, struct.error):
                bad.append(sender)
                continue
            # the digest binds shares to the exact commitment broadcast bytes
            digest = _MEMO.digest(body)
            env = direct.get(sender)
            if env is None:
                bad.append(sender)
                continue
            try:
                raw = env.body
                (slen,) = struct.unpack_from("<I", raw, 5)
                end = 9 + slen
                sealed = raw[9:end]
                sig = raw[end:]
                if len(sealed) != slen or len(sig) != SIGNATURE_BYTES:
                    raise ProtocolError("malformed share bundle")
                body_d = raw[: len(raw) - SIGNATURE_BYTES]
                if not self._check_sig(env, body_d + digest, sig, broadcast=False):
                    raise DecryptionError("signature")
                box = self.crypto.box_with(sender, self.directory)
                plain = box.open_in(rnd, self.iteration, sealed, aad=digest)
                pr = _Reader(plain)
                col = pr.elems()
                wits = _read_witnesses(pr, cfg.size_model.witness_bytes)
                pr.done()
                if limbs.shape[0] != n_polys_expect or col.size != n_polys_expect:
                    raise ProtocolError("wrong polynomial count")
                if (col >= cfg.prime).any():
                    raise ProtocolError("non-canonical share")
            except (ProtocolError, DecryptionError, struct.error):
                bad.append(sender)
                continue
            if self._fast:
                mat = _MEMO.fast_matrix(
                    body, cfg.size_model.commitment_bytes, self._fast_commit_matrix
                )
                if mat is None or mat.shape[1] != cfg.degree + 1:
                    bad.append(sender)
                else:
                    cols[sender] = col
                    mats[sender] = mat
            else:
                if not self._verify_one_sender(limbs, col, wits, point):
                    bad.append(sender)
                else:
                    cols[sender] = col
        if self._fast and mats:
            order = sorted(mats.keys())
            big = np.vstack([mats[s] for s in order])
            vals = np.concatenate([cols[s] for s in order])
            evals = fastops.poly_eval_many(big, [point], cfg.prime)[:, 0]
            oks = (evals == vals).reshape(len(order), n_polys_expect).all(axis=1)
            for s, ok in zip(order, oks):
                if not ok:
                    bad.append(s)
                    del cols[s]
        return seen, cols, sorted(bad)

    def round_reshare(self, envs: list[Envelope]) -> list[Envelope]:
        cfg = self.cfg
        point = cfg.grad_cfg.eval_point(self.id)
        seen, cols, bad = self._verify_bundles(
            envs, T_COMMIT, T_SHARE, cfg.n_poly, R_SHARE, point,
            self.columns[self.id], self.own_commit_body,
        )
        self.reported = sorted(bad)
        # the broadcast set is the shared slot layout; columns this client
        # could not verify contribute zero, so any dealer-side inconsistency
        # surfaces later as an attributable decoding error instead of
        # silently skewing this client's packing
        self.layout = seen
        self.columns = cols
        if not cols:
            raise ProtocolAbort("no valid gradient senders")
        zero_col = np.zeros(cfg.n_poly, dtype=np.uint64)
        col_mat = np.stack([cols.get(u, zero_col) for u in seen])
        cs, nr = dotprod.partial_products(col_mat, self.root_column, cfg.prime)
        secrets = np.vstack(
            [
                dotprod.pack_consecutive(cs, cfg.reshare_pack),
                dotprod.pack_consecutive(nr, cfg.reshare_pack),
            ]
        )
        batch = share_batch(cfg.reshare_cfg, secrets, self._rng(2))
        comms = self.scheme.commit_batch(batch.coeffs)
        commit_body = (
            struct.pack("<BI", T_RECOMMIT, self.iteration)
            + _commit_blob(comms, cfg.size_model.commitment_bytes)
            + _ids_blob(self.reported)
        )
        out = [Envelope(self.id, SERVER_ID, R_RESHARE, commit_body + self._sign(BROADCAST, R_RESHARE, commit_body))]
        self.own_recommit_body = commit_body
        digest = hashlib.sha256(commit_body).digest()
        shares = batch.shares
        if self.flags.invalid_shares:
            shares = self._garbage_elems(shares.shape)
        n_polys = secrets.shape[0]
        for peer in self.roster0:
            if peer == self.id:
                self.reshare_rows[self.id] = shares[:, self.id - 1].copy()
                continue
            col = shares[:, peer - 1]
            if self.scheme.needs_witness:
                if not self.flags.invalid_shares:
                    wits = self.scheme.open_batch(batch.coeffs, cfg.reshare_cfg.eval_point(peer))
                else:
                    wits = [Witness(int(x)) for x in self._garbage_elems(n_polys)]
                wblob = _witness_blob(wits, cfg.size_model.witness_bytes)
            else:
                wblob = _empty_witness_blob(n_polys)
            plain = serialize_elems(col) + wblob
            box = self.crypto.box_with(peer, self.directory)
            sealed = box.seal(R_RESHARE, self.iteration, plain, aad=digest)
            body = struct.pack("<BI", T_RESHARE, self.iteration) + struct.pack("<I", len(sealed)) + sealed
            sig = self._sign(peer, R_RESHARE, body + digest)
            out.append(Envelope(self.id, peer, R_RESHARE, body + sig))
        return out

    # -- round 3: combine re-shares into final shares ----------------------

    def round_final(self, envs: list[Envelope]) -> list[Envelope]:
        cfg = self.cfg
        n_groups = dotprod.group_width(len(self.layout), cfg.reshare_pack)
        n_polys = 2 * n_groups
        point = cfg.reshare_cfg.eval_point(self.id)
        seen, rows, bad = self._verify_bundles(
            envs, T_RECOMMIT, T_RESHARE, n_polys, R_RESHARE, point,
            self.reshare_rows[self.id], self.own_recommit_body,
        )
        senders = tuple(s for s in seen if s in rows)
        if len(senders) < 2 * cfg.degree + 1:
            raise ProtocolAbort(
                f"{len(senders)} valid re-share senders cannot reduce degree {2 * cfg.degree}"
            )
        weights = dotprod.reduction_weights(cfg.grad_cfg, senders)
        received = np.stack([rows[s] for s in senders])
        finals = dotprod.combine_reshares(weights, received, cfg.prime)
        if self.flags.wrong_computation:
            finals = self._garbage_elems(finals.shape)
        body = struct.pack("<BI", T_FINAL, self.iteration) + serialize_elems(finals)
        sig = self._sign(SERVER_ID, R_FINAL, body)
        return [Envelope(self.id, SERVER_ID, R_FINAL, body + sig)]

    # -- round 4: trust-weighted aggregation -------------------------------

    def round_aggregate(self, env: Envelope) -> list[Envelope]:
        cfg = self.cfg
        r = _Reader(env.body)
        if r.u8() != T_TRUST or r.u32() != self.iteration:
            raise ProtocolAbort("expected trust message")
        body = env.body[: len(env.body) - SIGNATURE_BYTES]
        roster = r.ids()
        nums = r.elems()
        r.u64()  # denominator, informational
        sig = r.raw(SIGNATURE_BYTES)
        r.done()
        if not self.directory.verify(
            SERVER_ID, _sig_context(SERVER_ID, BROADCAST, env.round, self.iteration, body), sig
        ):
            raise ProtocolAbort("trust message signature failed")
        unknown = [u for u in roster if u not in self.layout]
        if unknown:
            raise ProtocolAbort(f"trust roster names users outside the layout {unknown}")
        # a column this client could not verify enters as zero; the resulting
        # wrong aggregate share is corrected and attributed at the server
        zero_col = np.zeros(cfg.n_poly, dtype=np.uint64)
        col_mat = np.stack([self.columns.get(u, zero_col) for u in roster])
        agg = fastops.matmul_mod(
            fastops.as_elems(nums, cfg.prime)[None, :], col_mat, cfg.prime
        )[0]
        if self.flags.wrong_computation:
            agg = self._garbage_elems(agg.shape)
        body = struct.pack("<BI", T_AGG, self.iteration) + serialize_elems(agg)
        sig = self._sign(SERVER_ID, R_AGG, body)
        return [Envelope(self.id, SERVER_ID, R_AGG, body + sig)]


# ---------------------------------------------------------------------------
# Server state machine
# ---------------------------------------------------------------------------


class ServerSession:
    def __init__(self, cfg: ProtocolConfig, crypto: PartyCrypto, directory: Directory):
        self.cfg = cfg
        self.crypto = crypto
        self.directory = directory
        self.scheme = cfg.scheme()

    def _rng(self, label: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.cfg.seed, self.iteration, SERVER_ID, label])
        )

    def _sign(self, recipient: int, rnd: int, body: bytes) -> bytes:
        return self.crypto.sign(_sig_context(SERVER_ID, recipient, rnd, self.iteration, body))

    def begin_iteration(
        self, iteration: int, weights: np.ndarray, root_gradient: np.ndarray, roster: list[int]
    ) -> list[Envelope]:
        cfg = self.cfg
        self.iteration = iteration
        self.respondents: dict[int, list[int]] = {}
        self.offenders: set[int] = set()
        root_gradient = np.asarray(root_gradient, dtype=np.float64)
        self.ref_norm = float(np.linalg.norm(root_gradient))
        if self.ref_norm > cfg.max_norm:
            raise ProtocolError(
                f"reference gradient norm {self.ref_norm:.3f} exceeds configured max {cfg.max_norm}"
            )
        self.root_ints = fastops.quantize_arr(root_gradient, cfg.scale)
        self.denom_sq = int((self.root_ints.astype(object) ** 2).sum())
        self.norm_bound = (math.isqrt(self.denom_sq) + math.isqrt(cfg.dim) + 2) ** 2
        batch = dotprod.share_vector(cfg.grad_cfg, self.root_ints, self._rng(0))
        comms = self.scheme.commit_batch(batch.coeffs)
        prefix = (
            struct.pack("<BI", T_MODEL, iteration)
            + _floats_blob(weights)
            + struct.pack("<d", self.ref_norm)
            + struct.pack("<Q", self.norm_bound)
            + _ids_blob(roster)
            + _commit_blob(comms, cfg.size_model.commitment_bytes)
        )
        out = []
        for peer in roster:
            point = cfg.grad_cfg.eval_point(peer)
            wits = (
                self.scheme.open_batch(batch.coeffs, point)
                if self.scheme.needs_witness
                else [Witness()] * len(comms)
            )
            plain = serialize_elems(batch.shares[:, peer - 1]) + _witness_blob(
                wits, cfg.size_model.witness_bytes
            )
            box = self.crypto.box_with(peer, self.directory)
            sealed = box.seal(R_MODEL, iteration, plain, aad=b"model")
            body = prefix + struct.pack("<I", len(sealed)) + sealed
            out.append(Envelope(SERVER_ID, peer, R_MODEL, body + self._sign(peer, R_MODEL, body)))
        self.roster0 = list(roster)
        return out

    def _collect(self, mailbox: ServerMailbox, rnd: int, want_type: int):
        """Validated submissions to the server for a phase, keyed by sender."""
        out: dict[int, tuple[Envelope, bytes]] = {}
        for env in mailbox.deliver(SERVER_ID, rnd):
            if len(env.body) < 5 + SIGNATURE_BYTES:
                continue
            t = env.body[0]
            (it,) = struct.unpack_from("<I", env.body, 1)
            if t != want_type or it != self.iteration:
                continue
            body = env.body[: len(env.body) - SIGNATURE_BYTES]
            sig = env.body[len(env.body) - SIGNATURE_BYTES :]
            rcpt = BROADCAST if want_type in (T_COMMIT, T_RECOMMIT) else SERVER_ID
            if self.directory.verify(
                env.sender, _sig_context(env.sender, rcpt, rnd, self.iteration, body), sig
            ):
                out[env.sender] = (env, body)
        return dict(sorted(out.items()))

    def forward_commits(self, mailbox: ServerMailbox, rnd: int) -> list[int]:
        got = self._collect(mailbox, rnd, T_COMMIT if rnd == R_SHARE else T_RECOMMIT)
        # every broadcast goes to every client, including back to its sender:
        # the echo is how a client confirms it is part of the shared layout
        for sender, (env, _) in got.items():
            for peer in self.roster0:
                mailbox.forward(env, peer)
        respondents = sorted(got.keys())
        self.respondents[rnd] = respondents
        self._check_quorum(respondents, rnd)
        if rnd == R_SHARE:
            self.layout = respondents
        if rnd == R_RESHARE:
            votes: dict[int, int] = {}
            for sender, (env, body) in got.items():
                r = _Reader(body)
                r.u8(), r.u32()
                _read_commit_limbs(r, self.cfg.size_model.commitment_bytes)
                for uid in r.ids():
                    if uid != sender:
                        votes[uid] = votes.get(uid, 0) + 1
            self.excluded = sorted(
                u for u, n in votes.items() if n > self.cfg.exclusion_votes
            )
            self.roster = [u for u in self.layout if u not in self.excluded]
        return respondents

    def _check_quorum(self, respondents: list[int], rnd: int) -> None:
        if len(respondents) < self.cfg.min_respondents:
            raise ProtocolAbort(
                f"round {rnd}: {len(respondents)} respondents below threshold "
                f"{self.cfg.min_respondents}"
            )

    def collect_finals(self, mailbox: ServerMailbox) -> list[Envelope]:
        cfg = self.cfg
        got = self._collect(mailbox, R_FINAL, T_FINAL)
        # voted-out clients are no longer participants; their finals would be
        # built from self-trusted columns and only burn decoding budget
        got = {s: v for s, v in got.items() if s in self.roster}
        n_groups = dotprod.group_width(len(self.layout), cfg.reshare_pack)
        n_polys = 2 * n_groups
        parties, rows = [], []
        for sender, (env, body) in got.items():
            r = _Reader(body)
            r.u8(), r.u32()
            try:
                vals = r.elems()
                r.done()
            except ProtocolError:
                continue
            if vals.size != n_polys or (vals >= cfg.prime).any():
                self.offenders.add(sender)
                continue
            parties.append(sender)
            rows.append(vals)
        self.respondents[R_FINAL] = parties
        self._check_quorum(parties, R_FINAL)
        values, bad = dotprod.recover_packed_values(
            cfg.reshare_cfg, parties, np.stack(rows), n_polys * cfg.reshare_pack
        )
        self.offenders.update(bad)
        per_group = n_groups * cfg.reshare_pack
        cs = fastops.decode_signed_arr(values[:per_group][: len(self.layout)], cfg.prime)
        nr = fastops.decode_signed_arr(values[per_group:][: len(self.layout)], cfg.prime)
        self.numerators = {}
        self.flagged = []
        roster_set = set(self.roster)
        for uid, dot_v, norm_v in zip(self.layout, cs.tolist(), nr.tolist()):
            if uid not in roster_set:
                continue  # voted out: the slot decodes but never aggregates
            num = trust_numerator(dot_v, norm_v, self.norm_bound)
            if norm_v > self.norm_bound or norm_v < 0:
                self.flagged.append(uid)
            self.numerators[uid] = num
        self.denominator = sum(self.numerators.values())
        nums_arr = np.array([self.numerators[u] for u in self.roster], dtype=np.uint64)
        body = (
            struct.pack("<BI", T_TRUST, self.iteration)
            + _ids_blob(self.roster)
            + serialize_elems(nums_arr)
            + struct.pack("<Q", min(self.denominator, 2**64 - 1))
        )
        sig = self._sign(BROADCAST, R_FINAL, body)
        return [
            Envelope(SERVER_ID, peer, R_FINAL, body + sig)
            for peer in self.respondents[R_FINAL]
        ]

    def collect_aggregates(self, mailbox: ServerMailbox) -> RoundResult:
        cfg = self.cfg
        got = self._collect(mailbox, R_AGG, T_AGG)
        got = {s: v for s, v in got.items() if s in self.roster}
        parties, rows = [], []
        for sender, (env, body) in got.items():
            r = _Reader(body)
            r.u8(), r.u32()
            try:
                vals = r.elems()
                r.done()
            except ProtocolError:
                continue
            if vals.size != cfg.n_poly or (vals >= cfg.prime).any():
                self.offenders.add(sender)
                continue
            parties.append(sender)
            rows.append(vals)
        self.respondents[R_AGG] = parties
        self._check_quorum(parties, R_AGG)
        values, bad = dotprod.recover_packed_values(
            cfg.grad_cfg, parties, np.stack(rows), cfg.n_poly * cfg.pack
        )
        self.offenders.update(bad)
        # values are strided-packed: rebuild the flat weighted-sum vector
        mat = values.reshape(cfg.n_poly, cfg.pack)
        flat = dotprod.unpack_strided(mat, cfg.dim)
        ints = fastops.decode_signed_arr(flat, cfg.prime).astype(object)
        if self.denominator > 0:
            update = (ints / (cfg.scale * self.denominator)).astype(np.float64)
        else:
            update = np.zeros(cfg.dim, dtype=np.float64)
        trust = {
            u: (n / self.denom_sq if self.denom_sq else 0.0)
            for u, n in self.numerators.items()
        }
        return RoundResult(
            iteration=self.iteration,
            update=update,
            numerators=dict(self.numerators),
            denominator=self.denominator,
            trust=trust,
            roster=list(self.roster),
            excluded=list(self.excluded),
            flagged=list(self.flagged),
            offenders=sorted(self.offenders),
            respondents=dict(self.respondents),
        )


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def run_iteration(
    cfg: ProtocolConfig,
    server: ServerSession,
    clients: dict[int, ClientSession],
    mailbox: ServerMailbox,
    iteration: int,
    weights: np.ndarray,
    gradients: dict[int, np.ndarray],
    root_gradient: np.ndarray,
) -> RoundResult:
    """Drive one full iteration through the mailbox.

    `gradients` supplies each client's local gradient; clients missing from it
    or silenced by the mailbox schedule sit out from that round onward.
    """
    roster0 = sorted(clients.keys())
    _MEMO.clear()
    dead: set[int] = set()

    def active(pid: int, rnd: int) -> bool:
        return pid in gradients and pid not in dead and not mailbox.is_silent(pid, rnd)

    def step(pid: int, fn, *args) -> None:
        # a client that cannot serve a round consistently goes quiet instead
        # of fabricating values; server-side aborts still end the iteration
        try:
            mailbox.submit_all(fn(*args))
        except ProtocolAbort:
            dead.add(pid)

    mailbox.submit_all(server.begin_iteration(iteration, weights, root_gradient, roster0))
    for pid in roster0:
        clients[pid].begin_iteration(iteration)
        if active(pid, R_MODEL):
            try:
                for env in mailbox.deliver(pid, R_MODEL):
                    clients[pid].handle_model(env)
            except ProtocolAbort:
                dead.add(pid)
    for pid in roster0:
        if active(pid, R_SHARE):
            step(pid, clients[pid].round_share, gradients[pid])
    server.forward_commits(mailbox, R_SHARE)
    for pid in roster0:
        if active(pid, R_RESHARE):
            step(pid, clients[pid].round_reshare, mailbox.deliver(pid, R_SHARE))
    server.forward_commits(mailbox, R_RESHARE)
    for pid in roster0:
        if active(pid, R_FINAL):
            step(pid, clients[pid].round_final, mailbox.deliver(pid, R_RESHARE))
    mailbox.submit_all(server.collect_finals(mailbox))
    for pid in roster0:
        if active(pid, R_AGG):
            for env in mailbox.deliver(pid, R_FINAL):
                step(pid, clients[pid].round_aggregate, env)
    return server.collect_aggregates(mailbox)


def build_sessions(
    cfg: ProtocolConfig, flags: dict[int, ClientFlags] | None = None
) -> tuple[ServerSession, dict[int, ClientSession]]:
    from .channel import setup_keys

    ids = [SERVER_ID] + list(range(1, cfg.n_clients + 1))
    parties, directory = setup_keys(ids, mode=cfg.crypto_mode, seed=cfg.seed)
    server = ServerSession(cfg, parties[SERVER_ID], directory)
    flags = flags or {}
    clients = {
        pid: ClientSession(cfg, pid, parties[pid], directory, flags.get(pid))
        for pid in range(1, cfg.n_clients + 1)
    }
    return server, clients
