"""Trusted dealer: input-independent correlated randomness.

The dealer runs before the online parties connect. Given a Plan (how many of
each correlation the computation will consume, in consumption order for the
shaped ones), deal() derives both parties' bundles from one seed. Bundles are
consumed through cursor-style take_* methods so a party and its peer walk the
same material in the same order; falling out of step surfaces as a
DesyncError and running dry as BundleExhausted.

Correlation kinds:
  matmul   X shared, weight held by party 1: party 0 gets (A, C0),
           party 1 gets (B, C1) with C = A @ B.
  elemul   elementwise version of the same asymmetry.
  shared   both operands shared: standard triple (<A>, <B>, <C>), C = A * B.
  quapol   input mask plus four scalar triples per element, for evaluating a
           party-1-private quadratic on a shared value.
  poly     combined mask r = a + b, shared powers of r, and one masked-operand
           triple per (coefficient, power) product, for a degree-d polynomial.
  drelu    shared input mask a, comparison keys on the masked complement, and
           a boolean correction bit per element.
  bitxa    boolean-shared random bit with arithmetic shares of the bit, a
           value mask, and their product.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import BundleExhausted, BundleIntegrityError, ConfigError, DesyncError
from .fss import DcfKeyBatch, SecurityParams, batch_from_bytes, batch_to_bytes, gen_dcf, key_size_bits
from .ring import Ring, RingParams

BUNDLE_MAGIC = b"PGDB"
BUNDLE_VERSION = 1


@dataclass
class Plan:
    """Correlation counts for one secure computation.

    Matmul triples are shaped and ordered; every other pool is a flat element
    count. The secure engine must consume in the order the plan was built.
    """

    matmul_shapes: list = field(default_factory=list)  # (n, k, m) per call
    elemul: int = 0
    shared: int = 0
    quapol: int = 0
    drelu: int = 0
    bitxa: int = 0
    poly: dict = field(default_factory=dict)  # degree -> element count

    def add_smatmul(self, n: int, k: int, m: int) -> None:
        self.matmul_shapes.append((int(n), int(k), int(m)))

    def add_selemul(self, count: int) -> None:
        self.elemul += int(count)

    def add_shared_mul(self, count: int) -> None:
        self.shared += int(count)

    def add_squapol(self, count: int) -> None:
        self.quapol += int(count)

    def add_spolyd(self, count: int, degree: int) -> None:
        if degree < 1:
            raise ConfigError("polynomial degree must be at least 1")
        self.poly[degree] = self.poly.get(degree, 0) + int(count)

    def add_sdrelu(self, count: int) -> None:
        self.drelu += int(count)

    def add_sbitxa(self, count: int) -> None:
        self.bitxa += int(count)

    def add_secrelu(self, count: int) -> None:
        # comparison then bit-times-value
        self.add_sdrelu(count)
        self.add_sbitxa(count)

    def add_spiepol(self, count: int, pieces: int) -> None:
        # k-1 interval selectors, k quadratics, 2k-2 selector multiplies
        if pieces < 2:
            raise ConfigError("piecewise evaluation needs at least 2 pieces")
        self.add_sdrelu(count * (pieces - 1))
        self.add_squapol(count * pieces)
        self.add_sbitxa(count * (2 * pieces - 2))

    def merge(self, other: "Plan") -> None:
        self.matmul_shapes.extend(other.matmul_shapes)
        self.elemul += other.elemul
        self.shared += other.shared
        self.quapol += other.quapol
        self.drelu += other.drelu
        self.bitxa += other.bitxa
        for d, n in other.poly.items():
            self.poly[d] = self.poly.get(d, 0) + n

    def summary(self) -> dict:
        return {
            "matmul": list(self.matmul_shapes),
            "elemul": self.elemul,
            "shared": self.shared,
            "quapol": self.quapol,
            "drelu": self.drelu,
            "bitxa": self.bitxa,
            "poly": dict(self.poly),
        }


# ------------------------------------------------------------- pool records


@dataclass
class MatmulTriple:
    own: np.ndarray  # party 0: A (n, k); party 1: B (k, m)
    c: np.ndarray  # share of A @ B, (n, m)


@dataclass
class QuapolTake:
    mask: np.ndarray | None  # party 0 only: input mask a
    opr: np.ndarray  # (4, n): party 0 the a_i, party 1 the b_i
    c: np.ndarray  # (4, n): share of a_i * b_i


@dataclass
class DreluTake:
    mask: np.ndarray  # share of the additive input mask
    rbit: np.ndarray  # boolean share of the sign correction
    keys: DcfKeyBatch


@dataclass
class BitxaTake:
    bbit: np.ndarray  # boolean share of the random bit
    beta: np.ndarray  # arithmetic share of the same bit
    m: np.ndarray  # share of the value mask
    bm: np.ndarray  # share of bit * mask


@dataclass
class PolyTake:
    mask: np.ndarray  # party 0: a, party 1: b, with r = a + b
    rpow: np.ndarray  # (d, n): shares of r^1 .. r^d
    opr: np.ndarray  # (T, n): party 0 alpha, party 1 beta, T = d(d+1)/2
    c: np.ndarray  # (T, n): share of alpha * beta


def poly_triple_count(degree: int) -> int:
    """Masked-operand products for degree d: one per (i, m), 1 <= m <= i <= d."""
    return degree * (degree + 1) // 2


class _Cursor:
    def __init__(self, total: int, name: str):
        self.total = total
        self.used = 0
        self.name = name

    def take(self, count: int) -> slice:
        if self.used + count > self.total:
            raise BundleExhausted(
                f"{self.name} pool exhausted: wanted {count}, {self.total - self.used} left"
            )
        s = slice(self.used, self.used + count)
        self.used += count
        return s


class PartyBundle:
    """One party's correlated randomness, with consumption cursors."""

    def __init__(self, party: int, ring: RingParams, sec: SecurityParams, drelu_c: int = 0):
        self.party = party
        self.ring = ring
        self.sec = sec
        self.drelu_c = drelu_c
        self.matmul: list[MatmulTriple] = []
        self.matmul_shapes: list = []
        self.el_own = _empty_u64()
        self.el_c = _empty_u64()
        self.sh_a = _empty_u64()
        self.sh_b = _empty_u64()
        self.sh_c = _empty_u64()
        self.qp_mask = _empty_u64()  # party 0 only
        self.qp_opr = np.zeros((4, 0), np.uint64)
        self.qp_c = np.zeros((4, 0), np.uint64)
        self.dr_mask = _empty_u64()
        self.dr_rbit = np.zeros(0, np.uint8)
        self.dr_keys: DcfKeyBatch | None = None
        self.bx_bbit = np.zeros(0, np.uint8)
        self.bx_beta = _empty_u64()
        self.bx_m = _empty_u64()
        self.bx_bm = _empty_u64()
        self.poly: dict[int, tuple] = {}  # degree -> (mask, rpow, opr, c)
        self._cursors: dict[str, _Cursor] = {}

    def _init_cursors(self) -> None:
        self._cursors = {
            "matmul": _Cursor(len(self.matmul), "matmul"),
            "elemul": _Cursor(self.el_own.shape[0], "elemul"),
            "shared": _Cursor(self.sh_a.shape[0], "shared"),
            "quapol": _Cursor(self.qp_opr.shape[1], "quapol"),
            "drelu": _Cursor(self.dr_mask.shape[0], "drelu"),
            "bitxa": _Cursor(self.bx_bbit.shape[0], "bitxa"),
        }
        for d, (_, _, opr, _) in self.poly.items():
            self._cursors[f"poly{d}"] = _Cursor(opr.shape[1], f"poly{d}")

    # ------------------------------------------------------------ take_*

    def take_matmul(self, n: int, k: int, m: int) -> MatmulTriple:
        cur = self._cursors["matmul"]
        idx = cur.take(1).start
        shape = self.matmul_shapes[idx]
        if shape != (n, k, m):
            raise DesyncError(f"matmul triple {idx} is {shape}, caller wants {(n, k, m)}")
        return self.matmul[idx]

    def take_elemul(self, count: int):
        s = self._cursors["elemul"].take(count)
        return self.el_own[s], self.el_c[s]

    def take_shared(self, count: int):
        s = self._cursors["shared"].take(count)
        return self.sh_a[s], self.sh_b[s], self.sh_c[s]

    def take_quapol(self, count: int) -> QuapolTake:
        s = self._cursors["quapol"].take(count)
        mask = self.qp_mask[s] if self.party == 0 else None
        return QuapolTake(mask, self.qp_opr[:, s], self.qp_c[:, s])

    def take_drelu(self, count: int) -> DreluTake:
        s = self._cursors["drelu"].take(count)
        assert self.dr_keys is not None
        return DreluTake(self.dr_mask[s], self.dr_rbit[s], self.dr_keys.take(s.start, count))

    def take_bitxa(self, count: int) -> BitxaTake:
        s = self._cursors["bitxa"].take(count)
        return BitxaTake(self.bx_bbit[s], self.bx_beta[s], self.bx_m[s], self.bx_bm[s])

    def take_poly(self, count: int, degree: int) -> PolyTake:
        key = f"poly{degree}"
        if key not in self._cursors:
            raise BundleExhausted(f"no degree-{degree} polynomial material in bundle")
        s = self._cursors[key].take(count)
        mask, rpow, opr, c = self.poly[degree]
        return PolyTake(mask[s], rpow[:, s], opr[:, s], c[:, s])

    # ---------------------------------------------------------- accounting

    def usage(self) -> dict:
        return {name: (cur.used, cur.total) for name, cur in self._cursors.items()}

    def assert_drained(self) -> None:
        left = {n: (c.total - c.used) for n, c in self._cursors.items() if c.used != c.total}
        if left:
            raise DesyncError(f"unconsumed correlations: {left}")

    def material_bits(self) -> int:
        """Total correlated-randomness bits held by this party."""
        l = self.ring.l
        bits = 0
        for t in self.matmul:
            bits += l * (t.own.size + t.c.size)
        bits += l * (self.el_own.size + self.el_c.size)
        bits += l * (self.sh_a.size + self.sh_b.size + self.sh_c.size)
        bits += l * (self.qp_mask.size + self.qp_opr.size + self.qp_c.size)
        n_dr = self.dr_mask.shape[0]
        bits += l * n_dr + n_dr  # mask shares plus correction bits
        bits += n_dr * key_size_bits(l - 1, 1, self.sec.kappa)
        bits += self.bx_bbit.shape[0] + l * (self.bx_beta.size + self.bx_m.size + self.bx_bm.size)
        for mask, rpow, opr, c in self.poly.values():
            bits += l * (mask.size + rpow.size + opr.size + c.size)
        return bits


def _empty_u64() -> np.ndarray:
    return np.zeros(0, np.uint64)


def _empty_keys(party: int, in_bits: int, sec: SecurityParams) -> DcfKeyBatch:
    sb = sec.seed_bytes
    return DcfKeyBatch(
        party, in_bits, 1, sec,
        np.zeros((0, sb), np.uint8), np.zeros((0, in_bits, sb), np.uint8),
        np.zeros((0, in_bits), np.uint8), np.zeros((0, in_bits), np.uint8),
        np.zeros((0, in_bits), np.uint64), np.zeros(0, np.uint64),
    )


# ------------------------------------------------------------------ dealing


def deal(
    plan: Plan,
    ring_params: RingParams,
    sec: SecurityParams | None = None,
    seed: int = 0,
    drelu_c: int = 0,
) -> tuple[PartyBundle, PartyBundle]:
    """Derive both parties' bundles from one seed.

    Generation order is fixed (matmul, elemul, shared, quapol, drelu, bitxa,
    poly by ascending degree) so a seed fully determines both bundles.
    """
    sec = sec or SecurityParams()
    if drelu_c not in (0, 1):
        raise ConfigError("drelu blinding constant must be 0 or 1")
    ring = Ring(ring_params)
    rng = np.random.default_rng(seed)
    b0 = PartyBundle(0, ring_params, sec, drelu_c)
    b1 = PartyBundle(1, ring_params, sec, drelu_c)

    for (n, k, m) in plan.matmul_shapes:
        a = ring.rand(rng, (n, k))
        b = ring.rand(rng, (k, m))
        c0, c1 = ring.share(ring.matmul(a, b), rng)
        b0.matmul.append(MatmulTriple(a, c0))
        b1.matmul.append(MatmulTriple(b, c1))
        b0.matmul_shapes.append((n, k, m))
        b1.matmul_shapes.append((n, k, m))

    if plan.elemul:
        n = plan.elemul
        a = ring.rand(rng, (n,))
        b = ring.rand(rng, (n,))
        c0, c1 = ring.share(ring.mul(a, b), rng)
        b0.el_own, b0.el_c = a, c0
        b1.el_own, b1.el_c = b, c1

    if plan.shared:
        n = plan.shared
        a = ring.rand(rng, (n,))
        b = ring.rand(rng, (n,))
        a0, a1 = ring.share(a, rng)
        bb0, bb1 = ring.share(b, rng)
        c0, c1 = ring.share(ring.mul(a, b), rng)
        b0.sh_a, b0.sh_b, b0.sh_c = a0, bb0, c0
        b1.sh_a, b1.sh_b, b1.sh_c = a1, bb1, c1

    if plan.quapol:
        n = plan.quapol
        b0.qp_mask = ring.rand(rng, (n,))
        ai = ring.rand(rng, (4, n))
        bi = ring.rand(rng, (4, n))
        c0, c1 = ring.share(ring.mul(ai, bi), rng)
        b0.qp_opr, b0.qp_c = ai, c0
        b1.qp_opr, b1.qp_c = bi, c1

    if plan.drelu:
        n = plan.drelu
        a0 = ring.rand(rng, (n,))
        a1 = ring.rand(rng, (n,))
        comp = ring.neg(ring.add(a0, a1))  # the value that re-adds to cancel the mask
        low = comp & np.uint64(ring.half - 1)
        hi_bit = ring.msb(comp)
        r = (np.uint8(drelu_c) ^ hi_bit ^ np.uint8(1)).astype(np.uint8)
        r0 = ring.rand_bits(rng, (n,))
        r1 = r ^ r0
        k0, k1 = gen_dcf(rng, low, np.ones(n, np.uint64), ring.l - 1, 1, sec)
        b0.dr_mask, b0.dr_rbit, b0.dr_keys = a0, r0, k0
        b1.dr_mask, b1.dr_rbit, b1.dr_keys = a1, r1, k1
    else:
        b0.dr_keys = _empty_keys(0, ring.l - 1, sec)
        b1.dr_keys = _empty_keys(1, ring.l - 1, sec)

    if plan.bitxa:
        n = plan.bitxa
        bit = ring.rand_bits(rng, (n,))
        bit0 = ring.rand_bits(rng, (n,))
        bit1 = bit ^ bit0
        beta = bit.astype(np.uint64)
        beta0, beta1 = ring.share(beta, rng)
        m = ring.rand(rng, (n,))
        m0, m1 = ring.share(m, rng)
        bm0, bm1 = ring.share(ring.mul(beta, m), rng)
        b0.bx_bbit, b0.bx_beta, b0.bx_m, b0.bx_bm = bit0, beta0, m0, bm0
        b1.bx_bbit, b1.bx_beta, b1.bx_m, b1.bx_bm = bit1, beta1, m1, bm1

    for d in sorted(plan.poly):
        n = plan.poly[d]
        if n == 0:
            continue
        a = ring.rand(rng, (n,))
        b = ring.rand(rng, (n,))
        r = ring.add(a, b)
        rpow = np.zeros((d, n), np.uint64)
        acc = r
        for mth in range(d):
            rpow[mth] = acc
            acc = ring.mul(acc, r)
        rp0, rp1 = ring.share(rpow, rng)
        t = poly_triple_count(d)
        alpha = ring.rand(rng, (t, n))
        beta_ = ring.rand(rng, (t, n))
        c0, c1 = ring.share(ring.mul(alpha, beta_), rng)
        b0.poly[d] = (a, rp0, alpha, c0)
        b1.poly[d] = (b, rp1, beta_, c1)

    b0._init_cursors()
    b1._init_cursors()
    return b0, b1


# ------------------------------------------------------------ serialization
#
# Bundle files: magic, version byte, party byte, sectioned body, crc32 of
# everything after the magic. Sections are (name, kind, dims, payload) with
# kind 0 = uint64 array, 1 = uint8 array, 2 = raw bytes, 3 = json.

_SEC_HEAD = struct.Struct("<BB")  # name length, kind


def _emit(out: list, name: str, kind: int, dims: tuple, payload: bytes) -> None:
    nb = name.encode()
    out.append(_SEC_HEAD.pack(len(nb), kind))
    out.append(nb)
    out.append(struct.pack("<B", len(dims)))
    out.append(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
    out.append(struct.pack("<I", len(payload)))
    out.append(payload)


def _emit_u64(out: list, name: str, arr: np.ndarray) -> None:
    _emit(out, name, 0, arr.shape, np.ascontiguousarray(arr, np.uint64).astype("<u8").tobytes())


def _emit_u8(out: list, name: str, arr: np.ndarray) -> None:
    _emit(out, name, 1, arr.shape, np.ascontiguousarray(arr, np.uint8).tobytes())


def save_bundle(bundle: PartyBundle, path: str) -> None:
    out: list[bytes] = []
    meta = {
        "party": bundle.party,
        "l": bundle.ring.l,
        "f": bundle.ring.f,
        "kappa": bundle.sec.kappa,
        "prg": bundle.sec.prg,
        "drelu_c": bundle.drelu_c,
        "matmul_shapes": [list(s) for s in bundle.matmul_shapes],
        "elemul": int(bundle.el_own.shape[0]),
        "shared": int(bundle.sh_a.shape[0]),
        "quapol": int(bundle.qp_opr.shape[1]),
        "drelu": int(bundle.dr_mask.shape[0]),
        "bitxa": int(bundle.bx_bbit.shape[0]),
        "poly": {str(d): int(v[2].shape[1]) for d, v in sorted(bundle.poly.items())},
    }
    _emit(out, "meta", 3, (), json.dumps(meta, sort_keys=True).encode())
    for i, t in enumerate(bundle.matmul):
        _emit_u64(out, f"mm{i}.own", t.own)
        _emit_u64(out, f"mm{i}.c", t.c)
    _emit_u64(out, "el.own", bundle.el_own)
    _emit_u64(out, "el.c", bundle.el_c)
    _emit_u64(out, "sh.a", bundle.sh_a)
    _emit_u64(out, "sh.b", bundle.sh_b)
    _emit_u64(out, "sh.c", bundle.sh_c)
    if bundle.party == 0:
        _emit_u64(out, "qp.mask", bundle.qp_mask)
    _emit_u64(out, "qp.opr", bundle.qp_opr)
    _emit_u64(out, "qp.c", bundle.qp_c)
    _emit_u64(out, "dr.mask", bundle.dr_mask)
    _emit_u8(out, "dr.rbit", bundle.dr_rbit)
    _emit(out, "dr.keys", 2, (), batch_to_bytes(bundle.dr_keys) if bundle.dr_keys else b"")
    _emit_u8(out, "bx.bbit", bundle.bx_bbit)
    _emit_u64(out, "bx.beta", bundle.bx_beta)
    _emit_u64(out, "bx.m", bundle.bx_m)
    _emit_u64(out, "bx.bm", bundle.bx_bm)
    for d, (mask, rpow, opr, c) in sorted(bundle.poly.items()):
        _emit_u64(out, f"p{d}.mask", mask)
        _emit_u64(out, f"p{d}.rpow", rpow)
        _emit_u64(out, f"p{d}.opr", opr)
        _emit_u64(out, f"p{d}.c", c)

    body = struct.pack("<B", BUNDLE_VERSION) + b"".join(out)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC + body + struct.pack("<I", crc))


def _read_sections(body: bytes) -> dict:
    sections = {}
    pos = 0
    while pos < len(body):
        nlen, kind = _SEC_HEAD.unpack_from(body, pos)
        pos += _SEC_HEAD.size
        name = body[pos : pos + nlen].decode()
        pos += nlen
        ndim = body[pos]
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", body, pos) if ndim else ()
        pos += 4 * ndim
        (plen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        payload = body[pos : pos + plen]
        pos += plen
        if kind == 0:
            sections[name] = np.frombuffer(payload, "<u8").astype(np.uint64).reshape(dims)
        elif kind == 1:
            sections[name] = np.frombuffer(payload, np.uint8).reshape(dims).copy()
        elif kind == 2:
            sections[name] = payload
        elif kind == 3:
            sections[name] = json.loads(payload.decode())
        else:
            raise BundleIntegrityError(f"unknown section kind {kind}")
    return sections


def load_bundle(path: str) -> PartyBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 9 or raw[:4] != BUNDLE_MAGIC:
        raise BundleIntegrityError("not a dealer bundle file")
    body, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise BundleIntegrityError("bundle checksum mismatch")
    if body[0] != BUNDLE_VERSION:
        raise BundleIntegrityError(f"unsupported bundle version {body[0]}")
    sec_map = _read_sections(body[1:])
    meta = sec_map["meta"]
    ring = RingParams(l=meta["l"], f=meta["f"])
    sec = SecurityParams(kappa=meta["kappa"], prg=meta["prg"])
    bundle = PartyBundle(meta["party"], ring, sec, meta["drelu_c"])
    bundle.matmul_shapes = [tuple(s) for s in meta["matmul_shapes"]]
    for i, (n, k, m) in enumerate(bundle.matmul_shapes):
        own = sec_map[f"mm{i}.own"]
        want = (n, k) if bundle.party == 0 else (k, m)
        if own.shape != want:
            raise BundleIntegrityError(f"matmul triple {i} has shape {own.shape}, expected {want}")
        bundle.matmul.append(MatmulTriple(own, sec_map[f"mm{i}.c"]))
    bundle.el_own, bundle.el_c = sec_map["el.own"], sec_map["el.c"]
    bundle.sh_a, bundle.sh_b, bundle.sh_c = sec_map["sh.a"], sec_map["sh.b"], sec_map["sh.c"]
    if bundle.party == 0:
        bundle.qp_mask = sec_map["qp.mask"]
    bundle.qp_opr, bundle.qp_c = sec_map["qp.opr"], sec_map["qp.c"]
    bundle.dr_mask, bundle.dr_rbit = sec_map["dr.mask"], sec_map["dr.rbit"]
    n_dr = bundle.dr_mask.shape[0]
    if n_dr:
        bundle.dr_keys = batch_from_bytes(
            sec_map["dr.keys"], n_dr, bundle.party, ring.l - 1, 1, sec
        )
    else:
        bundle.dr_keys = _empty_keys(bundle.party, ring.l - 1, sec)
    bundle.bx_bbit, bundle.bx_beta = sec_map["bx.bbit"], sec_map["bx.beta"]
    bundle.bx_m, bundle.bx_bm = sec_map["bx.m"], sec_map["bx.bm"]
    for dstr in meta["poly"]:
        d = int(dstr)
        bundle.poly[d] = (
            sec_map[f"p{d}.mask"], sec_map[f"p{d}.rpow"],
            sec_map[f"p{d}.opr"], sec_map[f"p{d}.c"],
        )
    bundle._init_cursors()
    return bundle
