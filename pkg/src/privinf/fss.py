"""Function secret sharing for comparison: two-key GGM-tree construction.

gen_dcf splits the function f(x) = beta * 1{x < alpha} over Z_{2^in_bits}
into two keys; eval_dcf produces additive output shares (XOR shares when the
output group is Z_2, which is the same thing mod 2). Everything is batched:
a key batch holds n independent keys and evaluation walks all trees in
lockstep, one PRG sweep per level.

The tree PRG is fixed-key AES-128 in a Matyas-Meyer-Oseas arrangement
(E_K(s xor c_j) xor (s xor c_j) for four per-node constants c_j); a shake128
fallback supports seed widths other than 128 bits. The choice is a
configuration constant carried in the transport handshake.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import ConfigError

PRG_IDS = {"aes128-mmo": 1, "shake128": 2}
_PRG_NAMES = {v: k for k, v in PRG_IDS.items()}

# Fixed AES key and the four per-node tweak constants. Arbitrary but pinned:
# determinism across runs and endpoints depends on them.
_AES_FIXED_KEY = bytes.fromhex("243f6a8885a308d313198a2e03707344")
_TWEAKS = [bytes([j]) * 16 for j in range(4)]


@dataclass(frozen=True)
class SecurityParams:
    """Seed width kappa (bits) and the tree PRG identifier."""

    kappa: int = 128
    prg: str = "aes128-mmo"

    def __post_init__(self) -> None:
        if self.prg not in PRG_IDS:
            raise ConfigError(f"unknown prg {self.prg!r}; known: {sorted(PRG_IDS)}")
        if self.prg == "aes128-mmo" and self.kappa != 128:
            raise ConfigError("aes128-mmo fixes kappa at 128")
        if self.prg == "shake128" and not (64 <= self.kappa <= 256 and self.kappa % 8 == 0):
            raise ConfigError("shake128 kappa must be a multiple of 8 in [64, 256]")

    @property
    def seed_bytes(self) -> int:
        return self.kappa // 8

    @property
    def prg_id(self) -> int:
        return PRG_IDS[self.prg]


class TreePrg:
    """Expands a batch of node seeds into left/right child material.

    expand() maps seeds (n, sb) to (s_left, v_left, t_left, s_right, v_right,
    t_right) where s_* are child seeds, v_* uint64 output-group material and
    t_* single control bits.
    """

    def __init__(self, sec: SecurityParams):
        self.sec = sec
        self._cipher = Cipher(algorithms.AES(_AES_FIXED_KEY), modes.ECB())

    def expand(self, seeds: np.ndarray):
        n, sb = seeds.shape
        if sb != self.sec.seed_bytes:
            raise ConfigError("seed width mismatch")
        if self.sec.prg == "aes128-mmo":
            return self._expand_aes(seeds, n)
        return self._expand_shake(seeds, n, sb)

    def _expand_aes(self, seeds: np.ndarray, n: int):
        tw = np.frombuffer(b"".join(_TWEAKS), dtype=np.uint8).reshape(4, 16)
        x = (seeds[None, :, :] ^ tw[:, None, :]).reshape(4 * n, 16)
        enc = self._cipher.encryptor()
        out = np.frombuffer(enc.update(x.tobytes()), dtype=np.uint8).reshape(4 * n, 16)
        out = out ^ x
        sl, sr = out[0:n], out[n : 2 * n]
        bl, br = out[2 * n : 3 * n], out[3 * n : 4 * n]
        vl = np.ascontiguousarray(bl[:, :8]).view("<u8").reshape(n)
        vr = np.ascontiguousarray(br[:, :8]).view("<u8").reshape(n)
        tl = bl[:, 15] & np.uint8(1)
        tr = br[:, 15] & np.uint8(1)
        return sl, vl, tl, sr, vr, tr

    def _expand_shake(self, seeds: np.ndarray, n: int, sb: int):
        import hashlib

        need = 2 * sb + 17
        raw = bytearray()
        for i in range(n):
            raw += hashlib.shake_128(b"privinf-tree" + seeds[i].tobytes()).digest(need)
        buf = np.frombuffer(bytes(raw), dtype=np.uint8).reshape(n, need)
        sl = buf[:, :sb].copy()
        sr = buf[:, sb : 2 * sb].copy()
        vl = np.ascontiguousarray(buf[:, 2 * sb : 2 * sb + 8]).view("<u8").reshape(n)
        vr = np.ascontiguousarray(buf[:, 2 * sb + 8 : 2 * sb + 16]).view("<u8").reshape(n)
        tl = buf[:, 2 * sb + 16] & np.uint8(1)
        tr = (buf[:, 2 * sb + 16] >> np.uint8(1)) & np.uint8(1)
        return sl, vl, tl, sr, vr, tr


def _convert(block: np.ndarray) -> np.ndarray:
    """Output-group conversion: first eight seed bytes as little-endian uint64."""
    return np.ascontiguousarray(block[:, :8]).view("<u8").reshape(block.shape[0])


def _signed(values: np.ndarray, tbits: np.ndarray) -> np.ndarray:
    """(-1)^t * values in wraparound uint64 arithmetic."""
    return np.where(tbits.astype(bool), np.uint64(0) - values, values)


@dataclass
class DcfKeyBatch:
    """One party's half of n comparison keys sharing in_bits/out_bits."""

    party: int
    in_bits: int
    out_bits: int
    sec: SecurityParams
    root: np.ndarray  # (n, seed_bytes) uint8
    cw_seed: np.ndarray  # (n, in_bits, seed_bytes) uint8
    cw_tl: np.ndarray  # (n, in_bits) uint8
    cw_tr: np.ndarray  # (n, in_bits) uint8
    cw_v: np.ndarray  # (n, in_bits) uint64
    final_cw: np.ndarray  # (n,) uint64

    def __len__(self) -> int:
        return self.root.shape[0]

    def take(self, start: int, count: int) -> "DcfKeyBatch":
        sl = slice(start, start + count)
        return DcfKeyBatch(
            self.party, self.in_bits, self.out_bits, self.sec,
            self.root[sl], self.cw_seed[sl], self.cw_tl[sl],
            self.cw_tr[sl], self.cw_v[sl], self.final_cw[sl],
        )

    def repeat(self, reps: int) -> "DcfKeyBatch":
        """Each key repeated reps times consecutively (for many-point eval)."""
        return DcfKeyBatch(
            self.party, self.in_bits, self.out_bits, self.sec,
            np.repeat(self.root, reps, axis=0), np.repeat(self.cw_seed, reps, axis=0),
            np.repeat(self.cw_tl, reps, axis=0), np.repeat(self.cw_tr, reps, axis=0),
            np.repeat(self.cw_v, reps, axis=0), np.repeat(self.final_cw, reps, axis=0),
        )


def key_size_bits(in_bits: int, out_bits: int, kappa: int = 128) -> int:
    """Exact key length: root seed, per-level corrections, final correction."""
    return kappa + in_bits * (kappa + 2 + out_bits) + out_bits


def gen_dcf(
    rng: np.random.Generator,
    alpha: np.ndarray,
    beta: np.ndarray,
    in_bits: int,
    out_bits: int,
    sec: SecurityParams | None = None,
):
    """Generate key batches for f(x) = beta * 1{x < alpha}, x in [0, 2^in_bits).

    Returns (keys_party0, keys_party1). alpha and beta are uint64 arrays of
    equal length; beta is interpreted mod 2^out_bits.
    """
    sec = sec or SecurityParams()
    if not (1 <= in_bits <= 64):
        raise ConfigError("in_bits must be in [1, 64]")
    if not (1 <= out_bits <= 64):
        raise ConfigError("out_bits must be in [1, 64]")
    alpha = np.asarray(alpha, np.uint64).reshape(-1)
    beta = np.asarray(beta, np.uint64).reshape(-1)
    if alpha.shape != beta.shape:
        raise ConfigError("alpha/beta length mismatch")
    if in_bits < 64 and np.any(alpha >> np.uint64(in_bits)):
        raise ConfigError("alpha out of domain")
    n = alpha.shape[0]
    sb = sec.seed_bytes
    out_mask = np.uint64((1 << out_bits) - 1) if out_bits < 64 else np.uint64(0xFFFFFFFFFFFFFFFF)
    prg = TreePrg(sec)

    s0 = np.frombuffer(rng.bytes(n * sb), dtype=np.uint8).reshape(n, sb).copy()
    s1 = np.frombuffer(rng.bytes(n * sb), dtype=np.uint8).reshape(n, sb).copy()
    root0, root1 = s0.copy(), s1.copy()
    t0 = np.zeros(n, np.uint8)
    t1 = np.ones(n, np.uint8)
    v_alpha = np.zeros(n, np.uint64)

    cw_seed = np.zeros((n, in_bits, sb), np.uint8)
    cw_tl = np.zeros((n, in_bits), np.uint8)
    cw_tr = np.zeros((n, in_bits), np.uint8)
    cw_v = np.zeros((n, in_bits), np.uint64)

    for lev in range(in_bits):
        s0l, v0l, t0l, s0r, v0r, t0r = prg.expand(s0)
        s1l, v1l, t1l, s1r, v1r, t1r = prg.expand(s1)
        abit = ((alpha >> np.uint64(in_bits - 1 - lev)) & np.uint64(1)).astype(np.uint8)
        keep_r = abit.astype(bool)  # alpha bit 1: keep right, lose left

        lose0 = np.where(keep_r[:, None], s0l, s0r)
        lose1 = np.where(keep_r[:, None], s1l, s1r)
        scw = lose0 ^ lose1
        v_lose0 = np.where(keep_r, v0l, v0r)
        v_lose1 = np.where(keep_r, v1l, v1r)
        vcw = _signed(v_lose1 - v_lose0 - v_alpha, t1)
        # Paths peeling off left of the alpha path evaluate below alpha.
        vcw = np.where(keep_r, vcw + _signed(beta, t1), vcw)
        vcw &= out_mask

        v_keep0 = np.where(keep_r, v0r, v0l)
        v_keep1 = np.where(keep_r, v1r, v1l)
        v_alpha = v_alpha - v_keep1 + v_keep0 + _signed(vcw, t1)

        tcwl = t0l ^ t1l ^ abit ^ np.uint8(1)
        tcwr = t0r ^ t1r ^ abit

        cw_seed[:, lev] = scw
        cw_tl[:, lev] = tcwl
        cw_tr[:, lev] = tcwr
        cw_v[:, lev] = vcw

        keep_s0 = np.where(keep_r[:, None], s0r, s0l)
        keep_s1 = np.where(keep_r[:, None], s1r, s1l)
        keep_t0 = np.where(keep_r, t0r, t0l)
        keep_t1 = np.where(keep_r, t1r, t1l)
        tcw_keep = np.where(keep_r, tcwr, tcwl)
        s0 = keep_s0 ^ (t0[:, None] * scw)
        s1 = keep_s1 ^ (t1[:, None] * scw)
        t0 = keep_t0 ^ (t0 * tcw_keep)
        t1 = keep_t1 ^ (t1 * tcw_keep)

    final_cw = _signed(_convert(s1) - _convert(s0) - v_alpha, t1) & out_mask

    k0 = DcfKeyBatch(0, in_bits, out_bits, sec, root0, cw_seed, cw_tl, cw_tr, cw_v, final_cw)
    k1 = DcfKeyBatch(1, in_bits, out_bits, sec, root1, cw_seed.copy(), cw_tl.copy(),
                     cw_tr.copy(), cw_v.copy(), final_cw.copy())
    return k0, k1


def eval_dcf(keys: DcfKeyBatch, x: np.ndarray) -> np.ndarray:
    """Evaluate each key at its point. Shares sum to beta*1{x<alpha} mod 2^out."""
    x = np.asarray(x, np.uint64).reshape(-1)
    n = len(keys)
    if x.shape[0] != n:
        raise ConfigError("one evaluation point per key required")
    in_bits = keys.in_bits
    out_mask = (
        np.uint64((1 << keys.out_bits) - 1) if keys.out_bits < 64
        else np.uint64(0xFFFFFFFFFFFFFFFF)
    )
    prg = TreePrg(keys.sec)
    party_sign = keys.party == 1

    s = keys.root.copy()
    t = np.full(n, keys.party, np.uint8)
    acc = np.zeros(n, np.uint64)

    for lev in range(in_bits):
        sl, vl, tl, sr, vr, tr = prg.expand(s)
        on = t.astype(bool)
        sl = sl ^ (t[:, None] * keys.cw_seed[:, lev])
        sr = sr ^ (t[:, None] * keys.cw_seed[:, lev])
        tl = tl ^ (t * keys.cw_tl[:, lev])
        tr = tr ^ (t * keys.cw_tr[:, lev])
        xbit = ((x >> np.uint64(in_bits - 1 - lev)) & np.uint64(1)).astype(bool)
        step = np.where(xbit, vr, vl) + np.where(on, keys.cw_v[:, lev], np.uint64(0))
        acc = acc + (np.uint64(0) - step if party_sign else step)
        s = np.where(xbit[:, None], sr, sl)
        t = np.where(xbit, tr, tl)

    tail = _convert(s) + t * keys.final_cw
    acc = acc + (np.uint64(0) - tail if party_sign else tail)
    return acc & out_mask


# ------------------------------------------------------------- serialization
#
# Bit-exact little-endian packing: fields appended at increasing bit offsets,
# each field its own little-endian integer. Total length matches
# key_size_bits() exactly; the byte form pads the final byte with zeros.


def _bits_of(key: DcfKeyBatch, i: int) -> int:
    acc = 0
    pos = 0

    def put(value: int, width: int) -> None:
        nonlocal acc, pos
        acc |= (value & ((1 << width) - 1)) << pos
        pos += width

    kappa = key.sec.kappa
    put(int.from_bytes(key.root[i].tobytes(), "little"), kappa)
    for lev in range(key.in_bits):
        put(int.from_bytes(key.cw_seed[i, lev].tobytes(), "little"), kappa)
        put(int(key.cw_tl[i, lev]), 1)
        put(int(key.cw_tr[i, lev]), 1)
        put(int(key.cw_v[i, lev]), key.out_bits)
    put(int(key.final_cw[i]), key.out_bits)
    assert pos == key_size_bits(key.in_bits, key.out_bits, kappa)
    return acc


def key_to_bytes(key: DcfKeyBatch, i: int = 0) -> bytes:
    """Serialize key i of the batch; length is ceil(key_size_bits / 8)."""
    nbits = key_size_bits(key.in_bits, key.out_bits, key.sec.kappa)
    return _bits_of(key, i).to_bytes((nbits + 7) // 8, "little")


def batch_to_bytes(keys: DcfKeyBatch) -> bytes:
    return b"".join(key_to_bytes(keys, i) for i in range(len(keys)))


def batch_from_bytes(
    buf: bytes, n: int, party: int, in_bits: int, out_bits: int,
    sec: SecurityParams | None = None,
) -> DcfKeyBatch:
    sec = sec or SecurityParams()
    sb = sec.seed_bytes
    kappa = sec.kappa
    nbits = key_size_bits(in_bits, out_bits, kappa)
    per = (nbits + 7) // 8
    if len(buf) != n * per:
        raise ConfigError("key blob length mismatch")
    root = np.zeros((n, sb), np.uint8)
    cw_seed = np.zeros((n, in_bits, sb), np.uint8)
    cw_tl = np.zeros((n, in_bits), np.uint8)
    cw_tr = np.zeros((n, in_bits), np.uint8)
    cw_v = np.zeros((n, in_bits), np.uint64)
    final = np.zeros(n, np.uint64)
    for i in range(n):
        acc = int.from_bytes(buf[i * per : (i + 1) * per], "little")
        pos = 0

        def get(width: int) -> int:
            nonlocal pos
            v = (acc >> pos) & ((1 << width) - 1)
            pos += width
            return v

        root[i] = np.frombuffer(get(kappa).to_bytes(sb, "little"), np.uint8)
        for lev in range(in_bits):
            cw_seed[i, lev] = np.frombuffer(get(kappa).to_bytes(sb, "little"), np.uint8)
            cw_tl[i, lev] = get(1)
            cw_tr[i, lev] = get(1)
            cw_v[i, lev] = get(out_bits)
        final[i] = get(out_bits)
    return DcfKeyBatch(party, in_bits, out_bits, sec, root, cw_seed, cw_tl, cw_tr, cw_v, final)
