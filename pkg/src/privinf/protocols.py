"""Two-party online protocols over additively shared ring values.

Party 0 holds the data, party 1 holds the model; public constants are folded
in by party 1 so shares always sum to the right value. Boolean shares are
uint8 0/1 under XOR. Every operation is batched: array arguments are
flattened, handled in single message bursts, and reshaped on return.

Messages that do not depend on the input (masked weights, masked
coefficients) are metered to the offline phase; a deployment would front-load
them, here they run interleaved for simplicity. Online costs per element:
matmul-with-private-weights sends l bits one way; the quadratic, the sign
test and bit-times-value are each one simultaneous exchange.
"""

from __future__ import annotations

import math

import numpy as np

from .dealer import PartyBundle, poly_triple_count
from .errors import ConfigError
from .fss import eval_dcf
from .ring import Ring, RingParams, pack_bits, unpack_bits
from . import transport as tp


def _flat(x) -> np.ndarray:
    return np.asarray(x, np.uint64).reshape(-1)


def _flat_bits(b) -> np.ndarray:
    return np.asarray(b, np.uint8).reshape(-1)


class ProtocolSession:
    """One party's view of a connected protocol run."""

    def __init__(
        self,
        party: int,
        ring: Ring | RingParams,
        channel: tp.Channel,
        bundle: PartyBundle,
        do_handshake: bool = True,
    ):
        if party not in (0, 1):
            raise ConfigError("party must be 0 or 1")
        self.party = party
        self.ring = ring if isinstance(ring, Ring) else Ring(ring)
        self.ch = channel
        self.bundle = bundle
        if bundle.party != party:
            raise ConfigError(f"bundle belongs to party {bundle.party}, session is party {party}")
        if bundle.ring != self.ring.params:
            raise ConfigError("bundle ring parameters do not match session")
        if do_handshake:
            self.ch.set_phase("setup")
            tp.handshake(
                channel, self.ring.l, self.ring.f, bundle.sec.kappa, bundle.sec.prg_id
            )
        self.ch.set_phase("online")

    # ------------------------------------------------------------- helpers

    def _offline(self) -> None:
        self.ch.set_phase("offline")

    def _online(self) -> None:
        self.ch.set_phase("online")

    def scatter(self, x: np.ndarray | None, shape=None, rng: np.random.Generator | None = None):
        """Party 0 splits its plaintext and ships party 1's share."""
        r = self.ring
        self.ch.set_phase("setup")
        if self.party == 0:
            if rng is None:
                raise ConfigError("party 0 needs an rng to share its input")
            s0, s1 = r.share(np.asarray(x, np.uint64), rng)
            self.ch.send(tp.TAG_GRAPH_SHARES, r.pack(s1))
            out = s0
        else:
            if shape is None:
                raise ConfigError("party 1 needs the public input shape")
            out = r.unpack(self.ch.recv(tp.TAG_GRAPH_SHARES), shape)
        self._online()
        return out

    def reveal_to_client(self, z_share: np.ndarray):
        """Party 1 ships its result share; party 0 reconstructs."""
        r = self.ring
        if self.party == 1:
            self.ch.send(tp.TAG_RESULT_SHARE, r.pack(z_share))
            return None
        other = r.unpack(self.ch.recv(tp.TAG_RESULT_SHARE), np.asarray(z_share).shape)
        return r.add(np.asarray(z_share, np.uint64), other)

    def open(self, share: np.ndarray) -> np.ndarray:
        """Reconstruct a shared ring tensor at both parties."""
        r = self.ring
        share = np.asarray(share, np.uint64)
        other = r.unpack(self.ch.exchange(tp.TAG_CONTROL, r.pack(share)), share.shape)
        return r.add(share, other)

    def open_bits(self, bshare: np.ndarray) -> np.ndarray:
        b = _flat_bits(bshare)
        other = unpack_bits(
            self.ch.exchange(tp.TAG_CONTROL, pack_bits(b), bits=b.size), b.size
        )
        return (b ^ other).reshape(np.asarray(bshare).shape)

    # ------------------------------------------------- linear with weights

    def smatmul(self, x_share: np.ndarray, y: np.ndarray | None = None, out_cols: int | None = None):
        """Shared X (n, k) times party-1-private Y (k, m) -> shares of X @ Y.

        Offline party 1 masks its weights; online party 0 sends its masked
        share (one l-bit element per entry of X, one round, one direction).
        """
        r = self.ring
        x_share = np.asarray(x_share, np.uint64)
        if x_share.ndim != 2:
            raise ConfigError("smatmul expects a 2-d left operand")
        n, k = x_share.shape
        if self.party == 1:
            y = r.reduce(np.asarray(y, np.uint64))
            if y.shape[0] != k:
                raise ConfigError("weight shape mismatch")
            m = y.shape[1]
        else:
            if out_cols is None:
                raise ConfigError("party 0 needs the public output width")
            m = int(out_cols)
        trip = self.bundle.take_matmul(n, k, m)

        self._offline()
        if self.party == 1:
            self.ch.send(tp.TAG_SMATMUL_MASKED_W, r.pack(r.sub(y, trip.own)))
        else:
            w_hat = r.unpack(self.ch.recv(tp.TAG_SMATMUL_MASKED_W), (k, m))
            ay0 = r.add(r.matmul(trip.own, w_hat), trip.c)

        self._online()
        if self.party == 0:
            self.ch.send(tp.TAG_SMATMUL_MASKED_X, r.pack(r.sub(x_share, trip.own)))
            return ay0
        x_hat = r.unpack(self.ch.recv(tp.TAG_SMATMUL_MASKED_X), (n, k))
        return r.add(r.matmul(r.add(x_hat, x_share), y), trip.c)

    def selemul(self, x_share: np.ndarray, y: np.ndarray | None = None):
        """Elementwise product of shared x with party-1-private y."""
        r = self.ring
        shape = np.asarray(x_share).shape
        x = _flat(x_share)
        n = x.size
        own, c = self.bundle.take_elemul(n)
        self._offline()
        if self.party == 1:
            y = r.reduce(_flat(y))
            if y.size != n:
                raise ConfigError("operand size mismatch")
            self.ch.send(tp.TAG_SMATMUL_MASKED_W, r.pack(r.sub(y, own)))
        else:
            y_hat = r.unpack(self.ch.recv(tp.TAG_SMATMUL_MASKED_W))
            ay0 = r.add(r.mul(own, y_hat), c)
        self._online()
        if self.party == 0:
            self.ch.send(tp.TAG_SMATMUL_MASKED_X, r.pack(r.sub(x, own)))
            return ay0.reshape(shape)
        x_hat = r.unpack(self.ch.recv(tp.TAG_SMATMUL_MASKED_X))
        return r.add(r.mul(r.add(x_hat, x), y), c).reshape(shape)

    def sshared_mul(self, a_share: np.ndarray, b_share: np.ndarray):
        """Elementwise product of two shared tensors (standard triple)."""
        r = self.ring
        shape = np.asarray(a_share).shape
        a = _flat(a_share)
        b = _flat(b_share)
        if a.size != b.size:
            raise ConfigError("operand size mismatch")
        ta, tb, tc = self.bundle.take_shared(a.size)
        e_sh = r.sub(a, ta)
        f_sh = r.sub(b, tb)
        msg = r.pack(np.concatenate([e_sh, f_sh]))
        other = r.unpack(self.ch.exchange(tp.TAG_SHAREDMUL_EF, msg))
        e = r.add(e_sh, other[: a.size])
        f = r.add(f_sh, other[a.size :])
        z = r.add(r.add(r.mul(e, tb), r.mul(ta, f)), tc)
        if self.party == 1:
            z = r.add(z, r.mul(e, f))
        return z.reshape(shape)

    # -------------------------------------------------- private polynomials

    def squapol(self, x_share: np.ndarray, coeffs: np.ndarray | None = None):
        """Party-1-private quadratic on a shared value, no truncation inside.

        coeffs rows are (p0, p1, p2) as ring elements, one column per element
        or a single column broadcast. Output is shares of p2 x^2 + p1 x + p0;
        with x at scale f and rows pre-scaled to (3f, 2f, f) the result sits
        at scale 3f.
        """
        r = self.ring
        shape = np.asarray(x_share).shape
        x = _flat(x_share)
        n = x.size
        qt = self.bundle.take_quapol(n)

        self._offline()
        if self.party == 1:
            coeffs = r.reduce(np.asarray(coeffs, np.uint64))
            if coeffs.ndim == 1:
                coeffs = np.broadcast_to(coeffs.reshape(3, 1), (3, n)).copy()
            if coeffs.shape != (3, n):
                raise ConfigError("coefficients must be (3,) or (3, n)")
            p0, p1, p2 = coeffs[0], coeffs[1], coeffs[2]
            b1, b2, b3, b4 = qt.opr
            e = np.stack([r.sub(p1, b1), r.sub(p2, b2), r.sub(p2, b3)])
            self.ch.send(tp.TAG_SQUAPOL_E, r.pack(e))
            f = r.unpack(self.ch.recv(tp.TAG_SQUAPOL_F), (4, n))
            p1a_1 = r.add(qt.c[0], r.mul(f[0], p1))
            p2a_1 = r.add(qt.c[1], r.mul(f[1], p2))
            p2a2_1 = r.add(qt.c[2], r.mul(f[2], p2))
            f4 = f[3]
        else:
            a = qt.mask
            a1, a2, a3, a4 = qt.opr
            e = r.unpack(self.ch.recv(tp.TAG_SQUAPOL_E), (3, n))
            p1a_0 = r.add(qt.c[0], r.mul(a1, e[0]))
            p2a_0 = r.add(qt.c[1], r.mul(a2, e[1]))
            p2a2_0 = r.add(qt.c[2], r.mul(a3, e[2]))
            f = np.stack([
                r.sub(a, a1), r.sub(a, a2), r.sub(r.mul(a, a), a3), r.sub(p2a_0, a4),
            ])
            self.ch.send(tp.TAG_SQUAPOL_F, r.pack(f))

        self._online()
        two = r.scalar(2)
        if self.party == 0:
            f5 = r.sub(x, a)
            e4 = r.unpack(self.ch.exchange(
                tp.TAG_SQUAPOL_F, r.pack(f5), recv_tag=tp.TAG_SQUAPOL_E
            ))
            u = r.add(e4, f5)  # masked reconstruction of x - a
            z = r.add(p2a2_0, r.add(r.mul(two, r.add(r.mul(a4, u), qt.c[3])), p1a_0))
        else:
            e4 = r.sub(x, qt.opr[3])
            f5 = r.unpack(self.ch.exchange(
                tp.TAG_SQUAPOL_E, r.pack(e4), recv_tag=tp.TAG_SQUAPOL_F
            ))
            xh = r.add(f5, x)
            z = r.add(r.mul(p2, r.mul(xh, xh)), p2a2_1)
            z = r.add(z, r.mul(two, r.add(r.mul(xh, r.add(f4, p2a_1)), qt.c[3])))
            z = r.add(z, r.add(r.mul(p1, xh), p1a_1))
            z = r.add(z, p0)
        return z.reshape(shape)

    def spolyd(self, x_share: np.ndarray, degree: int, coeffs: np.ndarray | None = None):
        """Party-1-private degree-d polynomial, one online round.

        Uses a combined mask r = a + b with dealer shares of its powers; the
        offline leg turns each coefficient-times-power product into shares of
        the shifted coefficients W_j = sum_{i>=j} C(i,j) p_i r^(i-j), and the
        online leg opens x - r once. d(d+1)/2 triples against four for the
        dedicated quadratic at d = 2, at the price of power-of-r material.
        """
        r = self.ring
        if degree < 1:
            raise ConfigError("degree must be at least 1")
        shape = np.asarray(x_share).shape
        x = _flat(x_share)
        n = x.size
        d = int(degree)
        t_total = poly_triple_count(d)
        pt = self.bundle.take_poly(n, d)
        # triple index for the (i, m) product, i = coefficient, m = power
        pairs = [(i, m) for i in range(1, d + 1) for m in range(1, i + 1)]

        self._offline()
        if self.party == 1:
            coeffs = r.reduce(np.asarray(coeffs, np.uint64))
            if coeffs.ndim == 1:
                coeffs = np.broadcast_to(coeffs.reshape(d + 1, 1), (d + 1, n)).copy()
            if coeffs.shape != (d + 1, n):
                raise ConfigError("coefficients must be (d+1,) or (d+1, n)")
            e = np.stack([r.sub(coeffs[i], pt.opr[t]) for t, (i, _) in enumerate(pairs)])
            self.ch.send(tp.TAG_POLY_E, r.pack(e))
            f = r.unpack(self.ch.recv(tp.TAG_POLY_F), (t_total, n))
            prod = {pairs[t]: r.add(pt.c[t], r.mul(f[t], coeffs[pairs[t][0]]))
                    for t in range(t_total)}
        else:
            e = r.unpack(self.ch.recv(tp.TAG_POLY_E), (t_total, n))
            f = np.stack([r.sub(pt.rpow[m - 1], pt.opr[t]) for t, (_, m) in enumerate(pairs)])
            self.ch.send(tp.TAG_POLY_F, r.pack(f))
            prod = {pairs[t]: r.add(pt.c[t], r.mul(e[t], pt.opr[t])) for t in range(t_total)}

        w = np.zeros((d + 1, n), np.uint64)
        for j in range(d + 1):
            acc = np.zeros(n, np.uint64)
            for i in range(j, d + 1):
                cij = r.scalar(math.comb(i, j))
                if i == j:
                    term = coeffs[i] if self.party == 1 else np.zeros(n, np.uint64)
                else:
                    term = prod[(i, i - j)]
                    if self.party == 1:
                        term = r.add(term, r.mul(coeffs[i], pt.rpow[i - j - 1]))
                acc = r.add(acc, r.mul(cij, term))
            w[j] = acc

        self._online()
        msg = r.sub(x, pt.mask)
        other = r.unpack(self.ch.exchange(tp.TAG_POLY_FHAT, r.pack(msg)))
        fhat = r.add(msg, other)
        z = w[0].copy()
        fp = fhat
        for j in range(1, d + 1):
            z = r.add(z, r.mul(fp, w[j]))
            if j < d:
                fp = r.mul(fp, fhat)
        return z.reshape(shape)

    # ------------------------------------------------------ sign and select

    def sdrelu(self, x_share: np.ndarray, unblind: bool = True):
        """Boolean shares of 1{x >= 0}. One exchange of masked shares.

        The dealer's correction bit folds in its blinding constant c; with
        unblind the party-1 share is flipped back so callers see the plain
        sign bit. Evaluation keys answer the carry out of the low l-1 bits.
        """
        r = self.ring
        shape = np.asarray(x_share).shape
        x = _flat(x_share)
        n = x.size
        dt = self.bundle.take_drelu(n)
        msg = r.add(x, dt.mask)
        other = r.unpack(self.ch.exchange(tp.TAG_DRELU_F, r.pack(msg)))
        xhat = r.add(msg, other)
        low = xhat & np.uint64(r.half - 1)
        point = np.uint64(r.half - 1) - low
        carry = eval_dcf_bits(dt.keys, point)
        z = dt.rbit ^ carry
        if self.party == 1:
            z = z ^ r.msb(xhat)
            if unblind and self.bundle.drelu_c:
                z = z ^ np.uint8(1)
        return z.reshape(shape)

    def sbitxa(self, b_share: np.ndarray, x_share: np.ndarray):
        """Shares of bit * value from boolean b and arithmetic x.

        Opens b xor beta and x - m in one exchange (l + 1 logical bits per
        party), then both sides assemble their share locally.
        """
        r = self.ring
        shape = np.asarray(x_share).shape
        b = _flat_bits(b_share)
        x = _flat(x_share)
        n = x.size
        if b.size != n:
            raise ConfigError("bit/value size mismatch")
        bt = self.bundle.take_bitxa(n)
        d_sh = b ^ bt.bbit
        e_sh = r.sub(x, bt.m)
        head = pack_bits(d_sh)
        msg = head + r.pack(e_sh)
        other = self.ch.exchange(tp.TAG_BITXA_DE, msg, bits=n * (r.l + 1))
        d_other = unpack_bits(other[: len(head)], n)
        e_other = r.unpack(other[len(head) :])
        delta = (d_sh ^ d_other).astype(np.uint64)
        eps = r.add(e_sh, e_other)
        sign = r.reduce(np.uint64(1) - np.uint64(2) * delta)  # 1 - 2*delta
        z = r.add(r.mul(delta, bt.m), r.mul(sign, r.add(r.mul(eps, bt.beta), bt.bm)))
        if self.party == 1:
            z = r.add(z, r.mul(delta, eps))
        return z.reshape(shape)

    def secrelu(self, x_share: np.ndarray):
        """ReLU: sign test then bit-times-value, two rounds."""
        bits = self.sdrelu(x_share)
        return self.sbitxa(bits, x_share)

    def spiepol(
        self,
        x_share: np.ndarray,
        boundaries: np.ndarray,
        coeffs: np.ndarray | None = None,
    ):
        """Piecewise quadratic with party-1-private coefficients.

        boundaries are public ring-encoded knots e_1 < ... < e_{k-1} defining
        pieces (-inf, e_1), [e_1, e_2), ..., [e_{k-1}, inf). coeffs is
        (3, k) on party 1, rows (p0, p1, p2) per piece, pre-scaled as for the
        quadratic. Selector i tests x < e_i as the sign of (e_i - 1) - x, so
        a value exactly on a knot lands in the right-hand piece. Four online
        exchanges: selectors, quadratics, first multiply layer, second.
        """
        r = self.ring
        shape = np.asarray(x_share).shape
        x = _flat(x_share)
        n = x.size
        bnd = r.reduce(np.asarray(boundaries, np.uint64).reshape(-1))
        k = bnd.size + 1
        if k < 2:
            raise ConfigError("need at least one boundary")

        # interval selectors c_i = 1{x < e_i}, boolean-shared
        off = r.sub(bnd, r.scalar(1))
        if self.party == 1:
            sel_in = r.sub(off[:, None], np.broadcast_to(x, (k - 1, n)))
        else:
            sel_in = r.neg(np.broadcast_to(x, (k - 1, n)))
        c = self.sdrelu(sel_in)  # (k-1, n)

        # per-piece quadratics on tiled x
        x_rep = np.tile(x, k)
        if self.party == 1:
            coeffs = r.reduce(np.asarray(coeffs, np.uint64))
            if coeffs.shape != (3, k):
                raise ConfigError("coefficients must be (3, pieces)")
            fpieces = self.squapol(x_rep, np.repeat(coeffs, n, axis=1))
        else:
            fpieces = self.squapol(x_rep)
        fpieces = fpieces.reshape(k, n)

        flip = np.uint8(self.party)  # boolean NOT applied by party 1
        # first multiply layer: piece 0, inner products, piece k-1
        bits1 = np.concatenate([c.reshape(-1), c[k - 2] ^ flip])
        vals1 = np.concatenate([fpieces[: k - 1].reshape(-1), fpieces[k - 1]])
        r1 = self.sbitxa(bits1, vals1).reshape(k, n)
        z = r.add(r1[0], r1[k - 1])
        if k > 2:
            # second layer gates inner pieces by not-c_{i-1}
            bits2 = (c[: k - 2] ^ flip).reshape(-1)
            r2 = self.sbitxa(bits2, r1[1 : k - 1].reshape(-1)).reshape(k - 2, n)
            z = r.add(z, r2.sum(axis=0, dtype=np.uint64) & r.mask)
        return z.reshape(shape)


def eval_dcf_bits(keys, point: np.ndarray) -> np.ndarray:
    """Single-bit comparison evaluation as uint8."""
    return eval_dcf(keys, point).astype(np.uint8)
