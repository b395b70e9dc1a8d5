"""Secure neural-network layers over the protocol suite.

Layers are written once against a small engine interface and run in three
modes: SecureEngine drives a live two-party session, PlainEngine computes the
identical fixed-point arithmetic in the clear (the reference oracle: same
ring, same truncation points, round-to-nearest at each truncation),
PlanEngine executes the same dataflow on zeros while counting the dealer
correlations and checking the overflow budget. Because all three run the
same layer code, the secure path and its oracle cannot drift apart, and a
plan always matches what the secure run will consume.

Values move as TensorShares: a shaped uint64 payload (a share, or the plain
ring value on the reference engine) plus the current fixed-point scale.
Boolean tensors (comparison outputs) travel as bare uint8 arrays since they
carry no scale.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace

import numpy as np

from .dealer import Plan
from .errors import ConfigError
from .protocols import ProtocolSession
from .ring import Ring

__all__ = [
    "TensorShares", "PlainEngine", "PlanEngine", "SecureEngine",
    "PiecewisePoly", "fit_spline", "encode_piecewise", "spline_eval",
    "sigmoid_spline", "tanh_spline",
    "sec_fc", "sec_conv", "sec_relu", "sec_maxpool", "sec_sig", "sec_tanh",
    "im2col", "ts_concat",
]


@dataclass
class TensorShares:
    """One party's view of a shared tensor: payload, shape, scale."""

    data: np.ndarray  # uint64
    scale: int
    bound: float | None = None  # plan-time magnitude bound, real domain

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def reshape(self, *shape) -> "TensorShares":
        return replace(self, data=self.data.reshape(*shape))


def ts_concat(parts: list, axis: int = 0) -> TensorShares:
    scales = {p.scale for p in parts}
    if len(scales) != 1:
        raise ConfigError(f"cannot concatenate mixed scales {scales}")
    bounds = [p.bound for p in parts]
    bound = None if any(b is None for b in bounds) else max(bounds)
    return TensorShares(np.concatenate([p.data for p in parts], axis=axis), parts[0].scale, bound)


class _EngineBase:
    """Shared arithmetic plumbing; subclasses supply the protocol-backed ops."""

    is_plan = False

    def __init__(self, ring: Ring):
        self.ring = ring

    # --------------------------------------------------- local share algebra

    def add(self, a: TensorShares, b: TensorShares) -> TensorShares:
        self._same_scale(a, b)
        return TensorShares(self.ring.add(a.data, b.data), a.scale, _badd(a.bound, b.bound))

    def sub(self, a: TensorShares, b: TensorShares) -> TensorShares:
        self._same_scale(a, b)
        return TensorShares(self.ring.sub(a.data, b.data), a.scale, _badd(a.bound, b.bound))

    def neg(self, x: TensorShares) -> TensorShares:
        return TensorShares(self.ring.neg(x.data), x.scale, x.bound)

    def sum_axis(self, x: TensorShares, axis: int) -> TensorShares:
        n = x.shape[axis] if x.shape[axis] else 1
        data = self.ring.reduce(x.data.sum(axis=axis, dtype=np.uint64))
        return self._out(data, x.scale, None if x.bound is None else x.bound * n)

    def _same_scale(self, a: TensorShares, b: TensorShares) -> None:
        if a.scale != b.scale:
            raise ConfigError(f"scale mismatch: {a.scale} vs {b.scale}")

    def _out(self, data, scale, bound=None) -> TensorShares:
        if bound is not None and bound * float(1 << scale) >= float(self.ring.half):
            raise ConfigError(
                f"overflow budget exceeded: bound {bound:.3g} at scale {scale} "
                f"needs {np.log2(max(bound, 1e-300)) + scale + 1:.1f} bits, ring has {self.ring.l}"
            )
        return TensorShares(data, scale, bound)


def _badd(a, b):
    return None if a is None or b is None else a + b


class PlainEngine(_EngineBase):
    """Fixed-point reference: identical dataflow on reconstructed values.

    Truncation is round-to-nearest, the deterministic center of the secure
    path's probabilistic truncation, so reference and secure runs stay within
    the per-truncation unit everywhere.
    """

    party = None

    def matmul_private(self, x: TensorShares, w, out_cols: int) -> TensorShares:
        w = self.ring.reduce(np.asarray(w, np.uint64))
        return self._out(self.ring.matmul(x.data, w), x.scale + self.ring.f)

    def add_public(self, x: TensorShares, const) -> TensorShares:
        return TensorShares(self.ring.add(x.data, np.asarray(const, np.uint64)), x.scale, x.bound)

    def trunc(self, x: TensorShares, nbits: int | None = None) -> TensorShares:
        nbits = self.ring.f if nbits is None else nbits
        return TensorShares(self.ring.trunc_plain_round(x.data, nbits), x.scale - nbits, x.bound)

    def mul_shared(self, a: TensorShares, b: TensorShares) -> TensorShares:
        return self._out(self.ring.mul(a.data, b.data), a.scale + b.scale)

    def drelu(self, x: TensorShares) -> np.ndarray:
        return np.uint8(1) ^ self.ring.msb(x.data)

    def bitxa(self, bits: np.ndarray, x: TensorShares) -> TensorShares:
        return TensorShares(self.ring.mul(bits.astype(np.uint64), x.data), x.scale, x.bound)

    def relu(self, x: TensorShares) -> TensorShares:
        return self.bitxa(self.drelu(x), x)

    def quadratic_private(self, x: TensorShares, coeffs) -> TensorShares:
        c = _norm_coeffs(self.ring, coeffs, 3, x.size)
        x2 = self.ring.mul(x.data.reshape(-1), x.data.reshape(-1))
        z = self.ring.add(
            self.ring.add(self.ring.mul(c[2], x2), self.ring.mul(c[1], x.data.reshape(-1))),
            c[0],
        )
        return self._out(z.reshape(x.shape), x.scale + 2 * self.ring.f)

    def piecewise_private(self, x: TensorShares, boundaries, coeffs) -> TensorShares:
        r = self.ring
        flat = x.data.reshape(-1)
        n = flat.size
        bnd = r.reduce(np.asarray(boundaries, np.uint64).reshape(-1))
        k = bnd.size + 1
        coeffs = r.reduce(np.asarray(coeffs, np.uint64))
        if coeffs.shape != (3, k):
            raise ConfigError("coefficients must be (3, pieces)")
        # same bit algebra as the protocol: c_i = 1{x < e_i} via the sign of
        # (e_i - 1) - x, gates multiply exactly
        sel = np.uint8(1) ^ r.msb(r.sub(r.sub(bnd[:, None], r.scalar(1)), flat[None, :]))
        gates = np.zeros((k, n), np.uint64)
        gates[0] = sel[0]
        for j in range(1, k - 1):
            gates[j] = (1 - sel[j - 1]) * sel[j]
        gates[k - 1] = np.uint64(1) - sel[k - 2]
        x2 = r.mul(flat, flat)
        vals = r.add(
            r.add(r.mul(coeffs[2][:, None], x2[None, :]), r.mul(coeffs[1][:, None], flat[None, :])),
            coeffs[0][:, None],
        )
        z = r.reduce(r.mul(gates, vals).sum(axis=0, dtype=np.uint64))
        return self._out(z.reshape(x.shape), x.scale + 2 * self.ring.f)


class SecureEngine(_EngineBase):
    """Engine view of one party's live protocol session."""

    def __init__(self, session: ProtocolSession):
        super().__init__(session.ring)
        self.session = session
        self.party = session.party

    def matmul_private(self, x: TensorShares, w, out_cols: int) -> TensorShares:
        if self.party == 1:
            data = self.session.smatmul(x.data, y=w)
        else:
            data = self.session.smatmul(x.data, out_cols=out_cols)
        return self._out(data, x.scale + self.ring.f)

    def add_public(self, x: TensorShares, const) -> TensorShares:
        if self.party == 1:
            return TensorShares(
                self.ring.add(x.data, np.asarray(const, np.uint64)), x.scale, x.bound
            )
        return x

    def trunc(self, x: TensorShares, nbits: int | None = None) -> TensorShares:
        nbits = self.ring.f if nbits is None else nbits
        return TensorShares(
            self.ring.trunc_share(x.data, self.party, nbits), x.scale - nbits, x.bound
        )

    def mul_shared(self, a: TensorShares, b: TensorShares) -> TensorShares:
        return self._out(self.session.sshared_mul(a.data, b.data), a.scale + b.scale)

    def drelu(self, x: TensorShares) -> np.ndarray:
        return self.session.sdrelu(x.data)

    def bitxa(self, bits: np.ndarray, x: TensorShares) -> TensorShares:
        return TensorShares(self.session.sbitxa(bits, x.data), x.scale, x.bound)

    def relu(self, x: TensorShares) -> TensorShares:
        return TensorShares(self.session.secrelu(x.data), x.scale, x.bound)

    def quadratic_private(self, x: TensorShares, coeffs) -> TensorShares:
        c = coeffs if self.party == 1 else None
        return self._out(self.session.squapol(x.data, c), x.scale + 2 * self.ring.f)

    def piecewise_private(self, x: TensorShares, boundaries, coeffs) -> TensorShares:
        c = coeffs if self.party == 1 else None
        return self._out(
            self.session.spiepol(x.data, boundaries, c), x.scale + 2 * self.ring.f
        )


class PlanEngine(_EngineBase):
    """Counts dealer correlations and checks overflow budgets on a dry run."""

    party = None
    is_plan = True

    def __init__(self, ring: Ring, plan: Plan | None = None):
        super().__init__(ring)
        self.plan = plan if plan is not None else Plan()

    def matmul_private(self, x: TensorShares, w, out_cols: int) -> TensorShares:
        n, k = x.shape
        self.plan.add_smatmul(n, k, out_cols)
        bound = None
        if x.bound is not None and w is not None:
            cols = np.abs(self.ring.decode(np.asarray(w, np.uint64))).sum(axis=0)
            bound = x.bound * float(cols.max(initial=0.0))
        return self._out(np.zeros((n, out_cols), np.uint64), x.scale + self.ring.f, bound)

    def add_public(self, x: TensorShares, const) -> TensorShares:
        if x.bound is None:
            return x
        extra = float(np.max(np.abs(self.ring.decode(np.asarray(const, np.uint64), x.scale))))
        return self._out(x.data, x.scale, x.bound + extra)

    def trunc(self, x: TensorShares, nbits: int | None = None) -> TensorShares:
        nbits = self.ring.f if nbits is None else nbits
        return TensorShares(x.data, x.scale - nbits, x.bound)

    def mul_shared(self, a: TensorShares, b: TensorShares) -> TensorShares:
        self.plan.add_shared_mul(a.size)
        bound = None if a.bound is None or b.bound is None else a.bound * b.bound
        return self._out(np.zeros(a.shape, np.uint64), a.scale + b.scale, bound)

    def drelu(self, x: TensorShares) -> np.ndarray:
        self.plan.add_sdrelu(x.size)
        return np.zeros(x.shape, np.uint8)

    def bitxa(self, bits: np.ndarray, x: TensorShares) -> TensorShares:
        self.plan.add_sbitxa(x.size)
        return TensorShares(x.data, x.scale, x.bound)

    def relu(self, x: TensorShares) -> TensorShares:
        self.plan.add_secrelu(x.size)
        return x

    def quadratic_private(self, x: TensorShares, coeffs) -> TensorShares:
        self.plan.add_squapol(x.size)
        bound = None
        if x.bound is not None and coeffs is not None:
            c = np.abs(self.ring.decode(np.asarray(coeffs, np.uint64)[:, None].reshape(3, -1)))
            p0 = c[0].max(initial=0.0) / float(1 << (2 * self.ring.f))
            p1 = c[1].max(initial=0.0) / float(1 << self.ring.f)
            p2 = c[2].max(initial=0.0)
            bound = p2 * x.bound * x.bound + p1 * x.bound + p0
        return self._out(np.zeros(x.shape, np.uint64), x.scale + 2 * self.ring.f, bound)

    def piecewise_private(self, x: TensorShares, boundaries, coeffs) -> TensorShares:
        k = np.asarray(boundaries).reshape(-1).size + 1
        self.plan.add_spiepol(x.size, k)
        # selected interior pieces are bounded by the fit target; discarded
        # pieces are zeroed exactly by the bit product, so wraps there are moot
        return self._out(np.zeros(x.shape, np.uint64), x.scale + 2 * self.ring.f, None)


def _norm_coeffs(ring: Ring, coeffs, rows: int, n: int) -> np.ndarray:
    c = ring.reduce(np.asarray(coeffs, np.uint64))
    if c.ndim == 1:
        c = np.broadcast_to(c.reshape(rows, 1), (rows, n))
    if c.shape != (rows, n):
        raise ConfigError(f"coefficients must be ({rows},) or ({rows}, n)")
    return c


# ---------------------------------------------------------------- the layers


def sec_fc(eng, x: TensorShares, w, b, out_cols: int) -> TensorShares:
    """Fully connected layer: shared input, server-plaintext weights.

    w is ring-encoded at scale f, b at scale x.scale + f (added before the
    truncation, by the weight holder only); output returns to x.scale.
    """
    y = eng.matmul_private(x, w, out_cols)
    if b is not None:
        y = eng.add_public(y, b)
    return eng.trunc(y, eng.ring.f)


def im2col(data: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """(C, H, W) -> (out_h*out_w, C*kh*kw) patch matrix. Zero padding is
    share-safe: zero is a valid share of zero on both sides."""
    c, h, w = data.shape
    if pad:
        data = np.pad(data, ((0, 0), (pad, pad), (pad, pad)))
        h, w = h + 2 * pad, w + 2 * pad
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ConfigError("kernel larger than padded input")
    cols = np.zeros((oh * ow, c * kh * kw), data.dtype)
    idx = 0
    for di in range(kh):
        for dj in range(kw):
            patch = data[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride]
            cols[:, idx : idx + c] = patch.reshape(c, oh * ow).T
            idx += c
    return cols


def sec_conv(
    eng, x: TensorShares, filt, bias, out_channels: int,
    kh: int, kw: int, stride: int = 1, pad: int = 0,
) -> TensorShares:
    """2-d convolution by im2col lowering to one matrix product.

    x is (C, H, W); filt is the ring-encoded (C*kh*kw, out_channels) filter
    matrix (reshaped from (out_channels, C, kh, kw) by filter_matrix); bias
    is per-output-channel at scale x.scale + f, or None.
    """
    c, h, w = x.shape
    ph, pw = h + 2 * pad, w + 2 * pad
    oh = (ph - kh) // stride + 1
    ow = (pw - kw) // stride + 1
    cols = replace(x, data=im2col(x.data, kh, kw, stride, pad))
    y = sec_fc(eng, cols, filt, bias, out_channels)  # (oh*ow, oc)
    return replace(y, data=y.data.T.reshape(out_channels, oh, ow))


def filter_matrix(filters: np.ndarray) -> np.ndarray:
    """(OC, C, kh, kw) filter bank -> (C*kh*kw, OC) matrix matching im2col."""
    oc, c, kh, kw = filters.shape
    # im2col orders columns as (di, dj, channel)
    return filters.transpose(2, 3, 1, 0).reshape(kh * kw * c, oc)


def sec_relu(eng, x: TensorShares) -> TensorShares:
    return eng.relu(x)


def sec_maxpool(eng, x: TensorShares, window: int, stride: int | None = None) -> TensorShares:
    """Max pooling as a balanced tournament of window^2 - 1 relu-based maxes."""
    stride = window if stride is None else stride
    c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ConfigError("pool window larger than input")
    lanes = []
    for di in range(window):
        for dj in range(window):
            patch = x.data[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride]
            lanes.append(patch.reshape(-1))
    cur = [replace(x, data=lane) for lane in lanes]
    while len(cur) > 1:
        nxt = []
        half = len(cur) // 2
        a = ts_concat(cur[:half])
        b = ts_concat(cur[half : 2 * half])
        d = eng.sub(a, b)
        m = eng.add(eng.relu(d), b)  # max(a, b) = relu(a - b) + b
        size = cur[0].size
        for i in range(half):
            nxt.append(replace(m, data=m.data[i * size : (i + 1) * size]))
        if len(cur) % 2:
            nxt.append(cur[-1])
        cur = nxt
    out = cur[0]
    return replace(out, data=out.data.reshape(c, oh, ow))


# ------------------------------------------------------------ spline fitting


@dataclass(frozen=True)
class PiecewisePoly:
    """Quadratic spline with constant tails for activation approximation."""

    target: str
    knots: np.ndarray  # (k-1,) ascending
    coeffs: np.ndarray  # (k, 3): (p0, p1, p2) per piece
    max_err: float  # max abs error over the knot span at fit time

    @property
    def pieces(self) -> int:
        return self.knots.size + 1


_TARGETS = {
    "sigmoid": (lambda x: 1.0 / (1.0 + np.exp(-x)), (0.0, 1.0)),
    "tanh": (np.tanh, (-1.0, 1.0)),
}


def fit_spline(target, pieces: int = 12, span: tuple = (-6.0, 6.0), grid: int = 257, limits=None):
    """Least-squares quadratic spline with uniform knots and constant tails.

    target is "sigmoid", "tanh", or a callable (then limits must be given).
    The k-1 knots cover [lo, hi] inclusive; the two outermost pieces are the
    constant saturation limits. Fit error is recorded over the knot span.
    """
    if pieces < 4:
        raise ConfigError("need at least 4 pieces (two tails, two interior)")
    lo, hi = float(span[0]), float(span[1])
    if not lo < hi:
        raise ConfigError("empty span")
    if isinstance(target, str):
        if target not in _TARGETS:
            raise ConfigError(f"unknown target {target!r}")
        fn, limits = _TARGETS[target]
        name = target
    else:
        fn = target
        name = "custom"
        if limits is None:
            raise ConfigError("custom targets need explicit saturation limits")
    knots = np.linspace(lo, hi, pieces - 1)
    coeffs = np.zeros((pieces, 3))
    coeffs[0, 0] = limits[0]
    coeffs[-1, 0] = limits[1]
    for j in range(1, pieces - 1):
        xs = np.linspace(knots[j - 1], knots[j], grid)
        coeffs[j] = np.polynomial.polynomial.polyfit(xs, fn(xs), 2)
    pp = PiecewisePoly(name, knots, coeffs, 0.0)
    xs = np.linspace(lo, hi, 10001)
    err = float(np.max(np.abs(spline_eval(pp, xs) - fn(xs))))
    return PiecewisePoly(name, knots, coeffs, err)


def spline_eval(pp: PiecewisePoly, x: np.ndarray) -> np.ndarray:
    """Float-domain spline evaluation (knot belongs to the right piece)."""
    x = np.asarray(x, np.float64)
    idx = np.searchsorted(pp.knots, x, side="right")
    c = pp.coeffs[idx]
    return c[..., 0] + x * (c[..., 1] + x * c[..., 2])


def encode_piecewise(ring: Ring, pp: PiecewisePoly):
    """Ring encoding: knots at scale f; rows (p0, p1, p2) at (3f, 2f, f)."""
    f = ring.f
    bnd = ring.encode(pp.knots)
    coeffs = np.stack([
        ring.encode(pp.coeffs[:, 0], 3 * f),
        ring.encode(pp.coeffs[:, 1], 2 * f),
        ring.encode(pp.coeffs[:, 2], f),
    ])
    return bnd, coeffs


@functools.lru_cache(maxsize=None)
def sigmoid_spline(pieces: int = 12, lo: float = -6.0, hi: float = 6.0) -> PiecewisePoly:
    return fit_spline("sigmoid", pieces, (lo, hi))


@functools.lru_cache(maxsize=None)
def tanh_spline(pieces: int = 12, lo: float = -3.5, hi: float = 3.5) -> PiecewisePoly:
    # a +-6 span cannot meet the 0.01 budget with 12 quadratic pieces
    # (best-case interior error ~ max|f'''| h^3 / 192 = 0.018); 3.5 keeps the
    # interior fit tight and the tail saturation error is 0.0018
    return fit_spline("tanh", pieces, (lo, hi))


def sec_sig(eng, x: TensorShares, pp: PiecewisePoly | None = None) -> TensorShares:
    """Sigmoid by secure piecewise quadratic, output back at the input scale."""
    pp = pp or sigmoid_spline()
    bnd, coeffs = encode_piecewise(eng.ring, pp)
    y = eng.piecewise_private(x, bnd, coeffs)
    y = eng.trunc(y, 2 * eng.ring.f)
    y.bound = 1.0 + pp.max_err  # saturating output, useful downstream
    return y


def sec_tanh(eng, x: TensorShares, pp: PiecewisePoly | None = None) -> TensorShares:
    pp = pp or tanh_spline()
    bnd, coeffs = encode_piecewise(eng.ring, pp)
    y = eng.piecewise_private(x, bnd, coeffs)
    y = eng.trunc(y, 2 * eng.ring.f)
    y.bound = 1.0 + pp.max_err
    return y
