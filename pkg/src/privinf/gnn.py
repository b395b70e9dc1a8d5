"""Secure message-passing network inference over shared graphs.

The client holds a graph (adjacency, scalar edge attributes, node features),
the server holds MPNN weights. Everything graph-shaped is secret-shared,
adjacency included, so the server learns only the public dimensions (n, m).
Inference alternates a message phase (per-pair message net, aggregation by a
shared multiply with the adjacency) and a gated update, then a two-path
readout pools a graph-level vector.

The same wiring function drives all modes: the plan engine (correlation
counts), the plaintext fixed-point reference, and the live two-party run.
A float-domain evaluation with exact activations serves as the outer oracle.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .dealer import Plan, PartyBundle
from .errors import BundleIntegrityError, ConfigError
from .layers import (
    PlainEngine, PlanEngine, SecureEngine, TensorShares,
    sec_fc, sec_sig, sec_tanh, ts_concat,
)
from .protocols import ProtocolSession
from .ring import Ring, RingParams
from . import transport as tp

SHARE_MAGIC = b"PGSF"
SHARE_VERSION = 1


# ------------------------------------------------------------------- types


@dataclass
class GraphData:
    """Plaintext graph: adjacency (0/1, zero diagonal), scalar edge
    attributes per ordered pair, real node features."""

    adj: np.ndarray  # (n, n)
    edges: np.ndarray  # (n, n)
    feats: np.ndarray  # (n, m)

    def __post_init__(self) -> None:
        self.adj = np.asarray(self.adj, np.float64)
        self.edges = np.asarray(self.edges, np.float64)
        self.feats = np.asarray(self.feats, np.float64)
        n = self.adj.shape[0]
        if self.adj.shape != (n, n) or self.edges.shape != (n, n):
            raise ConfigError("adjacency and edge tensors must be n x n")
        if self.feats.ndim != 2 or self.feats.shape[0] != n:
            raise ConfigError("features must be n x m")
        if not np.all((self.adj == 0) | (self.adj == 1)):
            raise ConfigError("adjacency entries must be 0/1")
        if np.any(np.diag(self.adj) != 0):
            raise ConfigError("adjacency diagonal must be zero")

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    @property
    def m(self) -> int:
        return self.feats.shape[1]


@dataclass(frozen=True)
class MpnnConfig:
    """Public architecture: dimensions, step count T, block repetition."""

    feat_dim: int
    msg_dim: int = 8
    readout_dim: int = 4
    steps: int = 3
    reps: int = 1
    sig_pieces: int = 12
    tanh_pieces: int = 12

    def __post_init__(self) -> None:
        if min(self.feat_dim, self.msg_dim, self.readout_dim) < 1:
            raise ConfigError("dimensions must be positive")
        if self.steps < 1 or self.reps < 1:
            raise ConfigError("steps and reps must be at least 1")

    def msg_dims(self) -> list:
        return [self.feat_dim + 1] + [self.msg_dim] * (self.reps + 1)

    def readout_r_dims(self) -> list:
        return [2 * self.feat_dim] + [self.readout_dim] * (self.reps + 1)

    def readout_z_dims(self) -> list:
        return [self.feat_dim] + [self.readout_dim] * (self.reps + 1)


@dataclass
class MpnnWeights:
    """Server-held float weights; ring encoding happens per session.

    msg / readout_r / readout_z are lists of (W, b) with a relu after each
    layer but the last; gates_m / gates_h are per-gate single relu branches,
    order (carry, blend, candidate).
    """

    config: MpnnConfig
    msg: list = field(default_factory=list)
    gates_m: list = field(default_factory=list)
    gates_h: list = field(default_factory=list)
    readout_r: list = field(default_factory=list)
    readout_z: list = field(default_factory=list)

    @staticmethod
    def zeros(config: MpnnConfig) -> "MpnnWeights":
        def stack(dims):
            return [(np.zeros((dims[i], dims[i + 1])), np.zeros(dims[i + 1]))
                    for i in range(len(dims) - 1)]

        m, dm = config.feat_dim, config.msg_dim
        return MpnnWeights(
            config,
            msg=stack(config.msg_dims()),
            gates_m=[(np.zeros((dm, m)), np.zeros(m)) for _ in range(3)],
            gates_h=[(np.zeros((m, m)), np.zeros(m)) for _ in range(3)],
            readout_r=stack(config.readout_r_dims()),
            readout_z=stack(config.readout_z_dims()),
        )


def random_weights(config: MpnnConfig, rng: np.random.Generator, gain: float = 1.0) -> MpnnWeights:
    """Small random weights that keep toy-scale activations inside the ring."""

    def layer(din, dout):
        w = rng.uniform(-1.0, 1.0, (din, dout)) * gain / np.sqrt(din)
        b = rng.uniform(-0.1, 0.1, dout) * gain
        return w, b

    def stack(dims):
        return [layer(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    m, dm = config.feat_dim, config.msg_dim
    return MpnnWeights(
        config,
        msg=stack(config.msg_dims()),
        gates_m=[layer(dm, m) for _ in range(3)],
        gates_h=[layer(m, m) for _ in range(3)],
        readout_r=stack(config.readout_r_dims()),
        readout_z=stack(config.readout_z_dims()),
    )


@dataclass
class RingWeights:
    """Ring-encoded weights: W at scale f, biases at scale 2f (pre-trunc)."""

    msg: list
    gates_m: list
    gates_h: list
    readout_r: list
    readout_z: list


def encode_weights(ring: Ring, w: MpnnWeights) -> RingWeights:
    def enc(pairs):
        return [(ring.encode(wi), ring.encode(bi, 2 * ring.f), wi.shape[1]) for wi, bi in pairs]

    return RingWeights(enc(w.msg), enc(w.gates_m), enc(w.gates_h),
                       enc(w.readout_r), enc(w.readout_z))


# ------------------------------------------------------------------ wiring


def _run_stack(eng, layers: list, x: TensorShares, relu_upto: int) -> TensorShares:
    for i, (wi, bi, cols) in enumerate(layers):
        x = sec_fc(eng, x, wi, bi, cols)
        if i < relu_upto:
            x = eng.relu(x)
    return x


def priv_mf(eng, rw: RingWeights, cfg: MpnnConfig, h: TensorShares,
            adj: TensorShares, edge: TensorShares) -> TensorShares:
    """Messages for all ordered pairs, then adjacency-gated aggregation.

    Every pair gets a message (structure hiding); the aggregation multiplies
    by the shared 0/1 adjacency (scale 0, so no truncation) and sums over
    senders.
    """
    n, m = h.shape
    hu = replace(h, data=np.repeat(h.data, n, axis=0))  # row u*n+v carries h_u
    ev = replace(edge, data=edge.data.reshape(n * n, 1))
    x = ts_concat([hu, ev], axis=1)
    msgs = _run_stack(eng, rw.msg, x, cfg.reps)  # (n*n, msg_dim)
    gate = TensorShares(
        np.broadcast_to(adj.data.reshape(n * n, 1), (n * n, cfg.msg_dim)).copy(),
        0, adj.bound,
    )
    gated = eng.mul_shared(gate, msgs)  # still at scale f
    return eng.sum_axis(replace(gated, data=gated.data.reshape(n, n, cfg.msg_dim)), 0)


def priv_uf(eng, rw: RingWeights, cfg: MpnnConfig, msg: TensorShares,
            h: TensorShares) -> TensorShares:
    """Gated update: carry gate, blend gate, candidate state, convex blend."""

    def branch(pairs, gate_idx, x):
        wi, bi, cols = pairs[gate_idx]
        return eng.relu(sec_fc(eng, x, wi, bi, cols))

    pre_carry = eng.add(branch(rw.gates_m, 0, msg), branch(rw.gates_h, 0, h))
    carry = sec_sig(eng, pre_carry)
    pre_blend = eng.add(branch(rw.gates_m, 1, msg), branch(rw.gates_h, 1, h))
    blend = sec_sig(eng, pre_blend)
    # candidate: state branch scaled by the blend gate, message branch added
    gated_state = eng.trunc(eng.mul_shared(branch(rw.gates_h, 2, h), blend))
    cand = sec_tanh(eng, eng.add(gated_state, branch(rw.gates_m, 2, msg)))
    one = eng.ring.encode(1.0)
    inv_carry = eng.add_public(eng.neg(carry), one)
    inv_carry.bound = None if carry.bound is None else carry.bound + 1.0
    out = eng.add(eng.mul_shared(inv_carry, cand), eng.mul_shared(carry, h))
    return eng.trunc(out)


def priv_rf(eng, rw: RingWeights, cfg: MpnnConfig, h_first: TensorShares,
            h_last: TensorShares) -> TensorShares:
    """Two-path readout pooled over nodes.

    Path one gates (sigmoid over the concatenated first/last states), path
    two projects the last state; the gated product is additionally masked by
    the sign of path two (its boolean output lifted through bit-times-value),
    then summed over nodes into a graph-level vector.
    """
    p1 = _run_stack(eng, rw.readout_r, ts_concat([h_first, h_last], axis=1), cfg.reps)
    p2 = _run_stack(eng, rw.readout_z, h_last, cfg.reps)
    gate = sec_sig(eng, p1)
    q = eng.trunc(eng.mul_shared(gate, p2))
    sign = eng.drelu(p2)
    masked = eng.bitxa(sign, q)
    return eng.sum_axis(masked, 0)


def mpnn_forward(eng, rw: RingWeights, cfg: MpnnConfig, h: TensorShares,
                 adj: TensorShares, edge: TensorShares) -> TensorShares:
    h_first = None
    for t in range(cfg.steps):
        msg = priv_mf(eng, rw, cfg, h, adj, edge)
        h = priv_uf(eng, rw, cfg, msg, h)
        if t == 0:
            h_first = h
    return priv_rf(eng, rw, cfg, h_first, h)


# ------------------------------------------------------------ entry points


def plan_inference(ring_params: RingParams, cfg: MpnnConfig, n: int,
                   weights: MpnnWeights | None = None,
                   feat_bound: float | None = None,
                   edge_bound: float | None = None) -> Plan:
    """Correlation counts (and, with real weights, overflow checks) for one
    inference on an n-node graph."""
    ring = Ring(ring_params)
    eng = PlanEngine(ring)
    rw = encode_weights(ring, weights if weights is not None else MpnnWeights.zeros(cfg))
    h = TensorShares(np.zeros((n, cfg.feat_dim), np.uint64), ring.f, feat_bound)
    adj = TensorShares(np.zeros((n, n), np.uint64), 0, 1.0)
    edge = TensorShares(np.zeros((n, n), np.uint64), ring.f, edge_bound)
    mpnn_forward(eng, rw, cfg, h, adj, edge)
    return eng.plan


def _graph_ring_tensors(ring: Ring, graph: GraphData):
    adj = graph.adj.astype(np.uint64)  # scale 0
    edge = ring.encode(graph.edges)
    feats = ring.encode(graph.feats)
    return adj, edge, feats


def plaintext_infer(ring_params: RingParams, graph: GraphData, weights: MpnnWeights) -> np.ndarray:
    """Fixed-point reference: the same wiring and truncation points in the
    clear, round-to-nearest at each truncation."""
    ring = Ring(ring_params)
    eng = PlainEngine(ring)
    rw = encode_weights(ring, weights)
    adj, edge, feats = _graph_ring_tensors(ring, graph)
    out = mpnn_forward(
        eng, rw, weights.config,
        TensorShares(feats, ring.f), TensorShares(adj, 0), TensorShares(edge, ring.f),
    )
    return ring.decode(out.data, out.scale)


def float_infer(graph: GraphData, weights: MpnnWeights) -> np.ndarray:
    """Float-domain evaluation with exact activations (outer oracle)."""
    cfg = weights.config
    n = graph.n

    def stack(layers, x, relu_upto):
        for i, (wi, bi) in enumerate(layers):
            x = x @ wi + bi
            if i < relu_upto:
                x = np.maximum(x, 0.0)
        return x

    def branch(layers, idx, x):
        wi, bi = layers[idx]
        return np.maximum(x @ wi + bi, 0.0)

    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    h = graph.feats
    h_first = None
    for t in range(cfg.steps):
        hu = np.repeat(h, n, axis=0)
        x = np.concatenate([hu, graph.edges.reshape(n * n, 1)], axis=1)
        msgs = stack(weights.msg, x, cfg.reps)
        gated = graph.adj.reshape(n * n, 1) * msgs
        msg = gated.reshape(n, n, cfg.msg_dim).sum(axis=0)
        carry = sig(branch(weights.gates_m, 0, msg) + branch(weights.gates_h, 0, h))
        blend = sig(branch(weights.gates_m, 1, msg) + branch(weights.gates_h, 1, h))
        cand = np.tanh(branch(weights.gates_h, 2, h) * blend + branch(weights.gates_m, 2, msg))
        h = (1.0 - carry) * cand + carry * h
        if t == 0:
            h_first = h
    p1 = stack(weights.readout_r, np.concatenate([h_first, h], axis=1), cfg.reps)
    p2 = stack(weights.readout_z, h, cfg.reps)
    q = sig(p1) * p2
    return (np.where(p2 >= 0, 1.0, 0.0) * q).sum(axis=0)


def secure_infer(
    party: int,
    channel: tp.Channel,
    bundle: PartyBundle,
    cfg: MpnnConfig,
    graph: GraphData | None = None,
    weights: MpnnWeights | None = None,
    share_file: str | None = None,
    rng: np.random.Generator | None = None,
):
    """Run one inference; party 0 returns the decoded output vector.

    Inputs come either live (party 0 passes graph, shares it on the fly) or
    from pre-split share files on both sides. Party 1 must pass weights.
    """
    ring = Ring(bundle.ring)
    sess = ProtocolSession(party, ring, channel, bundle)
    if share_file is not None:
        fparty, fring, (adj_s, edge_s, feat_s) = load_shares(share_file)
        if fparty != party:
            raise ConfigError(f"share file belongs to party {fparty}")
        if fring != bundle.ring:
            raise ConfigError("share file ring parameters do not match bundle")
        n, m = feat_s.shape
    else:
        sess.ch.set_phase("setup")
        if party == 0:
            if graph is None:
                raise ConfigError("party 0 needs a graph (or a share file)")
            n, m = graph.n, graph.m
            self_shape = struct.pack("<II", n, m)
            sess.ch.send(tp.TAG_CONFIG, self_shape)
            adj, edge, feats = _graph_ring_tensors(ring, graph)
            flat = np.concatenate([adj.reshape(-1), edge.reshape(-1), feats.reshape(-1)])
            mine = sess.scatter(flat, rng=rng)
        else:
            n, m = struct.unpack("<II", sess.ch.recv(tp.TAG_CONFIG))
            mine = sess.scatter(None, shape=(2 * n * n + n * m,))
        adj_s = mine[: n * n].reshape(n, n)
        edge_s = mine[n * n : 2 * n * n].reshape(n, n)
        feat_s = mine[2 * n * n :].reshape(n, m)
    if m != cfg.feat_dim:
        raise ConfigError(f"graph feature width {m} != model width {cfg.feat_dim}")

    if party == 1:
        if weights is None:
            raise ConfigError("party 1 needs the model weights")
        rw = encode_weights(ring, weights)
    else:
        rw = encode_weights(ring, MpnnWeights.zeros(cfg))
    eng = SecureEngine(sess)
    out = mpnn_forward(
        eng, rw, cfg,
        TensorShares(feat_s, ring.f), TensorShares(adj_s, 0), TensorShares(edge_s, ring.f),
    )
    opened = sess.reveal_to_client(out.data)
    if party == 0:
        return ring.decode(opened, out.scale)
    return None


# ---------------------------------------------------------------- file I/O


def save_graph(path: str, graph: GraphData) -> None:
    doc = {
        "n": graph.n,
        "m": graph.m,
        "adjacency": graph.adj.astype(int).tolist(),
        "edges": graph.edges.tolist(),
        "features": graph.feats.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_graph(path: str) -> GraphData:
    with open(path) as fh:
        doc = json.load(fh)
    n = int(doc["n"])
    adj_spec = doc["adjacency"]
    if adj_spec and isinstance(adj_spec[0], list) and len(adj_spec[0]) == n and len(adj_spec) == n:
        adj = np.asarray(adj_spec, np.float64)
    else:
        # edge list [[u, v], ...], undirected
        adj = np.zeros((n, n))
        for u, v in adj_spec:
            adj[u, v] = adj[v, u] = 1.0
    edges = np.asarray(doc.get("edges") if doc.get("edges") is not None else np.zeros((n, n)))
    feats = np.asarray(doc["features"], np.float64)
    return GraphData(adj, edges, feats)


def save_weights(path: str, w: MpnnWeights) -> None:
    def pack(pairs):
        return [{"w": wi.tolist(), "b": bi.tolist()} for wi, bi in pairs]

    doc = {
        "config": {
            "feat_dim": w.config.feat_dim, "msg_dim": w.config.msg_dim,
            "readout_dim": w.config.readout_dim, "steps": w.config.steps,
            "reps": w.config.reps, "sig_pieces": w.config.sig_pieces,
            "tanh_pieces": w.config.tanh_pieces,
        },
        "msg": pack(w.msg),
        "gates_m": pack(w.gates_m),
        "gates_h": pack(w.gates_h),
        "readout_r": pack(w.readout_r),
        "readout_z": pack(w.readout_z),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_weights(path: str) -> MpnnWeights:
    with open(path) as fh:
        doc = json.load(fh)
    cfg = MpnnConfig(**doc["config"])

    def unpack(items):
        return [(np.asarray(d["w"], np.float64), np.asarray(d["b"], np.float64)) for d in items]

    return MpnnWeights(cfg, unpack(doc["msg"]), unpack(doc["gates_m"]),
                       unpack(doc["gates_h"]), unpack(doc["readout_r"]),
                       unpack(doc["readout_z"]))


def split_graph(graph: GraphData, ring_params: RingParams, seed: int,
                path0: str, path1: str) -> None:
    """Share every tensor (adjacency included) and write both share files."""
    ring = Ring(ring_params)
    rng = np.random.default_rng(seed)
    adj, edge, feats = _graph_ring_tensors(ring, graph)
    a0, a1 = ring.share(adj, rng)
    e0, e1 = ring.share(edge, rng)
    f0, f1 = ring.share(feats, rng)
    save_shares(path0, 0, ring_params, a0, e0, f0)
    save_shares(path1, 1, ring_params, a1, e1, f1)


def save_shares(path: str, party: int, ring_params: RingParams,
                adj_s: np.ndarray, edge_s: np.ndarray, feat_s: np.ndarray) -> None:
    ring = Ring(ring_params)
    n, m = feat_s.shape
    head = struct.pack("<BBBBII", SHARE_VERSION, party, ring_params.l, ring_params.f, n, m)
    body = head + ring.pack(adj_s) + ring.pack(edge_s) + ring.pack(feat_s)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(SHARE_MAGIC + body + struct.pack("<I", crc))


def load_shares(path: str):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != SHARE_MAGIC:
        raise BundleIntegrityError("not a share file")
    body, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise BundleIntegrityError("share file checksum mismatch")
    ver, party, l, f, n, m = struct.unpack_from("<BBBBII", body)
    if ver != SHARE_VERSION:
        raise BundleIntegrityError(f"unsupported share file version {ver}")
    ring_params = RingParams(l=l, f=f)
    ring = Ring(ring_params)
    off = struct.calcsize("<BBBBII")
    nb = ring.nbytes(n * n)
    adj_s = ring.unpack(body[off : off + nb], (n, n))
    edge_s = ring.unpack(body[off + nb : off + 2 * nb], (n, n))
    feat_s = ring.unpack(body[off + 2 * nb :], (n, m))
    return party, ring_params, (adj_s, edge_s, feat_s)
