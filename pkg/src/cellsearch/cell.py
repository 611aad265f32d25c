"""The searchable skip cell: DAG topology, mixed operations with partial
channels, capped edge-weight normalization, and forward evaluation.

Nodes 0 and 1 are inputs (encoder skip tensor and upsampled decoder tensor,
each mapped to the internal width by a learned 1x1 conv).  Every ordered
pair (i, j) with i < j and j >= 2 is a candidate edge, so the default
6-node cell has 14 edges and a 98-entry (edge, op) parameter table.  The
cell output concatenates the last ``n_outputs`` nodes and projects them to
the decoder's channel count with a final 1x1 conv.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops as cops
from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    channel_place,
    channel_take,
    clamp,
    concat_channels,
    conv1x1,
    div,
    gather,
    index,
    mul,
    softmax1d,
    submatrix,
    sum_all,
    take_rows,
    tan,
)
from .ops import CANDIDATE_OPS, OpKind

__all__ = [
    "BETA_CLAMP",
    "CellSpec",
    "ArchParams",
    "ChannelMask",
    "CellWeights",
    "GenotypeEdge",
    "DiscreteGenotype",
    "sample_channel_masks",
    "op_probabilities",
    "edge_weights",
    "cap_edge_weights",
    "mixed_op_forward",
    "cell_forward",
    "discrete_cell_forward",
]

# tan() in the edge transform is singular at +-pi/2; raw logits are clipped
# to this symmetric interval before the transform.
BETA_CLAMP = 1.2


@dataclass(frozen=True)
class CellSpec:
    """Static cell topology: node count, output count, channels, partial-channel divisor."""

    n_nodes: int = 6
    n_outputs: int = 4
    internal_channels: int = 8
    k_divisor: int = 4

    def __post_init__(self):
        if self.n_nodes < 3:
            raise ValueError("cell needs at least one intermediate node (n_nodes >= 3)")
        if not 1 <= self.n_outputs <= self.n_nodes - 2:
            raise ValueError("n_outputs must be in [1, n_nodes - 2]")
        if self.internal_channels % self.k_divisor != 0:
            raise ValueError("internal_channels must be divisible by k_divisor")

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        """All candidate edges (i, j), i < j, into intermediate nodes, ordered by (j, i)."""
        return tuple((i, j) for j in range(2, self.n_nodes) for i in range(j))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_ops(self) -> int:
        return len(CANDIDATE_OPS)

    @property
    def genotype_length(self) -> int:
        return self.n_edges * self.n_ops

    def edge_id(self, src: int, dst: int) -> int:
        return self.edges.index((src, dst))

    def incoming_ids(self, node: int) -> list[int]:
        return [e for e, (_, j) in enumerate(self.edges) if j == node]


class ArchParams:
    """Continuous architecture parameters plus the active-operation masks.

    alpha has one logit per (edge, op); beta one logit per edge.  Inactive
    entries are excluded from every softmax and from the forward sums.
    """

    def __init__(self, spec: CellSpec):
        self.spec = spec
        self.alpha = Parameter(np.zeros((spec.n_edges, spec.n_ops)), name="alpha")
        self.beta = Parameter(np.zeros(spec.n_edges), name="beta")
        self.active = np.ones((spec.n_edges, spec.n_ops), dtype=bool)
        self.edge_active = np.ones(spec.n_edges, dtype=bool)

    def active_ops(self, edge: int) -> np.ndarray:
        return np.flatnonzero(self.active[edge])

    def deactivate_ops(self, edge: int, op_ids) -> None:
        for o in op_ids:
            self.active[edge, int(o)] = False
        if self.edge_active[edge] and not self.active[edge].any():
            raise ValueError(f"edge {edge} would be left with no active operations")

    def theta(self) -> np.ndarray:
        """(n_edges, n_ops) importance table alpha * beta; inactive entries are 0."""
        t = self.alpha.data * self.beta.data[:, None]
        return np.where(self.active, t, 0.0)

    def params(self) -> list[Parameter]:
        return [self.alpha, self.beta]


@dataclass(frozen=True)
class ChannelMask:
    """Static binary channel selection with exactly channels/K ones; fixed per run."""

    indices: tuple[int, ...]
    channels: int

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("mask indices must be unique")
        if any(not 0 <= i < self.channels for i in self.indices):
            raise ValueError("mask index out of range")

    @property
    def bools(self) -> np.ndarray:
        m = np.zeros(self.channels, dtype=bool)
        m[list(self.indices)] = True
        return m


def sample_channel_masks(spec: CellSpec, rng: np.random.Generator) -> list[ChannelMask]:
    """One mask per edge, each selecting channels/K channels uniformly without replacement."""
    c, k = spec.internal_channels, spec.k_divisor
    masks = []
    for _ in range(spec.n_edges):
        sel = np.sort(rng.choice(c, size=c // k, replace=False))
        masks.append(ChannelMask(tuple(int(i) for i in sel), c))
    return masks


# ---------------------------------------------------------------------------
# edge transforms (plain-array reference forms; the graph forms below mirror
# them operation for operation so values agree bitwise)
# ---------------------------------------------------------------------------


def op_probabilities(alpha_active) -> np.ndarray:
    """Softmax with max subtraction over the active ops of one edge."""
    a = np.asarray(alpha_active, dtype=np.float64)
    if a.size == 0:
        raise ValueError("edge has no active operations")
    z = np.exp(a - a.max())
    return z / z.sum()


def cap_edge_weights(psi_hat) -> np.ndarray:
    """Cap normalized incoming-edge weights so no edge exceeds 0.5 (for >= 2 edges).

    The largest weight is pinned to 0.5 and the rest are rescaled to share
    the remaining half proportionally; weights that already respect the cap
    are returned unchanged.
    """
    psi_hat = np.asarray(psi_hat, dtype=np.float64)
    if psi_hat.size <= 1 or psi_hat.max() <= 0.5:
        return psi_hat
    istar = int(np.argmax(psi_hat))
    rest = np.arange(psi_hat.size) != istar
    s_rest = psi_hat[rest].sum()
    out = psi_hat * (0.5 / s_rest)
    out[istar] = 0.5
    return out


def edge_weights(beta_incoming) -> np.ndarray:
    """Normalized, capped weights of a node's active incoming edges.

    Raw logits are clipped to (-BETA_CLAMP, BETA_CLAMP), passed through tan,
    softmax-normalized with max subtraction, then capped at 0.5.
    """
    b = np.asarray(beta_incoming, dtype=np.float64)
    if b.size == 0:
        raise ValueError("node has no active incoming edges")
    if b.size == 1:
        return np.array([1.0])
    t = np.tan(np.clip(b, -BETA_CLAMP, BETA_CLAMP))
    z = np.exp(t - t.max())
    psi_hat = z / z.sum()
    return cap_edge_weights(psi_hat)


def _phi_coeffs(arch: ArchParams, edge: int) -> list[Tensor] | None:
    """Differentiable per-op softmax coefficients; None when a single op remains.

    A single-op edge uses the constant coefficient 1.0 outside the graph, so
    its alpha entry receives an exactly-zero gradient.
    """
    ids = arch.active_ops(edge)
    if ids.size == 0:
        raise ValueError(f"edge {edge} has no active operations")
    if ids.size == 1:
        return None
    flat = edge * arch.spec.n_ops + ids
    phi = softmax1d(gather(arch.alpha, flat))
    return [index(phi, t) for t in range(ids.size)]


def _psi_coeffs(arch: ArchParams, incoming_edge_ids: list[int]) -> list[Tensor | None]:
    """Differentiable incoming-edge coefficients mirroring :func:`edge_weights`."""
    if not incoming_edge_ids:
        raise ValueError("node has no active incoming edges")
    if len(incoming_edge_ids) == 1:
        return [None]
    psi_hat = softmax1d(tan(clamp(gather(arch.beta, incoming_edge_ids), -BETA_CLAMP, BETA_CLAMP)))
    values = psi_hat.data
    if values.max() <= 0.5:
        return [index(psi_hat, t) for t in range(len(incoming_edge_ids))]
    istar = int(np.argmax(values))
    rest = [t for t in range(len(incoming_edge_ids)) if t != istar]
    factor = div(Tensor(0.5), sum_all(gather(psi_hat, rest)))
    coeffs: list[Tensor | None] = []
    for t in range(len(incoming_edge_ids)):
        if t == istar:
            coeffs.append(Tensor(0.5))
        else:
            coeffs.append(mul(index(psi_hat, t), factor))
    return coeffs


# ---------------------------------------------------------------------------
# cell weights
# ---------------------------------------------------------------------------


class CellWeights:
    """All trainable tensors of one cell instance (one per skip level).

    Candidate conv weights are stored at the full internal width; during
    search only the masked-in channel sub-slices enter the graph, so the
    same tensors serve full-capacity final training and make the
    start-of-search snapshot restorable bit for bit.
    """

    def __init__(
        self,
        spec: CellSpec,
        skip_channels: int,
        up_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        name: str = "cell",
    ):
        c = spec.internal_channels
        self.spec = spec
        self.name = name
        self.in_skip_w = Parameter(cops.he_normal(rng, (c, skip_channels), skip_channels), f"{name}.in_skip_w")
        self.in_skip_b = Parameter(np.zeros(c), f"{name}.in_skip_b")
        self.in_up_w = Parameter(cops.he_normal(rng, (c, up_channels), up_channels), f"{name}.in_up_w")
        self.in_up_b = Parameter(np.zeros(c), f"{name}.in_up_b")
        self.out_w = Parameter(
            cops.he_normal(rng, (out_channels, spec.n_outputs * c), spec.n_outputs * c), f"{name}.out_w"
        )
        self.out_b = Parameter(np.zeros(out_channels), f"{name}.out_b")
        self.edge_ops: dict[tuple[int, OpKind], dict[str, Parameter]] = {}
        for e in range(spec.n_edges):
            for kind in CANDIDATE_OPS:
                w = cops.init_op_weights(kind, c, rng, name=f"{name}.e{e}.{cops.OP_LABELS[kind]}")
                if w:
                    self.edge_ops[(e, kind)] = w

    def params(self) -> list[Parameter]:
        out = [self.in_skip_w, self.in_skip_b, self.in_up_w, self.in_up_b, self.out_w, self.out_b]
        for key in sorted(self.edge_ops, key=lambda k: (k[0], int(k[1]))):
            pair = self.edge_ops[key]
            out.extend([pair["dw"], pair["pw"]])
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name in snap:
                p.data = snap[p.name].copy()

    def sliced_op(self, edge: int, kind: OpKind, sel: np.ndarray) -> dict[str, Tensor] | None:
        """Weight sub-slices for the masked-in channels of one candidate op."""
        if not cops.is_conv(kind):
            return None
        pair = self.edge_ops[(edge, kind)]
        return {"dw": take_rows(pair["dw"], sel), "pw": submatrix(pair["pw"], sel, sel)}

    def full_op(self, edge: int, kind: OpKind) -> dict[str, Parameter] | None:
        if not cops.is_conv(kind):
            return None
        return self.edge_ops[(edge, kind)]


# ---------------------------------------------------------------------------
# forward evaluation
# ---------------------------------------------------------------------------


def mixed_op_forward(
    x: Tensor,
    edge: int,
    arch: ArchParams,
    weights: CellWeights,
    mask: ChannelMask,
) -> Tensor:
    """Partial-channel mixed op: masked-in channels carry the softmax-weighted
    sum of active candidates; masked-out channels pass through bit-identically."""
    spec = arch.spec
    if x.data.ndim != 4 or x.data.shape[1] != spec.internal_channels:
        raise ShapeError(
            "mixed-op", f"expected {spec.internal_channels} channels, got shape {x.data.shape}"
        )
    if not arch.edge_active[edge]:
        raise ValueError(f"edge {edge} is not active")
    sel = np.asarray(mask.indices, dtype=np.intp)
    xs = channel_take(x, sel)
    coeffs = _phi_coeffs(arch, edge)
    acc: Tensor | None = None
    for t, o in enumerate(arch.active_ops(edge)):
        kind = OpKind(int(o))
        y = cops.apply(kind, xs, weights.sliced_op(edge, kind, sel))
        if coeffs is not None:
            y = mul(y, coeffs[t])
        acc = y if acc is None else add(acc, y)
    return channel_place(acc, x, sel)


def cell_forward(
    skip_in: Tensor,
    up_in: Tensor,
    arch: ArchParams,
    weights: CellWeights,
    masks: list[ChannelMask],
) -> Tensor:
    """Supernet cell evaluation with partial channels and capped edge weights."""
    spec = arch.spec
    if skip_in.data.shape[2:] != up_in.data.shape[2:]:
        raise ShapeError(
            "cell", f"spatial mismatch between inputs: {skip_in.data.shape} vs {up_in.data.shape}"
        )
    states = [
        conv1x1(skip_in, weights.in_skip_w, weights.in_skip_b),
        conv1x1(up_in, weights.in_up_w, weights.in_up_b),
    ]
    for j in range(2, spec.n_nodes):
        inc = [e for e in spec.incoming_ids(j) if arch.edge_active[e]]
        if not inc:
            raise ValueError(f"node {j} has no active incoming edges")
        psi = _psi_coeffs(arch, inc)
        total: Tensor | None = None
        for coeff, e in zip(psi, inc):
            src = spec.edges[e][0]
            f = mixed_op_forward(states[src], e, arch, weights, masks[e])
            term = f if coeff is None else mul(f, coeff)
            total = term if total is None else add(total, term)
        states.append(total)
    out = concat_channels(states[spec.n_nodes - spec.n_outputs :])
    return conv1x1(out, weights.out_w, weights.out_b)


# ---------------------------------------------------------------------------
# discrete genotype
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenotypeEdge:
    src: int
    dst: int
    op: OpKind


@dataclass(frozen=True)
class DiscreteGenotype:
    """Final discrete cell: one op per retained edge, at most two incoming edges per node."""

    n_nodes: int
    n_outputs: int
    edges: tuple[GenotypeEdge, ...] = field(default_factory=tuple)

    def __post_init__(self):
        seen = set()
        incoming: dict[int, int] = {}
        for e in self.edges:
            if not (0 <= e.src < e.dst < self.n_nodes) or e.dst < 2:
                raise ValueError(f"invalid edge ({e.src}, {e.dst}) in genotype")
            if (e.src, e.dst) in seen:
                raise ValueError(f"duplicate edge ({e.src}, {e.dst})")
            if e.op not in CANDIDATE_OPS:
                raise ValueError(f"edge ({e.src}, {e.dst}) uses non-candidate op {e.op!r}")
            seen.add((e.src, e.dst))
            incoming[e.dst] = incoming.get(e.dst, 0) + 1
        for node, count in incoming.items():
            if count > 2:
                raise ValueError(f"node {node} has {count} incoming edges (max 2)")

    def incoming(self, node: int) -> list[GenotypeEdge]:
        return [e for e in self.edges if e.dst == node]


def discrete_cell_forward(
    skip_in: Tensor,
    up_in: Tensor,
    genotype: DiscreteGenotype,
    weights: CellWeights,
) -> Tensor:
    """Full-width evaluation of a discrete cell (no masks, no mixing weights)."""
    spec = weights.spec
    if skip_in.data.shape[2:] != up_in.data.shape[2:]:
        raise ShapeError(
            "cell", f"spatial mismatch between inputs: {skip_in.data.shape} vs {up_in.data.shape}"
        )
    states = [
        conv1x1(skip_in, weights.in_skip_w, weights.in_skip_b),
        conv1x1(up_in, weights.in_up_w, weights.in_up_b),
    ]
    for j in range(2, genotype.n_nodes):
        total: Tensor | None = None
        for ge in genotype.incoming(j):
            e = spec.edge_id(ge.src, ge.dst)
            y = cops.apply(ge.op, states[ge.src], weights.full_op(e, ge.op))
            total = y if total is None else add(total, y)
        if total is None:
            raise ValueError(f"node {j} has no incoming edges in the genotype")
        states.append(total)
    out = concat_channels(states[genotype.n_nodes - genotype.n_outputs :])
    return conv1x1(out, weights.out_w, weights.out_b)
