"""Genotype representations and trajectory analytics.

A continuous genotype flattens the (edge, op) importance table into a
single vector in pinned order: edges sorted by (dst, src), ops in the
fixed candidate order (98 entries for the default 6-node cell).  Discrete
views are binary vectors in the same indexing: per-edge top-k masks and a
discretization-style encoding (top-1 op on each of the two strongest
incoming edges per node).  Similarities are cosine for continuous vectors
and Hamming for binary ones; emergence statistics report when each edge's
eventual winner first enters the top-k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cell import ArchParams, CellSpec, DiscreteGenotype, GenotypeEdge, edge_weights
from .ops import OpKind
from .trajectory import TrajectoryLog

__all__ = [
    "ContinuousGenotype",
    "TopKMask",
    "continuous_vector",
    "continuous_from_record",
    "topk_mask",
    "cosine_similarity",
    "hamming_similarity",
    "genotype_bits",
    "final_style_bits",
    "similarity_matrix",
    "EmergenceReport",
    "emergence_epochs",
    "discretize_from_log",
]


@dataclass(frozen=True)
class ContinuousGenotype:
    """Flattened (edge, op) importance vector at one epoch; pruned entries are 0."""

    values: np.ndarray
    epoch: int

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


@dataclass(frozen=True)
class TopKMask:
    """Binary vector marking, per edge, the k highest-importance active ops."""

    bits: np.ndarray
    k: int

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=np.uint8))


def continuous_vector(arch: ArchParams, epoch: int = 0) -> ContinuousGenotype:
    return ContinuousGenotype(arch.theta().ravel(), epoch)


def continuous_from_record(theta: np.ndarray, epoch: int) -> ContinuousGenotype:
    return ContinuousGenotype(np.asarray(theta).ravel(), epoch)


def topk_mask(values, k: int, active=None, n_ops: int | None = None) -> TopKMask:
    """Per-edge top-k selection by value; ties break toward the lower op index.

    ``values`` is the flattened (edge, op) vector; ``active`` (same shape)
    limits each edge's candidate pool, and each edge contributes
    min(k, active ops) set bits.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    n_ops = n_ops or 7
    if values.size % n_ops:
        raise ValueError(f"vector length {values.size} is not a multiple of {n_ops}")
    table = values.reshape(-1, n_ops)
    act = np.ones_like(table, dtype=bool) if active is None else np.asarray(active, dtype=bool).reshape(table.shape)
    bits = np.zeros_like(table, dtype=np.uint8)
    for e in range(table.shape[0]):
        ids = np.flatnonzero(act[e])
        order = ids[np.argsort(-table[e, ids], kind="stable")]
        bits[e, order[: min(k, ids.size)]] = 1
    return TopKMask(bits.ravel(), k)


def cosine_similarity(g1, g2) -> float:
    a = np.asarray(getattr(g1, "values", g1), dtype=np.float64)
    b = np.asarray(getattr(g2, "values", g2), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def hamming_similarity(m1, m2) -> float:
    a = np.asarray(getattr(m1, "bits", m1))
    b = np.asarray(getattr(m2, "bits", m2))
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return 1.0 - float(np.count_nonzero(a != b)) / a.size


def genotype_bits(genotype: DiscreteGenotype, spec: CellSpec) -> np.ndarray:
    """Binary encoding of a discrete genotype in the pinned (edge, op) indexing."""
    bits = np.zeros((spec.n_edges, spec.n_ops), dtype=np.uint8)
    for ge in genotype.edges:
        bits[spec.edge_id(ge.src, ge.dst), int(ge.op)] = 1
    return bits.ravel()


def final_style_bits(traj: TrajectoryLog, epoch: int) -> np.ndarray:
    """Discretization-style encoding of the architecture at one epoch: the
    top-importance op on each of the two strongest incoming edges per node."""
    spec = traj.spec
    rec = traj.record(epoch)
    bits = np.zeros((spec.n_edges, spec.n_ops), dtype=np.uint8)
    for j in range(2, spec.n_nodes):
        inc = spec.incoming_ids(j)
        psi = edge_weights(rec.beta[inc])
        order = np.argsort(-psi, kind="stable")
        for t in order[: min(2, len(inc))]:
            e = inc[t]
            ids = np.flatnonzero(rec.active[e])
            winner = ids[int(np.argmax(rec.theta[e, ids]))]
            bits[e, winner] = 1
    return bits.ravel()


_REPRESENTATIONS = ("full", "final", "top1", "top2", "top3")


def similarity_matrix(traj: TrajectoryLog, representation: str, checkpoints) -> np.ndarray:
    """Symmetric epoch-by-epoch similarity matrix with unit diagonal.

    ``full`` compares continuous importance vectors with cosine similarity;
    ``final`` and ``top1/2/3`` compare binary encodings with Hamming
    similarity.
    """
    if representation not in _REPRESENTATIONS:
        raise ValueError(f"representation must be one of {_REPRESENTATIONS}")
    checkpoints = list(checkpoints)
    logged = set(traj.epochs)
    missing = [cp for cp in checkpoints if cp not in logged]
    if missing:
        raise ValueError(f"checkpoints not logged: {missing}")
    if representation == "full":
        vecs = [traj.record(cp).theta.ravel() for cp in checkpoints]
        sim = cosine_similarity
    elif representation == "final":
        vecs = [final_style_bits(traj, cp) for cp in checkpoints]
        sim = hamming_similarity
    else:
        k = int(representation[-1])
        vecs = [
            topk_mask(
                traj.record(cp).theta.ravel(),
                k,
                active=traj.record(cp).active,
                n_ops=traj.spec.n_ops,
            ).bits
            for cp in checkpoints
        ]
        sim = hamming_similarity
    n = len(checkpoints)
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = sim(vecs[i], vecs[j])
    return mat


# ---------------------------------------------------------------------------
# emergence statistics
# ---------------------------------------------------------------------------


@dataclass
class EmergenceReport:
    """First-entry epochs of each edge's final winner at top-3/2/1, plus
    run-level epochs at which the final incoming-edge choice is in place."""

    edges: list[tuple[int, int]]
    winners: dict[int, int]
    in_final: dict[int, bool]
    top3: dict[int, int]
    top2: dict[int, int]
    top1: dict[int, int]
    flagged: dict[int, bool] = field(default_factory=dict)
    edges_fixed_first: int | None = None
    edges_fixed_persistent: int | None = None

    def medians(self) -> dict[str, float]:
        return {
            "top3": float(np.median(list(self.top3.values()))),
            "top2": float(np.median(list(self.top2.values()))),
            "top1": float(np.median(list(self.top1.values()))),
        }


def _winner_rank_epoch(traj: TrajectoryLog, edge: int, winner: int, k: int, epochs: list[int]) -> int | None:
    for ep in epochs:
        rec = traj.record(ep)
        ids = np.flatnonzero(rec.active[edge])
        if winner not in ids:
            continue
        order = ids[np.argsort(-rec.theta[edge, ids], kind="stable")]
        if winner in order[: min(k, ids.size)]:
            return ep
    return None


def _top2_edges(traj: TrajectoryLog, epoch: int) -> dict[int, tuple[int, ...]]:
    spec = traj.spec
    rec = traj.record(epoch)
    out = {}
    for j in range(2, spec.n_nodes):
        inc = spec.incoming_ids(j)
        psi = edge_weights(rec.beta[inc])
        order = np.argsort(-psi, kind="stable")
        out[j] = tuple(sorted(inc[t] for t in order[: min(2, len(inc))]))
    return out


def emergence_epochs(
    traj: TrajectoryLog, final_genotype: DiscreteGenotype, start_epoch: int
) -> EmergenceReport:
    """First-entry emergence epochs per edge, scanning from ``start_epoch``
    (the first post-warm-up epoch) onward."""
    spec = traj.spec
    epochs = [ep for ep in traj.epochs if ep >= start_epoch]
    if not epochs:
        raise ValueError("trajectory does not cover the search phase")
    last = traj.records[-1]
    final_active = traj.final_active()

    winners: dict[int, int] = {}
    for e in range(spec.n_edges):
        ids = np.flatnonzero(final_active[e])
        winners[e] = int(ids[int(np.argmax(last.alpha[e, ids]))])

    final_edges = {spec.edge_id(ge.src, ge.dst) for ge in final_genotype.edges}
    report = EmergenceReport(
        edges=list(traj.spec.edges),
        winners=winners,
        in_final={e: e in final_edges for e in range(spec.n_edges)},
        top3={},
        top2={},
        top1={},
    )
    max_epoch = epochs[-1]
    for e in range(spec.n_edges):
        for k, store in ((3, report.top3), (2, report.top2), (1, report.top1)):
            ep = _winner_rank_epoch(traj, e, winners[e], k, epochs)
            if ep is None:
                store[e] = max_epoch
                report.flagged[e] = True
            else:
                store[e] = ep

    final_sets = {
        j: tuple(
            sorted(spec.edge_id(ge.src, ge.dst) for ge in final_genotype.edges if ge.dst == j)
        )
        for j in range(2, spec.n_nodes)
    }
    matches = []
    for ep in epochs:
        tops = _top2_edges(traj, ep)
        matches.append(all(tops[j] == final_sets[j] for j in final_sets))
    for ep, ok in zip(epochs, matches):
        if ok:
            report.edges_fixed_first = ep
            break
    for t in range(len(epochs) - 1, -1, -1):
        if not matches[t]:
            break
        report.edges_fixed_persistent = epochs[t]
    return report


def discretize_from_log(traj: TrajectoryLog) -> DiscreteGenotype:
    """Recompute the discrete genotype from the final logged state: argmax
    logit among active ops per edge, top-2 incoming edges per node."""
    spec = traj.spec
    last = traj.records[-1]
    final_active = traj.final_active()
    kept: list[GenotypeEdge] = []
    for j in range(2, spec.n_nodes):
        inc = spec.incoming_ids(j)
        psi = edge_weights(last.beta[inc])
        order = np.argsort(-psi, kind="stable")
        for t in order[: min(2, len(inc))]:
            e = inc[t]
            ids = np.flatnonzero(final_active[e])
            winner = ids[int(np.argmax(last.alpha[e, ids]))]
            src, dst = spec.edges[e]
            kept.append(GenotypeEdge(src, dst, OpKind(int(winner))))
    kept.sort(key=lambda ge: (ge.dst, ge.src))
    return DiscreteGenotype(spec.n_nodes, spec.n_outputs, tuple(kept))
