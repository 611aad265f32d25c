"""Per-edge importance distributions, the JS-divergence stability test, the
geometric threshold schedule, two-stage operation pruning, the stopping
criterion, and the final top-2 edge reduction.

Importance of an op on an edge is the product of its op logit and the
edge logit.  Each epoch the importances are normalized into a categorical
distribution per edge and compared to the previous epoch's distribution
with Jensen-Shannon divergence (natural log).  An edge whose divergence
falls below its threshold is considered stable and gets pruned: first all
strong negative outliers (more than two population standard deviations
below the mean), otherwise the single least-important op.  Edges that fail
the test have their threshold doubled instead.  The search stops once
every edge carries exactly one op; each node then keeps its two strongest
incoming edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cell import ArchParams, CellSpec, DiscreteGenotype, GenotypeEdge, edge_weights
from .ops import OpKind

__all__ = [
    "PruneEvent",
    "ImportanceState",
    "StabilityDecision",
    "EpochImportance",
    "importance",
    "edge_distribution",
    "js_divergence",
    "stability_step",
    "prune_edge_ops",
    "is_converged",
    "epoch_importance",
    "apply_stability",
    "commit_distributions",
    "discretize",
]

EVENT_KINDS = ("outlier", "fallback", "edge-reduction", "threshold-inflation")


@dataclass(frozen=True)
class PruneEvent:
    """One pruning-machinery event; ops_removed is nonempty only for op prunes."""

    epoch: int
    edge: int
    kind: str
    ops_removed: tuple[int, ...] = ()
    js_value: float = float("nan")

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if bool(self.ops_removed) != (self.kind in ("outlier", "fallback")):
            raise ValueError(f"ops_removed inconsistent with kind {self.kind!r}")


@dataclass
class ImportanceState:
    """Per-edge stability bookkeeping: previous distributions and thresholds."""

    prev_dist: list[np.ndarray]
    thresholds: np.ndarray
    kappa: float = 2.0
    eps: float = 1e-6

    @classmethod
    def fresh(cls, spec: CellSpec, theta0: float = 1.0, kappa: float = 2.0, eps: float = 1e-6):
        return cls(
            prev_dist=[np.full(spec.n_ops, 1.0 / spec.n_ops) for _ in range(spec.n_edges)],
            thresholds=np.full(spec.n_edges, float(theta0)),
            kappa=float(kappa),
            eps=float(eps),
        )


def importance(arch: ArchParams, edge: int) -> np.ndarray:
    """Importance vector over the active ops of one edge: op logit times edge logit."""
    if not arch.edge_active[edge]:
        raise ValueError(f"edge {edge} is not active")
    ids = arch.active_ops(edge)
    return arch.alpha.data[edge, ids] * arch.beta.data[edge]


def edge_distribution(theta, eps: float = 1e-6) -> np.ndarray:
    """Categorical distribution over active ops from importances.

    Negative importances are clamped to zero before normalizing; an
    all-zero vector falls back to uniform.  The output is renormalized to
    sum to exactly 1.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size == 0:
        raise ValueError("empty importance vector")
    pos = np.maximum(theta, 0.0)
    total = pos.sum()
    if total == 0.0:
        return np.full(theta.size, 1.0 / theta.size)
    p = pos / (total + eps)
    return p / p.sum()


def js_divergence(p, q, eps: float = 1e-6) -> float:
    """Jensen-Shannon divergence (natural log) between two distributions on
    the same support, each smoothed by adding eps and renormalizing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    ps = (p + eps) / (p + eps).sum()
    qs = (q + eps) / (q + eps).sum()
    m = 0.5 * (ps + qs)
    return float(0.5 * np.sum(ps * np.log(ps / m)) + 0.5 * np.sum(qs * np.log(qs / m)))


@dataclass(frozen=True)
class StabilityDecision:
    prune: bool
    js: float
    new_threshold: float


def stability_step(p_now, p_prev, threshold: float, kappa: float = 2.0, eps: float = 1e-6) -> StabilityDecision:
    """Stable (divergence below threshold) means prune; otherwise the
    threshold inflates by kappa so the criterion keeps getting easier."""
    js = js_divergence(p_prev, p_now, eps=eps)
    if js < threshold:
        return StabilityDecision(prune=True, js=js, new_threshold=threshold)
    return StabilityDecision(prune=False, js=js, new_threshold=threshold * kappa)


def prune_edge_ops(theta, op_ids) -> tuple[tuple[int, ...], str]:
    """Two-stage pruning over the active ops of a stable edge.

    Stage 1 removes every op more than two population standard deviations
    below the mean importance; if none qualify, stage 2 removes the single
    least-important op (ties toward the lowest op index).  At least one op
    always survives.
    """
    theta = np.asarray(theta, dtype=np.float64)
    op_ids = np.asarray(op_ids, dtype=np.intp)
    if theta.size != op_ids.size or theta.size < 2:
        raise ValueError("pruning needs at least two active ops")
    mu = theta.mean()
    sigma = theta.std()
    outliers = np.flatnonzero(theta < mu - 2.0 * sigma)
    if outliers.size:
        removed, kind = list(op_ids[outliers]), "outlier"
    else:
        removed, kind = [op_ids[int(np.argmin(theta))]], "fallback"
    if len(removed) >= op_ids.size:
        keep = op_ids[int(np.argmax(theta))]
        removed = [r for r in removed if r != keep]
    return tuple(int(r) for r in removed), kind


def is_converged(arch: ArchParams) -> bool:
    """True iff every active edge has exactly one active operation."""
    return all(
        arch.active_ops(e).size == 1 for e in range(arch.spec.n_edges) if arch.edge_active[e]
    )


# ---------------------------------------------------------------------------
# per-epoch orchestration
# ---------------------------------------------------------------------------


@dataclass
class EpochImportance:
    op_ids: list[np.ndarray]  # active support at computation time, per edge
    theta_active: list[np.ndarray]
    dists: list[np.ndarray]
    js: np.ndarray


def epoch_importance(arch: ArchParams, state: ImportanceState) -> EpochImportance:
    """End-of-epoch importances, distributions, and JS values for all edges."""
    spec = arch.spec
    op_ids, theta_active, dists, js = [], [], [], np.zeros(spec.n_edges)
    for e in range(spec.n_edges):
        t = importance(arch, e)
        p = edge_distribution(t, eps=state.eps)
        op_ids.append(arch.active_ops(e))
        theta_active.append(t)
        dists.append(p)
        js[e] = js_divergence(state.prev_dist[e], p, eps=state.eps)
    return EpochImportance(op_ids, theta_active, dists, js)


def apply_stability(
    arch: ArchParams, state: ImportanceState, imp: EpochImportance, epoch: int
) -> list[PruneEvent]:
    """Run the stability test on every multi-op edge: prune or inflate."""
    events = []
    for e in range(arch.spec.n_edges):
        if not arch.edge_active[e]:
            continue
        ids = arch.active_ops(e)
        if ids.size <= 1:
            continue  # already discrete
        decision = stability_step(
            imp.dists[e], state.prev_dist[e], state.thresholds[e], kappa=state.kappa, eps=state.eps
        )
        if decision.prune:
            removed, kind = prune_edge_ops(imp.theta_active[e], ids)
            arch.deactivate_ops(e, removed)
            events.append(PruneEvent(epoch, e, kind, removed, decision.js))
        else:
            state.thresholds[e] = decision.new_threshold
            events.append(PruneEvent(epoch, e, "threshold-inflation", (), decision.js))
    return events


def commit_distributions(arch: ArchParams, state: ImportanceState, imp: EpochImportance) -> None:
    """Store this epoch's distributions as the next comparison baseline,
    re-projected onto the (possibly reduced) active support so the next JS
    compares like with like."""
    for e in range(arch.spec.n_edges):
        p = imp.dists[e]
        ids_now = arch.active_ops(e)
        if p.size != ids_now.size:
            keep = np.isin(imp.op_ids[e], ids_now)
            rest = p[keep]
            total = rest.sum()
            p = rest / total if total > 0 else np.full(rest.size, 1.0 / rest.size)
        state.prev_dist[e] = p


def discretize(
    arch: ArchParams, spec: CellSpec, epoch: int, require_converged: bool = False
) -> tuple[DiscreteGenotype, list[PruneEvent], str]:
    """Select one op per edge (argmax logit among active) and keep the two
    strongest incoming edges per node by normalized edge weight.

    Mutates the arch's edge_active mask and returns the genotype together
    with the edge-reduction events and a warning string ('' if clean).
    """
    warning = ""
    winners: dict[int, int] = {}
    for e in range(spec.n_edges):
        if not arch.edge_active[e]:
            continue
        ids = arch.active_ops(e)
        if require_converged and ids.size != 1:
            raise ValueError(f"edge {e} still has {ids.size} active ops")
        if ids.size != 1:
            warning = "discretized before full operation-level convergence"
        winners[e] = int(ids[int(np.argmax(arch.alpha.data[e, ids]))])

    events: list[PruneEvent] = []
    kept_edges: list[GenotypeEdge] = []
    for j in range(2, spec.n_nodes):
        inc = [e for e in spec.incoming_ids(j) if arch.edge_active[e]]
        if not inc:
            raise ValueError(f"node {j} has no active incoming edges")
        psi = edge_weights(arch.beta.data[inc])
        if len(inc) < 2:
            warning = warning or f"node {j} has fewer than 2 incoming edges; kept all"
            keep = list(inc)
        else:
            order = np.argsort(-psi, kind="stable")  # ties toward lower source index
            keep = [inc[t] for t in order[:2]]
        for e in inc:
            if e in keep:
                src, dst = spec.edges[e]
                kept_edges.append(GenotypeEdge(src, dst, OpKind(winners[e])))
            else:
                arch.edge_active[e] = False
                events.append(PruneEvent(epoch, e, "edge-reduction"))
    kept_edges.sort(key=lambda ge: (ge.dst, ge.src))
    genotype = DiscreteGenotype(spec.n_nodes, spec.n_outputs, tuple(kept_edges))
    return genotype, events, warning
