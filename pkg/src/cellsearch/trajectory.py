"""Per-epoch search trajectory and its CSV round-trip.

One row per (epoch, edge, op) with columns
``epoch, edge_src, edge_dst, op, alpha, beta, theta, p, js_of_edge,
theta_threshold, event``.  Rows are strictly ordered by (epoch, edge, op);
the edge order is the pinned (dst, src) order and ops follow the fixed
candidate order.  ``theta`` and ``p`` are zero for inactive (edge, op)
entries; ``theta_threshold`` is the threshold in force when the epoch's
stability decision was made.  Pruning events are encoded in the ``event``
column: op-level kinds (``outlier``/``fallback``) on the removed op's row,
edge-level kinds (``threshold-inflation``/``edge-reduction``) on every row
of the edge, joined with ';' when they coincide.  Floats are written with
17 significant digits so the file round-trips float64 exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .cell import CellSpec
from .ops import CANDIDATE_OPS, OP_LABELS, op_from_label
from .pruner import PruneEvent

__all__ = ["EpochRecord", "TrajectoryLog", "CSV_COLUMNS"]

CSV_COLUMNS = (
    "epoch",
    "edge_src",
    "edge_dst",
    "op",
    "alpha",
    "beta",
    "theta",
    "p",
    "js_of_edge",
    "theta_threshold",
    "event",
)

_OP_EVENT_KINDS = ("outlier", "fallback")
_EDGE_EVENT_KINDS = ("threshold-inflation", "edge-reduction")


@dataclass
class EpochRecord:
    epoch: int
    alpha: np.ndarray  # (n_edges, n_ops)
    beta: np.ndarray  # (n_edges,)
    theta: np.ndarray  # (n_edges, n_ops), inactive entries 0
    p: np.ndarray  # (n_edges, n_ops), inactive entries 0
    js: np.ndarray  # (n_edges,)
    thresholds: np.ndarray  # (n_edges,)
    active: np.ndarray  # (n_edges, n_ops) bool, before this epoch's prunes
    events: list[PruneEvent] = field(default_factory=list)


class TrajectoryLog:
    """Ordered per-epoch records of the architecture parameters and events."""

    def __init__(self, spec: CellSpec):
        self.spec = spec
        self.records: list[EpochRecord] = []

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(record)

    @property
    def epochs(self) -> list[int]:
        return [r.epoch for r in self.records]

    @property
    def events(self) -> list[PruneEvent]:
        out = []
        for r in self.records:
            out.extend(r.events)
        return out

    def record(self, epoch: int) -> EpochRecord:
        for r in self.records:
            if r.epoch == epoch:
                return r
        raise KeyError(f"epoch {epoch} not logged")

    def final_active(self) -> np.ndarray:
        """(n_edges, n_ops) active mask after the last epoch's op prunes."""
        last = self.records[-1]
        active = last.active.copy()
        for ev in last.events:
            for o in ev.ops_removed:
                active[ev.edge, o] = False
        return active

    def final_edge_active(self) -> np.ndarray:
        """(n_edges,) edge mask after final edge reduction."""
        mask = np.ones(self.spec.n_edges, dtype=bool)
        for ev in self.events:
            if ev.kind == "edge-reduction":
                mask[ev.edge] = False
        return mask

    # -- CSV codec ---------------------------------------------------------

    def to_csv(self, path) -> None:
        spec = self.spec
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for rec in self.records:
                op_tags = {}
                edge_tags: dict[int, list[str]] = {}
                for ev in rec.events:
                    if ev.kind in _OP_EVENT_KINDS:
                        for o in ev.ops_removed:
                            op_tags[(ev.edge, o)] = ev.kind
                    else:
                        edge_tags.setdefault(ev.edge, []).append(ev.kind)
                for e, (src, dst) in enumerate(spec.edges):
                    for kind in CANDIDATE_OPS:
                        o = int(kind)
                        tags = []
                        if (e, o) in op_tags:
                            tags.append(op_tags[(e, o)])
                        tags.extend(edge_tags.get(e, []))
                        writer.writerow(
                            [
                                rec.epoch,
                                src,
                                dst,
                                OP_LABELS[kind],
                                f"{rec.alpha[e, o]:.17g}",
                                f"{rec.beta[e]:.17g}",
                                f"{rec.theta[e, o]:.17g}",
                                f"{rec.p[e, o]:.17g}",
                                f"{rec.js[e]:.17g}",
                                f"{rec.thresholds[e]:.17g}",
                                ";".join(tags),
                            ]
                        )

    @classmethod
    def from_csv(cls, path, spec: CellSpec) -> "TrajectoryLog":
        log = cls(spec)
        edge_index = {edge: e for e, edge in enumerate(spec.edges)}
        by_epoch: dict[int, dict] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError(f"unexpected trajectory columns: {reader.fieldnames}")
            for row in reader:
                epoch = int(row["epoch"])
                e = edge_index[(int(row["edge_src"]), int(row["edge_dst"]))]
                o = int(op_from_label(row["op"]))
                slot = by_epoch.setdefault(
                    epoch,
                    {
                        "alpha": np.zeros((spec.n_edges, spec.n_ops)),
                        "beta": np.zeros(spec.n_edges),
                        "theta": np.zeros((spec.n_edges, spec.n_ops)),
                        "p": np.zeros((spec.n_edges, spec.n_ops)),
                        "js": np.zeros(spec.n_edges),
                        "thresholds": np.zeros(spec.n_edges),
                        "op_tags": {},
                        "edge_tags": {},
                    },
                )
                slot["alpha"][e, o] = float(row["alpha"])
                slot["beta"][e] = float(row["beta"])
                slot["theta"][e, o] = float(row["theta"])
                slot["p"][e, o] = float(row["p"])
                slot["js"][e] = float(row["js_of_edge"])
                slot["thresholds"][e] = float(row["theta_threshold"])
                for tag in filter(None, row["event"].split(";")):
                    if tag in _OP_EVENT_KINDS:
                        slot["op_tags"][(e, o)] = tag
                    elif tag in _EDGE_EVENT_KINDS:
                        slot["edge_tags"].setdefault(e, set()).add(tag)
                    else:
                        raise ValueError(f"unknown event tag {tag!r}")

        active = np.ones((spec.n_edges, spec.n_ops), dtype=bool)
        for epoch in sorted(by_epoch):
            slot = by_epoch[epoch]
            events: list[PruneEvent] = []
            for e in range(spec.n_edges):
                removed = sorted(o for (ee, o), _ in slot["op_tags"].items() if ee == e)
                if removed:
                    kind = slot["op_tags"][(e, removed[0])]
                    events.append(PruneEvent(epoch, e, kind, tuple(removed), slot["js"][e]))
                for tag in sorted(slot["edge_tags"].get(e, ())):
                    js = slot["js"][e] if tag == "threshold-inflation" else float("nan")
                    events.append(PruneEvent(epoch, e, tag, (), js))
            events.sort(key=lambda ev: (ev.edge, ev.kind))
            log.append(
                EpochRecord(
                    epoch=epoch,
                    alpha=slot["alpha"],
                    beta=slot["beta"],
                    theta=slot["theta"],
                    p=slot["p"],
                    js=slot["js"],
                    thresholds=slot["thresholds"],
                    active=active.copy(),
                    events=events,
                )
            )
            for ev in events:
                for o in ev.ops_removed:
                    active[ev.edge, o] = False
        return log
