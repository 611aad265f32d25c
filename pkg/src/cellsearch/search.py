"""Stage II search (single-level accelerated mode and bilevel baseline mode)
and Stage III final training of the discovered discrete cell.

Both modes share the supernet: one cell instance per skip level with
per-instance weights and a single shared set of architecture parameters.
The accelerated mode trains cell weights (SGD) and architecture parameters
(Adam) jointly on the full training set and runs the stability pruner after
every epoch until each edge holds one op, then reduces every node to its
two strongest incoming edges.  The baseline mode splits the training set in
half once, alternates weight updates on one half with architecture updates
on the other for a fixed number of epochs, and discretizes at the end.

Stage III instantiates the discrete cell at full width (no channel masks)
and trains only cell weights; ``lth_reset`` restores the surviving weights
bit-exactly from the start-of-search snapshot, ``reinit`` draws fresh ones.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from itertools import cycle

import numpy as np

from .autodiff import Tensor, adam_step, backward, sgd_step, zero_grads
from .backbone import UNetBackbone, evaluate_model
from .cell import (
    ArchParams,
    CellSpec,
    CellWeights,
    ChannelMask,
    DiscreteGenotype,
    cell_forward,
    discrete_cell_forward,
    sample_channel_masks,
)
from .pruner import (
    ImportanceState,
    PruneEvent,
    apply_stability,
    commit_distributions,
    discretize,
    epoch_importance,
    is_converged,
)
from .seeding import rng_stream
from .task import SegDataset, SynthVolume, segmentation_loss, stack_slices
from .trajectory import EpochRecord, TrajectoryLog

__all__ = [
    "SearchConfig",
    "SearchResult",
    "FinalTrainResult",
    "run_search",
    "train_final",
    "build_cells",
]

_EVENT_SORT = lambda ev: (ev.edge, ev.kind)


@dataclass(frozen=True)
class SearchConfig:
    """Stage II settings; epochs count from 1 and include the warm-up."""

    mode: str = "lth"
    seed: int = 0
    warmup_epochs: int = 15
    max_epochs: int = 200
    lr_w: float = 0.01  # SGD on cell weights, no momentum, no decay
    lr_ab: float = 0.001  # Adam on architecture parameters
    batch_size: int = 8
    theta0: float = 1.0
    kappa: float = 2.0
    eps: float = 1e-6
    edge_prune_mid_search: bool = False

    def __post_init__(self):
        if self.mode not in ("lth", "baseline"):
            raise ValueError(f"mode must be 'lth' or 'baseline', got {self.mode!r}")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ValueError("need 0 <= warmup_epochs < max_epochs")
        if min(self.lr_w, self.lr_ab, self.theta0, self.eps) <= 0 or self.kappa < 1:
            raise ValueError("rates, theta0, eps must be positive and kappa >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Batch:
    images: np.ndarray
    targets: np.ndarray
    origin: str


def _batches(images, targets, batch_size, rng, origin) -> list[Batch]:
    order = rng.permutation(images.shape[0])
    return [
        Batch(images[order[lo : lo + batch_size]], targets[order[lo : lo + batch_size]], origin)
        for lo in range(0, len(order), batch_size)
    ]


@dataclass
class SearchResult:
    genotype: DiscreteGenotype
    trajectory: TrajectoryLog
    epochs_used: int
    wall_time_s: float
    converged: bool
    warning: str
    arch: ArchParams
    cells: list[CellWeights]
    masks: list[list[ChannelMask]]
    snapshot: dict[str, np.ndarray]
    config: SearchConfig


def build_cells(
    spec: CellSpec, backbone: UNetBackbone, seed: int
) -> tuple[list[CellWeights], list[list[ChannelMask]]]:
    """One cell instance per skip level (own weights, own channel masks)."""
    wrng = rng_stream(seed, "cell-weights")
    mrng = rng_stream(seed, "masks")
    cells, masks = [], []
    for level, (skip_c, up_c) in enumerate(zip(backbone.skip_channels, backbone.up_channels)):
        cells.append(CellWeights(spec, skip_c, up_c, skip_c, wrng, name=f"cell{level}"))
        masks.append(sample_channel_masks(spec, mrng))
    return cells, masks


def _cell_params(cells: list[CellWeights]):
    out = []
    for c in cells:
        out.extend(c.params())
    return out


def _supernet_forward(backbone, cells, masks, arch, images) -> Tensor:
    def skip_fn(level, skip_t, up_t):
        return cell_forward(skip_t, up_t, arch, cells[level], masks[level])

    return backbone.forward(images, skip_fn=skip_fn)


def _log_epoch(log, epoch, arch, imp, state, events) -> None:
    spec = arch.spec
    theta = np.zeros((spec.n_edges, spec.n_ops))
    p = np.zeros((spec.n_edges, spec.n_ops))
    active = np.zeros((spec.n_edges, spec.n_ops), dtype=bool)
    for e in range(spec.n_edges):
        ids = imp.op_ids[e]
        theta[e, ids] = imp.theta_active[e]
        p[e, ids] = imp.dists[e]
        active[e, ids] = True
    log.append(
        EpochRecord(
            epoch=epoch,
            alpha=arch.alpha.data.copy(),
            beta=arch.beta.data.copy(),
            theta=theta,
            p=p,
            js=imp.js.copy(),
            thresholds=state.thresholds.copy(),
            active=active,
            events=sorted(events, key=_EVENT_SORT),
        )
    )


def run_search(
    config: SearchConfig, backbone: UNetBackbone, dataset: SegDataset, spec: CellSpec = CellSpec()
) -> SearchResult:
    """Run Stage II in the configured mode against a frozen backbone."""
    if not backbone.frozen:
        raise ValueError("backbone must be frozen before search")
    if config.edge_prune_mid_search:
        raise NotImplementedError("mid-search edge pruning is reserved; keep the flag disabled")

    start = time.perf_counter()
    arch = ArchParams(spec)
    cells, masks = build_cells(spec, backbone, config.seed)
    snapshot: dict[str, np.ndarray] = {}
    for c in cells:
        snapshot.update(c.snapshot())
    state = ImportanceState.fresh(spec, theta0=config.theta0, kappa=config.kappa, eps=config.eps)
    log = TrajectoryLog(spec)
    order_rng = rng_stream(config.seed, "search-order")

    cell_params = _cell_params(cells)
    arch_params = arch.params()

    images, targets = stack_slices(dataset.train)
    if config.mode == "baseline":
        # one-time patient-wise halving of the training split; the weight
        # stream never touches the val_search half (warm-up included)
        split_rng = rng_stream(config.seed, "search-split")
        perm = split_rng.permutation(len(dataset.train))
        half = len(dataset.train) // 2
        tr_vols = [dataset.train[i] for i in sorted(perm[:half])]
        val_vols = [dataset.train[i] for i in sorted(perm[half:])]
        tr_images, tr_targets = stack_slices(tr_vols)
        val_images, val_targets = stack_slices(val_vols)
        warm_images, warm_targets, warm_origin = tr_images, tr_targets, "train_search"
    else:
        warm_images, warm_targets, warm_origin = images, targets, "train"

    def _loss_on(batch: Batch) -> Tensor:
        logits = _supernet_forward(backbone, cells, masks, arch, batch.images)
        loss = segmentation_loss(logits, batch.targets)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"non-finite search loss (mode={config.mode})")
        return loss

    epoch = 0
    converged = False
    warning = ""
    genotype = None

    while epoch < config.max_epochs:
        epoch += 1
        if epoch <= config.warmup_epochs:
            # warm-up: only cell weights move; architecture logits stay constant
            for batch in _batches(warm_images, warm_targets, config.batch_size, order_rng, warm_origin):
                loss = _loss_on(batch)
                backward(loss)
                sgd_step(cell_params, config.lr_w)
                zero_grads(arch_params)
        elif config.mode == "lth":
            # one forward/backward yields both gradient sets; weights step first
            for batch in _batches(images, targets, config.batch_size, order_rng, "train"):
                assert batch.origin == "train"
                loss = _loss_on(batch)
                backward(loss)
                sgd_step(cell_params, config.lr_w)
                adam_step(arch_params, config.lr_ab)
        else:
            tr_batches = _batches(tr_images, tr_targets, config.batch_size, order_rng, "train_search")
            val_batches = _batches(val_images, val_targets, config.batch_size, order_rng, "val_search")
            val_iter = cycle(val_batches)
            for tb in tr_batches:
                assert tb.origin == "train_search"
                loss = _loss_on(tb)
                backward(loss)
                sgd_step(cell_params, config.lr_w)
                zero_grads(arch_params)
                vb = next(val_iter)
                assert vb.origin == "val_search"
                loss = _loss_on(vb)
                backward(loss)
                adam_step(arch_params, config.lr_ab)
                zero_grads(cell_params)

        imp = epoch_importance(arch, state)
        events: list[PruneEvent] = []
        searching = config.mode == "lth" and epoch > config.warmup_epochs
        if searching:
            events = apply_stability(arch, state, imp, epoch)
        commit_distributions(arch, state, imp)

        finished = False
        if searching and is_converged(arch):
            converged = True
            finished = True
        if epoch == config.max_epochs and not finished:
            finished = True
            if config.mode == "lth":
                warning = "stopped at max_epochs before operation-level convergence"

        if finished:
            genotype, red_events, d_warning = discretize(arch, spec, epoch)
            if config.mode == "lth":
                warning = warning or d_warning
            events = events + red_events
            _log_epoch(log, epoch, arch, imp, state, events)
            break
        _log_epoch(log, epoch, arch, imp, state, events)

    zero_grads(cell_params + arch_params)
    return SearchResult(
        genotype=genotype,
        trajectory=log,
        epochs_used=epoch,
        wall_time_s=time.perf_counter() - start,
        converged=converged,
        warning=warning,
        arch=arch,
        cells=cells,
        masks=masks,
        snapshot=snapshot,
        config=config,
    )


# ---------------------------------------------------------------------------
# Stage III
# ---------------------------------------------------------------------------


@dataclass
class FinalTrainResult:
    genotype: DiscreteGenotype
    init_policy: str
    cells: list[CellWeights]
    best_epoch: int
    best_val_dice: float
    test_mean_fg_dice: float
    test_per_class: dict[int, float]
    wall_time_s: float
    train_losses: list[float] = field(default_factory=list)


def train_final(
    genotype: DiscreteGenotype,
    backbone: UNetBackbone,
    dataset: SegDataset,
    spec: CellSpec,
    init_policy: str,
    seed: int,
    snapshot: dict[str, np.ndarray] | None = None,
    arch: ArchParams | None = None,
    epochs: int = 200,
    lr: float = 0.001,
    batch_size: int = 8,
) -> FinalTrainResult:
    """Stage III: train only the discrete cell's weights at full width.

    ``lth_reset`` restores every surviving weight bit-exactly from the
    start-of-search snapshot; ``reinit`` keeps a fresh random draw.
    """
    if init_policy not in ("reinit", "lth_reset"):
        raise ValueError(f"init_policy must be 'reinit' or 'lth_reset', got {init_policy!r}")
    if not backbone.frozen:
        raise ValueError("backbone must be frozen for final training")
    if init_policy == "lth_reset" and snapshot is None:
        raise ValueError("lth_reset requires the start-of-search weight snapshot")
    if arch is not None:
        for ge in genotype.edges:
            e = spec.edge_id(ge.src, ge.dst)
            if not arch.active[e, int(ge.op)]:
                raise ValueError(
                    f"genotype references pruned op {ge.op.name} on edge ({ge.src}, {ge.dst})"
                )

    start = time.perf_counter()
    wrng = rng_stream(seed, "final-reinit")
    cells = []
    for level, (skip_c, up_c) in enumerate(zip(backbone.skip_channels, backbone.up_channels)):
        cw = CellWeights(spec, skip_c, up_c, skip_c, wrng, name=f"cell{level}")
        if init_policy == "lth_reset":
            cw.restore(snapshot)
        cells.append(cw)

    def forward(batch_images):
        def skip_fn(level, skip_t, up_t):
            return discrete_cell_forward(skip_t, up_t, genotype, cells[level])

        return backbone.forward(batch_images, skip_fn=skip_fn)

    params = _cell_params(cells)
    images, targets = stack_slices(dataset.train)
    order_rng = rng_stream(seed, "final-order")
    best = (-1.0, 0, None)
    losses = []
    for epoch in range(1, epochs + 1):
        order = order_rng.permutation(images.shape[0])
        epoch_loss = 0.0
        for lo in range(0, len(order), batch_size):
            sel = order[lo : lo + batch_size]
            loss = segmentation_loss(forward(images[sel]), targets[sel])
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite final-training loss at epoch {epoch}")
            backward(loss)
            adam_step(params, lr)
            epoch_loss += float(loss.data) * len(sel)
        losses.append(epoch_loss / len(order))
        _, val_dice, _ = evaluate_model(forward, dataset.val, dataset.n_classes, batch_size)
        if val_dice > best[0]:
            best = (val_dice, epoch, {p.name: p.data.copy() for p in params})
    if best[2] is not None:
        for p in params:
            p.data = best[2][p.name].copy()
    _, test_mean, test_per_class = evaluate_model(forward, dataset.test, dataset.n_classes, batch_size)
    zero_grads(params)
    return FinalTrainResult(
        genotype=genotype,
        init_policy=init_policy,
        cells=cells,
        best_epoch=best[1],
        best_val_dice=best[0],
        test_mean_fg_dice=test_mean,
        test_per_class=test_per_class,
        wall_time_s=time.perf_counter() - start,
        train_losses=losses,
    )
