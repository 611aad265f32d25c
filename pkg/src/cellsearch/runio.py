"""Configuration and persistence: JSON config/genotype/metrics with pinned
schemas, the raw-float32 dataset cache, and npz weight stores.

All randomness in a run flows from the single config seed through named
sub-streams (data, weights, masks, batch order), so a persisted config
re-loads to an identical run.  Genotype and config files are versioned and
strict: unknown fields are rejected with a versioned message.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cell import CellSpec, DiscreteGenotype, GenotypeEdge
from .ops import OP_LABELS, op_from_label
from .search import SearchConfig
from .task import SegDataset, SynthVolume

__all__ = [
    "SCHEMA_VERSION",
    "DatasetConfig",
    "PretrainConfig",
    "FinalConfig",
    "RunConfig",
    "reference_config",
    "save_config",
    "load_config",
    "save_genotype",
    "load_genotype",
    "save_metrics",
    "load_metrics",
    "save_dataset_cache",
    "load_dataset_cache",
    "save_arrays",
    "load_arrays",
    "export_metrics",
]

SCHEMA_VERSION = 1


def _strict_kwargs(cls, payload: dict, context: str) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValueError(f"{context} (schema v{SCHEMA_VERSION}): unknown field(s) {unknown}")
    return payload


@dataclass(frozen=True)
class DatasetConfig:
    n_patients: int = 15
    slices_per_patient: int = 6
    height: int = 16
    width: int = 16
    n_foreground: int = 2


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 200
    lr: float = 0.001
    batch_size: int = 8


@dataclass(frozen=True)
class FinalConfig:
    epochs: int = 200
    lr: float = 0.001
    batch_size: int = 8


@dataclass(frozen=True)
class CellConfig:
    n_nodes: int = 6
    n_outputs: int = 4
    internal_channels: int = 8
    k_divisor: int = 4

    def to_spec(self) -> CellSpec:
        return CellSpec(self.n_nodes, self.n_outputs, self.internal_channels, self.k_divisor)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    cell: CellConfig = field(default_factory=CellConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    final: FinalConfig = field(default_factory=FinalConfig)

    def with_overrides(self, seed: int | None = None, mode: str | None = None) -> "RunConfig":
        new_seed = self.seed if seed is None else int(seed)
        sfields = dataclasses.asdict(self.search)
        sfields["seed"] = new_seed
        if mode is not None:
            sfields["mode"] = mode
        return dataclasses.replace(self, seed=new_seed, search=SearchConfig(**sfields))


def reference_config(seed: int = 0, mode: str = "lth") -> RunConfig:
    """The pinned desk-scale configuration used by the acceptance runs."""
    return RunConfig(seed=seed).with_overrides(seed=seed, mode=mode)


def save_config(config: RunConfig, path) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **dataclasses.asdict(config)}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_config(path) -> RunConfig:
    payload = json.loads(Path(path).read_text())
    version = payload.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ValueError(f"config schema v{SCHEMA_VERSION} expected, file says {version!r}")
    sections = {
        "dataset": DatasetConfig,
        "cell": CellConfig,
        "pretrain": PretrainConfig,
        "search": SearchConfig,
        "final": FinalConfig,
    }
    kwargs = {}
    for key, value in _strict_kwargs(RunConfig, payload, "config").items():
        if key in sections:
            kwargs[key] = sections[key](**_strict_kwargs(sections[key], value, f"config.{key}"))
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


# ---------------------------------------------------------------------------
# genotype JSON
# ---------------------------------------------------------------------------


def save_genotype(genotype: DiscreteGenotype, path) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "n_nodes": genotype.n_nodes,
        "n_outputs": genotype.n_outputs,
        "edges": [
            {"src": e.src, "dst": e.dst, "op": OP_LABELS[e.op]} for e in genotype.edges
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_genotype(path) -> DiscreteGenotype:
    payload = json.loads(Path(path).read_text())
    version = payload.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ValueError(f"genotype schema v{SCHEMA_VERSION} expected, file says {version!r}")
    unknown = sorted(set(payload) - {"n_nodes", "n_outputs", "edges"})
    if unknown:
        raise ValueError(f"genotype (schema v{SCHEMA_VERSION}): unknown field(s) {unknown}")
    edges = []
    for item in payload["edges"]:
        bad = sorted(set(item) - {"src", "dst", "op"})
        if bad:
            raise ValueError(f"genotype edge (schema v{SCHEMA_VERSION}): unknown field(s) {bad}")
        edges.append(GenotypeEdge(int(item["src"]), int(item["dst"]), op_from_label(item["op"])))
    return DiscreteGenotype(int(payload["n_nodes"]), int(payload["n_outputs"]), tuple(edges))


# ---------------------------------------------------------------------------
# metrics JSON
# ---------------------------------------------------------------------------


def save_metrics(metrics: dict, path) -> None:
    Path(path).write_text(json.dumps({"schema_version": SCHEMA_VERSION, **metrics}, indent=2) + "\n")


def load_metrics(path) -> dict:
    payload = json.loads(Path(path).read_text())
    payload.pop("schema_version", None)
    return payload


# ---------------------------------------------------------------------------
# dataset cache: raw little-endian float32 blobs + JSON index
# ---------------------------------------------------------------------------


def save_dataset_cache(dataset: SegDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    patients = []
    for split, volumes in dataset.splits.items():
        for vol in volumes:
            (directory / f"{vol.patient_id}_images.f32").write_bytes(
                vol.images.astype("<f4").tobytes()
            )
            (directory / f"{vol.patient_id}_masks.f32").write_bytes(
                vol.masks.astype("<f4").tobytes()
            )
            patients.append(
                {"id": vol.patient_id, "split": split, "n_slices": int(vol.images.shape[0])}
            )
    index = {
        "schema_version": SCHEMA_VERSION,
        "seed": dataset.seed,
        "n_classes": dataset.n_classes,
        "height": dataset.height,
        "width": dataset.width,
        "patients": patients,
    }
    (directory / "index.json").write_text(json.dumps(index, indent=2) + "\n")


def load_dataset_cache(directory) -> SegDataset:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"dataset index not found: {index_path}")
    index = json.loads(index_path.read_text())
    if index.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"dataset schema v{SCHEMA_VERSION} expected")
    h, w, n_classes = index["height"], index["width"], index["n_classes"]
    splits: dict[str, list[SynthVolume]] = {"train": [], "val": [], "test": []}
    for entry in index["patients"]:
        n = entry["n_slices"]
        images = np.frombuffer(
            (directory / f"{entry['id']}_images.f32").read_bytes(), dtype="<f4"
        ).reshape(n, 1, h, w).astype(np.float64)
        masks = np.frombuffer(
            (directory / f"{entry['id']}_masks.f32").read_bytes(), dtype="<f4"
        ).reshape(n, n_classes, h, w).astype(np.float64)
        splits[entry["split"]].append(SynthVolume(entry["id"], images, masks))
    return SegDataset(
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        n_classes=n_classes,
        height=h,
        width=w,
        seed=index["seed"],
    )


# ---------------------------------------------------------------------------
# weight stores
# ---------------------------------------------------------------------------


def save_arrays(named: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    payload = dict(named)
    payload["__meta__"] = np.array(json.dumps(meta or {}))
    np.savez(path, **payload)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return arrays, meta


# ---------------------------------------------------------------------------
# consolidated metrics export
# ---------------------------------------------------------------------------


def export_metrics(run_dir, baseline_dir=None) -> dict:
    """Merge a run's search/final metrics; add speed_up only when a baseline
    run is referenced (never fabricated)."""
    run_dir = Path(run_dir)
    out = {"run_dir": str(run_dir)}
    search_path = run_dir / "metrics.json"
    if not search_path.exists():
        raise FileNotFoundError(f"missing search metrics: {search_path}")
    out["search"] = load_metrics(search_path)
    finals = {}
    for sub in sorted(run_dir.glob("final-*")):
        fm = sub / "metrics.json"
        if fm.exists():
            finals[sub.name.removeprefix("final-")] = load_metrics(fm)
    if finals:
        out["final"] = finals
    if baseline_dir is not None:
        base = load_metrics(Path(baseline_dir) / "metrics.json")
        out["baseline"] = base
        wall = out["search"].get("wall_time_s")
        base_wall = base.get("wall_time_s")
        if wall and base_wall:
            out["speed_up"] = base_wall / wall
    return out
