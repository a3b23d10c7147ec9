"""Patient records, on-disk formats, time discretisation and fold splitting.

On disk a dataset is a JSON manifest next to a gene-set CSV and one binary bag
file per WSI bag and per gene vector. Bag files are little-endian::

    b"M2EB" | u16 version=1 | u16 reserved=0 | u32 rows | u32 cols | rows*cols float32

Values are stored as float32 and widened to float64 when read.
"""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BAG_MAGIC = b"M2EB"
BAG_VERSION = 1
_HEADER = struct.Struct("<4sHHII")

DEFAULT_CATEGORIES = (
    "tumor_suppressor",
    "oncogenesis",
    "protein_kinase",
    "cell_differentiation",
    "transcription",
    "cytokine_growth",
)


class DataFormatError(ValueError):
    """A dataset file is missing, malformed or inconsistent."""


class MissingFileError(DataFormatError):
    pass


class DimensionError(DataFormatError):
    pass


class UnknownCategoryError(DataFormatError):
    pass


class DiscretizationError(ValueError):
    pass


@dataclass(frozen=True)
class PatientRecord:
    id: str
    survival_months: float
    status: int  # 0 = death observed, 1 = alive / censored
    wsi_bag: np.ndarray  # M x d_h
    gene_values: np.ndarray  # n_genes

    @property
    def event(self) -> int:
        return 1 - self.status


@dataclass(frozen=True)
class GeneSetMap:
    names: tuple[str, ...]
    assignment: np.ndarray  # gene index -> category index

    def __post_init__(self):
        counts = np.bincount(self.assignment, minlength=len(self.names))
        if len(counts) > len(self.names) or np.any(counts == 0):
            raise UnknownCategoryError(
                f"gene-set map must use every one of {len(self.names)} categories exactly, "
                f"got per-category counts {counts.tolist()}"
            )

    @property
    def n_sets(self) -> int:
        return len(self.names)

    @property
    def n_genes(self) -> int:
        return len(self.assignment)

    def members(self, category: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == category)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.n_sets).tolist()


@dataclass(frozen=True)
class BinEdges:
    edges: tuple[float, ...]  # K-1 interior cut points

    def __post_init__(self):
        if any(not b > a for a, b in zip(self.edges, self.edges[1:])):
            raise DiscretizationError(f"bin edges must be strictly increasing: {self.edges}")

    @property
    def K(self) -> int:
        return len(self.edges) + 1

    def bin(self, t: float) -> int:
        # right-closed intervals: a time equal to an edge belongs to the lower bin
        return int(np.searchsorted(self.edges, t, side="left"))


@dataclass(frozen=True)
class SurvivalLabel:
    bin: int
    time: float
    event: int  # 1 = death observed


@dataclass
class Dataset:
    records: list[PatientRecord]
    gene_sets: GeneSetMap
    wsi_dim: int
    root: Path | None = None
    _index: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> PatientRecord:
        return self.records[i]

    def by_id(self, patient_id: str) -> PatientRecord:
        if not self._index:
            self._index.update({r.id: i for i, r in enumerate(self.records)})
        try:
            return self.records[self._index[patient_id]]
        except KeyError:
            raise KeyError(f"unknown patient id {patient_id!r}") from None

    @property
    def n_genes(self) -> int:
        return self.gene_sets.n_genes

    def times(self, indices=None) -> np.ndarray:
        recs = self.records if indices is None else [self.records[i] for i in indices]
        return np.array([r.survival_months for r in recs], dtype=np.float64)

    def events(self, indices=None) -> np.ndarray:
        recs = self.records if indices is None else [self.records[i] for i in indices]
        return np.array([r.event for r in recs], dtype=np.int64)


# ---------------------------------------------------------------------------
# bag files


def write_bag(path, matrix) -> None:
    arr = np.asarray(matrix, dtype="<f4")
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BAG_MAGIC, BAG_VERSION, 0, rows, cols))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_bag(path) -> np.ndarray:
    """Read a bag file as a float64 ``rows x cols`` matrix."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"bag file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, reserved, rows, cols = _HEADER.unpack_from(raw)
    if magic != BAG_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {BAG_MAGIC!r}")
    if version != BAG_VERSION or reserved != 0:
        raise DataFormatError(f"{path}: unsupported bag version {version} (reserved={reserved})")
    payload = len(raw) - _HEADER.size
    if payload != rows * cols * 4:
        raise DataFormatError(
            f"{path}: header declares {rows}x{cols} float32 ({rows * cols * 4} bytes) "
            f"but payload has {payload} bytes"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    return data.astype(np.float64)


# ---------------------------------------------------------------------------
# gene-set map


def write_gene_set_map(path, gene_sets: GeneSetMap) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene_index", "category"])
        for i, c in enumerate(gene_sets.assignment):
            w.writerow([i, int(c)])


def read_gene_set_map(path, names=DEFAULT_CATEGORIES) -> GeneSetMap:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"gene-set map not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["gene_index", "category"]:
            raise DataFormatError(f"{path}: expected header 'gene_index,category', got {header}")
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            try:
                gi, cat = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise DataFormatError(f"{path}:{lineno}: malformed row {row}") from None
            if not 0 <= cat < len(names):
                raise UnknownCategoryError(f"{path}:{lineno}: unknown gene category {cat}")
            pairs.append((gi, cat))
    pairs.sort()
    if [gi for gi, _ in pairs] != list(range(len(pairs))):
        raise DataFormatError(f"{path}: gene indices must cover 0..{len(pairs) - 1} exactly once")
    return GeneSetMap(tuple(names), np.array([c for _, c in pairs], dtype=np.int64))


# ---------------------------------------------------------------------------
# manifest


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    root = manifest_path.parent

    for key, kind in (("wsi_dim", int), ("n_genes", int), ("gene_set_map", str), ("patients", list)):
        if not isinstance(manifest.get(key), kind):
            raise DataFormatError(f"{manifest_path}: field {key!r} missing or not {kind.__name__}")
    wsi_dim, n_genes = manifest["wsi_dim"], manifest["n_genes"]
    names = tuple(manifest.get("category_names", DEFAULT_CATEGORIES))
    gene_sets = read_gene_set_map(root / manifest["gene_set_map"], names)
    if gene_sets.n_genes != n_genes:
        raise DimensionError(
            f"gene-set map covers {gene_sets.n_genes} genes but manifest declares n_genes={n_genes}"
        )

    records = []
    for entry in manifest["patients"]:
        pid = str(entry.get("id", "?"))
        try:
            time = float(entry["survival_months"])
            status = int(entry["status"])
            wsi_path, gene_path = root / entry["wsi_bag"], root / entry["gene_values"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"patient {pid}: malformed manifest entry ({exc})") from None
        if not (math.isfinite(time) and time >= 0):
            raise DataFormatError(f"patient {pid}: survival_months must be finite and >= 0, got {time}")
        if status not in (0, 1):
            raise DataFormatError(f"patient {pid}: status must be 0 or 1, got {status}")
        try:
            wsi = read_bag(wsi_path)
            genes = read_bag(gene_path)
        except DataFormatError as exc:
            raise type(exc)(f"patient {pid}: {exc}") from None
        if wsi.shape[0] < 1 or wsi.shape[1] != wsi_dim:
            raise DimensionError(f"patient {pid}: WSI bag is {wsi.shape}, expected M x {wsi_dim} with M >= 1")
        if genes.shape != (1, n_genes):
            raise DimensionError(f"patient {pid}: gene vector is {genes.shape}, expected 1 x {n_genes}")
        records.append(PatientRecord(pid, time, status, wsi, genes[0]))
    return Dataset(records, gene_sets, wsi_dim, root)


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write manifest, gene-set map and bag files; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    write_gene_set_map(out_dir / "gene_sets.csv", dataset.gene_sets)
    patients = []
    for r in dataset.records:
        wsi_rel, gene_rel = f"bags/{r.id}_wsi.bin", f"bags/{r.id}_genes.bin"
        write_bag(out_dir / wsi_rel, r.wsi_bag)
        write_bag(out_dir / gene_rel, r.gene_values)
        patients.append(
            {
                "id": r.id,
                "survival_months": r.survival_months,
                "status": r.status,
                "wsi_bag": wsi_rel,
                "gene_values": gene_rel,
            }
        )
    manifest = {
        "wsi_dim": dataset.wsi_dim,
        "n_genes": dataset.n_genes,
        "gene_set_map": "gene_sets.csv",
        "category_names": list(dataset.gene_sets.names),
        "patients": patients,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


# ---------------------------------------------------------------------------
# labels and folds


def discretize_times(dataset: Dataset, K: int = 4, indices=None) -> tuple[BinEdges, list[SurvivalLabel]]:
    """Quantile bins over uncensored times.

    Edges come from the patients in ``indices`` (all by default); labels are
    returned for every patient in the dataset.
    """
    if K < 1:
        raise DiscretizationError(f"K must be >= 1, got {K}")
    pool = range(len(dataset)) if indices is None else indices
    event_times = np.array([dataset[i].survival_months for i in pool if dataset[i].event == 1])
    if len(event_times) < K:
        raise DiscretizationError(f"need at least {K} uncensored patients, found {len(event_times)}")
    if K > 1:
        if np.all(event_times == event_times[0]):
            raise DiscretizationError("all uncensored event times are equal; cannot form quantile bins")
        cuts = np.quantile(event_times, np.arange(1, K) / K, method="linear")
        edges = BinEdges(tuple(float(c) for c in cuts))
    else:
        edges = BinEdges(())
    labels = [label_for(edges, r) for r in dataset.records]
    return edges, labels


def label_for(edges: BinEdges, record: PatientRecord) -> SurvivalLabel:
    return SurvivalLabel(edges.bin(record.survival_months), record.survival_months, record.event)


def kfold_split(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded k-fold partition of ``range(n)`` into (train, validation) pairs."""
    if not 2 <= k <= n:
        raise ValueError(f"k must satisfy 2 <= k <= {n}, got {k}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i, val in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(val)))
    return out


# ---------------------------------------------------------------------------
# synthetic cohort


@dataclass(frozen=True)
class SynthConfig:
    patients: int = 200
    d_h: int = 32
    n_genes: int = 60
    mean_bag_size: int = 24
    censor_rate: float = 0.3
    signal_strength: float = 1.5
    seed: int = 0
    signal_fraction: float = 0.3  # share of WSI instances carrying the latent risk
    signal_genes: int = 12
    feature_signal: float = 3.0  # amplitude of the latent risk in WSI and gene features (noise sd = 1)
    base_months: float = 30.0

    def validate(self) -> None:
        for name in ("patients", "d_h", "n_genes", "mean_bag_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.censor_rate < 1.0:
            raise ValueError(f"censor_rate must lie in [0, 1), got {self.censor_rate}")
        if self.n_genes < len(DEFAULT_CATEGORIES):
            raise ValueError(f"n_genes must be at least {len(DEFAULT_CATEGORIES)} to fill every category")
        if not 0.0 < self.signal_fraction <= 1.0:
            raise ValueError(f"signal_fraction must lie in (0, 1], got {self.signal_fraction}")


def synth_cohort(cfg: SynthConfig) -> tuple[Dataset, np.ndarray]:
    """Generate a cohort with a planted risk; returns the dataset and the latent risks."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.patients

    direction = rng.standard_normal(cfg.d_h)
    direction /= np.linalg.norm(direction)
    n_signal_genes = min(cfg.signal_genes, cfg.n_genes)
    signal_genes = rng.choice(cfg.n_genes, size=n_signal_genes, replace=False)
    gene_loadings = rng.choice([-1.0, 1.0], size=n_signal_genes)

    z = rng.standard_normal(n)
    raw_times = rng.exponential(1.0, size=n) / np.exp(cfg.signal_strength * z) * cfg.base_months
    if cfg.censor_rate > 0:
        cutoff = float(np.quantile(raw_times, 1.0 - cfg.censor_rate))
        status = (raw_times > cutoff).astype(int)
        times = np.minimum(raw_times, cutoff)
    else:
        status = np.zeros(n, dtype=int)
        times = raw_times

    records = []
    width = len(str(n - 1))
    for i in range(n):
        m = max(1, int(rng.poisson(cfg.mean_bag_size)))
        bag = rng.standard_normal((m, cfg.d_h))
        n_sig = max(1, int(round(cfg.signal_fraction * m)))
        sig_rows = rng.choice(m, size=n_sig, replace=False)
        bag[sig_rows] += cfg.feature_signal * z[i] * direction

        genes = rng.standard_normal(cfg.n_genes)
        genes[signal_genes] += cfg.feature_signal * z[i] * gene_loadings

        # bags are rounded to float32 so the in-memory cohort equals what load_dataset reads
        records.append(
            PatientRecord(
                id=f"P{i:0{width}d}",
                survival_months=float(times[i]),
                status=int(status[i]),
                wsi_bag=bag.astype(np.float32).astype(np.float64),
                gene_values=genes.astype(np.float32).astype(np.float64),
            )
        )
    assignment = np.arange(cfg.n_genes) % len(DEFAULT_CATEGORIES)
    gene_sets = GeneSetMap(DEFAULT_CATEGORIES, assignment)
    return Dataset(records, gene_sets, cfg.d_h), z


def synth_generate(cfg: SynthConfig, out_dir) -> Dataset:
    dataset, _ = synth_cohort(cfg)
    save_dataset(dataset, _ensure_dir(out_dir))
    dataset.root = Path(out_dir)
    return dataset


def cohort_summary(dataset: Dataset) -> dict:
    sizes = np.array([r.wsi_bag.shape[0] for r in dataset.records])
    status = np.array([r.status for r in dataset.records])
    return {
        "patients": len(dataset),
        "censor_rate": float(status.mean()) if len(status) else 0.0,
        "bag_size_min": int(sizes.min()),
        "bag_size_mean": float(sizes.mean()),
        "bag_size_max": int(sizes.max()),
        "wsi_dim": dataset.wsi_dim,
        "n_genes": dataset.n_genes,
    }


def _ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory is not writable: {path}")
    return path
