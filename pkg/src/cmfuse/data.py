"""Cohorts on disk and in memory, fold-local preprocessing, CV splits, synthetic data.

On-disk layout (all paths relative to the manifest)::

    manifest.yaml       n_patients, n_genes, image_dim, seed, omics, labels, bags
    omics.csv           patient_id,<gene ids...>   one row per patient
    labels.csv          patient_id,time_days,censored (censored in {0,1})
    bags/<id>.cmf       b"CMF1", u32 K, u32 dim, then K*dim little-endian float32
"""

from __future__ import annotations

import csv
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .encoders import IMAGE_DIM
from .survival import SurvivalLabel

log = logging.getLogger(__name__)

BAG_MAGIC = b"CMF1"
_BAG_HEADER = struct.Struct("<4sII")


class CohortLoadError(RuntimeError):
    pass


@dataclass
class PatientRecord:
    patient_id: str
    bag: np.ndarray | None  # (K, image_dim) float32
    omics: np.ndarray | None  # (G,) float64
    label: SurvivalLabel


@dataclass
class Cohort:
    records: list[PatientRecord]
    gene_ids: list[str]
    image_dim: int = IMAGE_DIM
    latent_risk: np.ndarray | None = None
    latent_image: np.ndarray | None = None
    latent_omics: np.ndarray | None = None

    def __post_init__(self):
        ids = [r.patient_id for r in self.records]
        dupes = [pid for pid, c in Counter(ids).items() if c > 1]
        if dupes:
            raise CohortLoadError(f"duplicate patient ids: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    @property
    def ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def by_id(self) -> dict[str, PatientRecord]:
        return {r.patient_id: r for r in self.records}


# --------------------------------------------------------------------------- files


def write_bag(path: str | Path, instances: np.ndarray) -> None:
    arr = np.ascontiguousarray(instances, dtype="<f4")
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"bag must be a non-empty 2-D array, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_BAG_HEADER.pack(BAG_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_bag(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _BAG_HEADER.size:
        raise CohortLoadError(f"{path}: truncated bag header")
    magic, k, dim = _BAG_HEADER.unpack_from(raw)
    if magic != BAG_MAGIC:
        raise CohortLoadError(f"{path}: bad magic {magic!r}")
    expected = _BAG_HEADER.size + 4 * k * dim
    if len(raw) != expected or k == 0:
        raise CohortLoadError(f"{path}: header says {k}x{dim} but file has {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=_BAG_HEADER.size).reshape(k, dim).astype(np.float32)


@dataclass
class CohortManifest:
    root: Path
    n_patients: int
    n_genes: int = 154
    image_dim: int = IMAGE_DIM
    omics: str = "omics.csv"
    labels: str = "labels.csv"
    bags: dict[str, str] = field(default_factory=dict)
    seed: int | None = None
    reads: Counter = field(default_factory=Counter, repr=False)

    @classmethod
    def load(cls, path: str | Path) -> CohortManifest:
        path = Path(path)
        if not path.is_file():
            raise CohortLoadError(f"manifest not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
        try:
            return cls(root=path.parent, n_patients=int(doc["n_patients"]),
                       n_genes=int(doc.get("n_genes", 154)),
                       image_dim=int(doc.get("image_dim", IMAGE_DIM)),
                       omics=doc.get("omics", "omics.csv"), labels=doc.get("labels", "labels.csv"),
                       bags={str(k): str(v) for k, v in (doc.get("bags") or {}).items()},
                       seed=doc.get("seed"))
        except KeyError as exc:
            raise CohortLoadError(f"{path}: manifest missing field {exc}") from None

    def dump(self, path: str | Path) -> None:
        doc = {"n_patients": self.n_patients, "n_genes": self.n_genes, "image_dim": self.image_dim,
               "seed": self.seed, "omics": self.omics, "labels": self.labels, "bags": self.bags}
        Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))

    def resolve(self, rel: str) -> Path:
        p = self.root / rel
        if not p.is_file():
            raise CohortLoadError(f"missing file: {p}")
        return p


def _read_labels(path: Path) -> dict[str, SurvivalLabel]:
    labels = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pid = row["patient_id"]
            if pid in labels:
                raise CohortLoadError(f"{path}: duplicate patient id {pid!r}")
            labels[pid] = SurvivalLabel(float(row["time_days"]), row["censored"].strip() == "1")
    return labels


def _read_omics(path: Path, n_genes: int) -> tuple[list[str], dict[str, np.ndarray]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        genes = header[1:]
        if len(genes) != n_genes:
            raise CohortLoadError(f"{path}: {len(genes)} gene columns, manifest says {n_genes}")
        table = {}
        for row in reader:
            if row[0] in table:
                raise CohortLoadError(f"{path}: duplicate patient id {row[0]!r}")
            if len(row) != n_genes + 1:
                raise CohortLoadError(f"{path}: row {row[0]!r} has {len(row) - 1} values")
            table[row[0]] = np.array(row[1:], dtype=np.float64)
    return genes, table


def load_cohort(manifest: CohortManifest | str | Path,
                modalities: Sequence[str] = ("image", "omics")) -> Cohort:
    """Materialize the cohort, reading only the requested modalities' files."""
    if not isinstance(manifest, CohortManifest):
        manifest = CohortManifest.load(manifest)
    manifest.reads["labels"] += 1
    labels = _read_labels(manifest.resolve(manifest.labels))
    if len(labels) != manifest.n_patients:
        raise CohortLoadError(f"labels list {len(labels)} patients, manifest says {manifest.n_patients}")
    genes: list[str] = [f"g{i}" for i in range(manifest.n_genes)]
    omics: dict[str, np.ndarray] = {}
    if "omics" in modalities:
        manifest.reads["omics"] += 1
        genes, omics = _read_omics(manifest.resolve(manifest.omics), manifest.n_genes)
    records = []
    for pid, label in labels.items():
        bag = None
        if "image" in modalities:
            if pid not in manifest.bags:
                raise CohortLoadError(f"no bag file listed for patient {pid!r}")
            manifest.reads["bags"] += 1
            bag = read_bag(manifest.resolve(manifest.bags[pid]))
            if bag.shape[1] != manifest.image_dim:
                raise CohortLoadError(
                    f"bag for {pid!r} has dim {bag.shape[1]}, manifest says {manifest.image_dim}")
        vec = None
        if "omics" in modalities:
            if pid not in omics:
                raise CohortLoadError(f"no omics row for patient {pid!r}")
            vec = omics[pid]
        records.append(PatientRecord(pid, bag, vec, label))
    return Cohort(records, genes, manifest.image_dim)


def write_cohort(cohort: Cohort, out_dir: str | Path, seed: int | None = None) -> Path:
    """Write the on-disk layout and return the manifest path."""
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    bags = {}
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "time_days", "censored"])
        for r in cohort.records:
            w.writerow([r.patient_id, repr(float(r.label.time_days)), int(r.label.censored)])
    with open(out / "omics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", *cohort.gene_ids])
        for r in cohort.records:
            w.writerow([r.patient_id, *(repr(float(v)) for v in r.omics)])
    for r in cohort.records:
        rel = f"bags/{r.patient_id}.cmf"
        write_bag(out / rel, r.bag)
        bags[r.patient_id] = rel
    manifest = CohortManifest(out, len(cohort), cohort.n_genes, cohort.image_dim, bags=bags, seed=seed)
    manifest.dump(out / "manifest.yaml")
    return out / "manifest.yaml"


# --------------------------------------------------------------------------- preprocessing


IMAGE_SCALINGS = ("none", "standardize", "minmax")


@dataclass
class PreprocessStats:
    """Training-fold statistics for the model inputs.

    Omics are always standardized per gene. Tile features are passed through
    unchanged by default, or standardized / min-max scaled per channel.
    """

    gene_mean: np.ndarray | None = None
    gene_std: np.ndarray | None = None
    image_scaling: str = "none"
    image_loc: np.ndarray | None = None
    image_scale: np.ndarray | None = None

    @classmethod
    def fit(cls, train: Sequence[PatientRecord], image: bool = True, omics: bool = True,
            image_scaling: str = "none") -> PreprocessStats:
        if image_scaling not in IMAGE_SCALINGS:
            raise ValueError(f"image_scaling must be one of {IMAGE_SCALINGS}, got {image_scaling!r}")
        stats = cls(image_scaling=image_scaling)
        if omics:
            table = np.stack([r.omics for r in train])
            stats.gene_mean = table.mean(axis=0)
            stats.gene_std = table.std(axis=0)  # population (ddof=0)
        if image and image_scaling == "minmax":
            lo = np.full(train[0].bag.shape[1], np.inf)
            hi = np.full(train[0].bag.shape[1], -np.inf)
            for r in train:
                lo = np.minimum(lo, r.bag.min(axis=0))
                hi = np.maximum(hi, r.bag.max(axis=0))
            stats.image_loc, stats.image_scale = lo.astype(np.float64), hi.astype(np.float64)
        elif image and image_scaling == "standardize":
            n = 0
            total = np.zeros(train[0].bag.shape[1])
            sq = np.zeros_like(total)
            for r in train:
                b = r.bag.astype(np.float64)
                n += b.shape[0]
                total += b.sum(axis=0)
                sq += (b * b).sum(axis=0)
            mean = total / n
            stats.image_loc = mean
            stats.image_scale = np.sqrt(np.maximum(sq / n - mean * mean, 0.0))
        return stats

    def omics(self, x: np.ndarray) -> np.ndarray:
        return standardize(x, self)

    def image(self, bag: np.ndarray) -> np.ndarray:
        if self.image_scaling == "minmax":
            return minmax_normalize(bag, self.image_loc, self.image_scale)
        bag = np.asarray(bag, dtype=np.float64)
        if self.image_scaling == "standardize":
            safe = np.where(self.image_scale > 0, self.image_scale, 1.0)
            return (bag - self.image_loc) / safe
        return bag


def standardize(table: np.ndarray, stats: PreprocessStats) -> np.ndarray:
    """Per-gene ``(x - mean) / std``; genes with zero spread map to 0."""
    table = np.asarray(table, dtype=np.float64)
    const = stats.gene_std <= 0.0
    if np.any(const):
        log.warning("%d constant gene(s) mapped to 0", int(const.sum()))
    safe = np.where(const, 1.0, stats.gene_std)
    out = (table - stats.gene_mean) / safe
    out[..., const] = 0.0
    return out


def minmax_normalize(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Scale into [0, 1] by training min/max, clamping values outside the training range."""
    x = np.asarray(x, dtype=np.float64)
    span = hi - lo
    flat = span <= 0.0
    out = (x - lo) / np.where(flat, 1.0, span)
    out[..., flat] = 0.0
    return np.clip(out, 0.0, 1.0)


def add_gaussian_noise(x: np.ndarray, sigma: float, rng: np.random.Generator | None,
                       train: bool = True) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if not train or sigma == 0.0 or rng is None:
        return x
    return x + sigma * rng.standard_normal(np.shape(x))


# --------------------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldSplit:
    test_folds: tuple[tuple[str, ...], ...]
    seed: int

    @property
    def fold_count(self) -> int:
        return len(self.test_folds)

    def train_ids(self, k: int) -> tuple[str, ...]:
        return tuple(pid for i, fold in enumerate(self.test_folds) if i != k for pid in fold)

    def test_ids(self, k: int) -> tuple[str, ...]:
        return self.test_folds[k]

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for fold in self.test_folds:
            h.update(("|".join(fold) + "\n").encode())
        return h.hexdigest()


def make_folds(patient_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Shuffle once and deal into k folds whose sizes differ by at most one."""
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    ids = list(patient_ids)
    if len(ids) < k:
        raise ValueError(f"cannot split {len(ids)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = tuple(tuple(ids[i] for i in part) for part in np.array_split(order, k))
    return FoldSplit(folds, seed)


# --------------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SignalSpec:
    """Latent risk ``z = alpha*u_img + beta*u_omic + gamma*u_img*u_omic``.

    ``u_img`` shifts ``image_channels`` tile channels by ``image_shift*u_img`` in a
    ``tile_fraction`` of each patient's tiles; ``u_omic`` shifts ``omic_genes``
    genes by ``omic_shift*u_omic``. Gene expression is ``omic_noise`` white noise
    plus ``omic_factors`` shared nuisance factors with standard normal
    loadings (co-expression modules unrelated to survival). Event times are exponential with rate
    ``base_rate*exp(z)``, censoring times exponential with ``censor_rate``.
    """

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    image_channels: int = 32
    image_shift: float = 1.0
    tile_fraction: float = 1.0
    omic_genes: int = 16
    omic_shift: float = 1.0
    omic_factors: int = 0
    omic_noise: float = 1.0
    base_rate: float = 1.0 / 365.0
    censor_rate: float = 1.0 / 1000.0

    @property
    def is_null(self) -> bool:
        return self.alpha == 0 and self.beta == 0 and self.gamma == 0


def generate_synthetic_cohort(n: int, G: int = 154, tiles_per_patient: tuple[int, int] = (20, 200),
                              signal: SignalSpec = SignalSpec(), seed: int = 0,
                              image_dim: int = IMAGE_DIM) -> Cohort:
    if n < 20:
        raise ValueError(f"synthetic cohort needs n >= 20, got {n}")
    lo, hi = tiles_per_patient
    if not 1 <= lo <= hi:
        raise ValueError(f"bad tiles_per_patient range {tiles_per_patient}")
    if signal.image_channels > image_dim or signal.omic_genes > G:
        raise ValueError("signal subset larger than the feature space")
    if signal.is_null:
        log.warning("all signal coefficients are zero: the cohort carries no survival signal")
    rng = np.random.default_rng(seed)
    img_channels = np.sort(rng.choice(image_dim, size=signal.image_channels, replace=False))
    genes = np.sort(rng.choice(G, size=signal.omic_genes, replace=False))
    loadings = rng.standard_normal((signal.omic_factors, G))
    u_img = rng.standard_normal(n)
    u_omic = rng.standard_normal(n)
    z = signal.alpha * u_img + signal.beta * u_omic + signal.gamma * u_img * u_omic
    event = rng.exponential(1.0 / (signal.base_rate * np.exp(z)))
    censor = rng.exponential(1.0 / signal.censor_rate, size=n)
    time = np.minimum(event, censor)
    censored = censor < event
    width = len(str(n - 1))
    records = []
    for i in range(n):
        k = int(rng.integers(lo, hi + 1))
        tiles = rng.standard_normal((k, image_dim), dtype=np.float32)
        carriers = rng.random(k) < signal.tile_fraction
        tiles[np.ix_(carriers, img_channels)] += np.float32(signal.image_shift * u_img[i])
        omics = signal.omic_noise * rng.standard_normal(G)
        if signal.omic_factors:
            omics += rng.standard_normal(signal.omic_factors) @ loadings
        omics[genes] += signal.omic_shift * u_omic[i]
        label = SurvivalLabel(float(time[i]), bool(censored[i]))
        records.append(PatientRecord(f"P{i:0{width}d}", tiles, omics, label))
    gene_ids = [f"GENE{j:03d}" for j in range(G)]
    return Cohort(records, gene_ids, image_dim, latent_risk=z, latent_image=u_img,
                  latent_omics=u_omic)
