"""Cross-validated training and reporting."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .data import (
    Cohort,
    CohortManifest,
    FoldSplit,
    PatientRecord,
    PreprocessStats,
    SignalSpec,
    add_gaussian_noise,
    generate_synthetic_cohort,
    load_cohort,
    make_folds,
)
from .model import ModelSpec, SurvivalModel
from .survival import (
    BinEdges,
    SurvivalLabel,
    UndefinedCIndexError,
    compute_bin_edges,
    concordance_index,
    nll_survival_loss,
)
from .tensor import Adam, Tape, backward

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["model", "design", "sharing", "activation", "fold_mean_cindex",
                   "fold_std_cindex", "seed"]
FOLD_COLUMNS = ["model", "design", "sharing", "activation", "seed", "fold", "cindex", "valid",
                "n_train", "n_test", "split_digest"]
LOSS_COLUMNS = ["model", "fold", "epoch", "mean_loss"]
ATTENTION_COLUMNS = ["model", "fold", "patient_id", "risk", "attn_image", "attn_omics",
                     "top_tile", "top_tile_attention"]


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticData:
    n: int = 300
    genes: int = 154
    tiles: tuple[int, int] = (20, 200)
    image_dim: int = 1024
    seed: int = 0
    signal: SignalSpec = field(default_factory=SignalSpec)

    def generate(self) -> Cohort:
        return generate_synthetic_cohort(self.n, self.genes, tuple(self.tiles), self.signal,
                                         self.seed, self.image_dim)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run; echoed verbatim into the report directory."""

    manifest: str | None = None
    synthetic: SyntheticData | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    models: list[ModelSpec] | None = None
    epochs: int = 55
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    folds: int = 5
    noise_sigma: float = 0.05
    alpha: float = 0.0
    bin_scope: str = "fold"
    image_scaling: str = "none"

    def __post_init__(self):
        if self.bin_scope not in ("fold", "global"):
            raise ConfigError(f"bin_scope must be 'fold' or 'global', got {self.bin_scope!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epochs < 0 or self.folds < 2:
            raise ConfigError("epochs must be >= 0 and folds >= 2")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | Path | None = None) -> ExperimentConfig:
        doc = dict(doc or {})
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if doc.get("synthetic") is not None:
                syn = dict(doc["synthetic"])
                syn["signal"] = SignalSpec(**(syn.get("signal") or {}))
                if "tiles" in syn:
                    syn["tiles"] = tuple(syn["tiles"])
                doc["synthetic"] = SyntheticData(**syn)
            if doc.get("model") is not None:
                doc["model"] = ModelSpec(**doc["model"])
            base = doc.get("model", ModelSpec())
            if doc.get("models") is not None:
                doc["models"] = [replace(base, **m) for m in doc["models"]]
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        if doc.get("manifest") and base_dir is not None and not Path(doc["manifest"]).is_absolute():
            doc["manifest"] = str(Path(base_dir) / doc["manifest"])
        cfg = cls(**doc)
        if cfg.manifest is None and cfg.synthetic is None:
            raise ConfigError("config needs either 'manifest' or 'synthetic'")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_dict(yaml.safe_load(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        doc = asdict(self)
        if self.synthetic is not None:
            doc["synthetic"]["tiles"] = list(self.synthetic.tiles)
        return doc


@dataclass
class PatientRow:
    patient_id: str
    risk: float
    modality_attention: np.ndarray | None
    top_tile: int | None
    top_tile_attention: float | None


@dataclass
class FoldReport:
    model: ModelSpec
    fold: int
    cindex: float
    valid: bool
    epoch_losses: list[float]
    rows: list[PatientRow]
    n_train: int = 0
    n_test: int = 0
    split_digest: str = ""


@dataclass
class RunSummary:
    model: ModelSpec
    mean_cindex: float
    std_cindex: float
    folds: list[FoldReport]
    seed: int

    @property
    def cindexes(self) -> list[float]:
        return [f.cindex for f in self.folds if f.valid]


def fold_stats(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (nan when undefined)."""
    vals = [float(v) for v in values]
    if not vals:
        return math.nan, math.nan
    mean = statistics.fmean(vals)
    std = statistics.stdev(vals) if len(vals) > 1 else math.nan
    return mean, std


def _stream(seed: int, fold: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, fold, zlib.crc32(name.encode())])


class _Inputs:
    """Fold-local preprocessing, applied lazily so raw bags stay float32 in memory."""

    def __init__(self, stats: PreprocessStats, spec: ModelSpec):
        self.stats = stats
        self.spec = spec

    def __call__(self, record: PatientRecord, noise: float = 0.0,
                 rng: np.random.Generator | None = None):
        bag = omics = None
        if self.spec.uses_image:
            bag = add_gaussian_noise(self.stats.image(record.bag), noise, rng, train=rng is not None)
        if self.spec.uses_omics:
            omics = add_gaussian_noise(self.stats.omics(record.omics), noise, rng,
                                       train=rng is not None)
        return bag, omics


def mean_loss(model: SurvivalModel, inputs: _Inputs, records: Sequence[PatientRecord],
              labels: Sequence[SurvivalLabel], alpha: float = 0.0) -> float:
    """Noise-free mean NLL over ``records`` (no tape)."""
    losses = [nll_survival_loss(model(*inputs(r)).output, lab, alpha).item()
              for r, lab in zip(records, labels)]
    return float(np.mean(losses))


def train_fold(config: ExperimentConfig, spec: ModelSpec, train: Sequence[PatientRecord],
               test: Sequence[PatientRecord], fold: int = 0, edges: BinEdges | None = None,
               n_genes: int | None = None, image_dim: int | None = None,
               return_model: bool = False):
    """Train one model on one fold at batch size 1 and evaluate it on the held-out patients."""
    ss = _stream(config.seed, fold, spec.name)
    init_rng, order_rng, noise_rng, drop_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    stats = PreprocessStats.fit(train, image=spec.uses_image, omics=spec.uses_omics,
                                image_scaling=config.image_scaling)
    if edges is None:
        edges = compute_bin_edges([r.label for r in train])
    train_labels = [r.label.with_bin(edges) for r in train]
    if n_genes is None:
        n_genes = len(train[0].omics) if spec.uses_omics else 154
    if image_dim is None:
        image_dim = train[0].bag.shape[1] if spec.uses_image else 1024
    model = SurvivalModel(spec, init_rng, n_genes=n_genes, image_dim=image_dim)
    params = model.parameters()
    opt = Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon)
    inputs = _Inputs(stats, spec)
    dropout_rng = drop_rng if spec.dropout > 0 else None

    epoch_losses = []
    for _ in range(config.epochs):
        total = 0.0
        for i in order_rng.permutation(len(train)):
            bag, omics = inputs(train[i], config.noise_sigma, noise_rng)
            with Tape() as tape:
                pred = model(bag, omics, dropout_rng)
                loss = nll_survival_loss(pred.output, train_labels[i], config.alpha)
            backward(tape, loss, params)
            opt.step()
            total += loss.item()
        epoch_losses.append(total / len(train))

    rows = []
    for r in test:
        pred = model(*inputs(r))
        tile, tile_attn = None, None
        if pred.tile_attention is not None:
            tile = int(np.argmax(pred.tile_attention))
            tile_attn = float(pred.tile_attention[tile])
        rows.append(PatientRow(r.patient_id, pred.output.risk, pred.modality_attention, tile,
                               tile_attn))
    try:
        cidx, valid = concordance_index([row.risk for row in rows], [r.label for r in test]), True
    except UndefinedCIndexError as exc:
        log.warning("fold %d (%s): %s; fold marked invalid", fold, spec.name, exc)
        cidx, valid = math.nan, False
    report = FoldReport(spec, fold, cidx, valid, epoch_losses, rows, len(train), len(test))
    return (report, model) if return_model else report


def default_comparison(base: ModelSpec) -> list[ModelSpec]:
    """Unimodal baselines, the five baseline fusions and the proposed head."""
    specs = [replace(base, kind="unimodal-image"), replace(base, kind="unimodal-omics")]
    for design in ("raw-concat", "concat", "mean", "bilinear", "gated-attention"):
        specs.append(replace(base, kind="multimodal", design=design))
    specs.append(replace(base, kind="multimodal", design="cmmf", sharing="shared", activation="tanh"))
    return specs


def ablation_grid(base: ModelSpec) -> list[ModelSpec]:
    """The 2x2 kernel-sharing x activation grid, in table order."""
    return [replace(base, kind="multimodal", design="cmmf", sharing=s, activation=a)
            for s, a in (("per-modality", "relu"), ("shared", "relu"),
                         ("per-modality", "tanh"), ("shared", "tanh"))]


def _threads(n_tasks: int, folds: int) -> int:
    raw = os.environ.get("CMFUSE_THREADS")
    cap = folds
    if raw:
        try:
            cap = max(1, int(raw))
        except ValueError:
            raise ConfigError(f"CMFUSE_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_tasks))


def load_data(config: ExperimentConfig, specs: Sequence[ModelSpec]) -> Cohort:
    if config.synthetic is not None:
        return config.synthetic.generate()
    modalities = set()
    for s in specs:
        if s.uses_image:
            modalities.add("image")
        if s.uses_omics:
            modalities.add("omics")
    return load_cohort(CohortManifest.load(config.manifest), sorted(modalities))


def run_experiment(config: ExperimentConfig, specs: Sequence[ModelSpec] | None = None,
                   out_dir: str | Path | None = None, cohort: Cohort | None = None) -> list[RunSummary]:
    """Cross-validate every model in ``specs`` on one shared fold split."""
    started = time.perf_counter()
    specs = list(specs) if specs is not None else (config.models or [config.model])
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate model names in comparison: {names}")
    if cohort is None:
        cohort = load_data(config, specs)
    split = make_folds(cohort.ids, config.folds, config.seed)
    by_id = cohort.by_id()
    global_edges = None
    if config.bin_scope == "global":
        global_edges = compute_bin_edges([r.label for r in cohort.records])

    def task(spec: ModelSpec, k: int) -> FoldReport:
        train = [by_id[p] for p in split.train_ids(k)]
        test = [by_id[p] for p in split.test_ids(k)]
        rep = train_fold(config, spec, train, test, k, edges=global_edges,
                         n_genes=cohort.n_genes, image_dim=cohort.image_dim)
        rep.split_digest = split.digest()
        return rep

    jobs = [(s, k) for s in specs for k in range(split.fold_count)]
    workers = _threads(len(jobs), split.fold_count)
    if workers == 1:
        reports = [task(s, k) for s, k in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(lambda job: task(*job), jobs))

    summaries = []
    for spec in specs:
        folds = [r for r in reports if r.model is spec]
        mean, std = fold_stats([f.cindex for f in folds if f.valid])
        summaries.append(RunSummary(spec, mean, std, folds, config.seed))
    if out_dir is not None:
        write_reports(out_dir, config, summaries, split, time.perf_counter() - started)
    return summaries


def run_ablation(config: ExperimentConfig, out_dir: str | Path | None = None,
                 cohort: Cohort | None = None) -> list[RunSummary]:
    return run_experiment(config, ablation_grid(config.model), out_dir, cohort)


# --------------------------------------------------------------------------- reports


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_reports(out_dir: str | Path, config: ExperimentConfig, summaries: Sequence[RunSummary],
                  split: FoldSplit | None = None, wall_clock: float | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary_rows, fold_rows, loss_rows, attn_rows = [], [], [], []
    for s in summaries:
        meta = s.model.row()
        summary_rows.append([*meta.values(), s.mean_cindex, s.std_cindex, s.seed])
        for f in s.folds:
            fold_rows.append([*meta.values(), s.seed, f.fold, f.cindex, int(f.valid), f.n_train,
                              f.n_test, f.split_digest])
            loss_rows += [[meta["model"], f.fold, e, v] for e, v in enumerate(f.epoch_losses)]
            for row in f.rows:
                a = row.modality_attention
                attn_rows.append([meta["model"], f.fold, row.patient_id, row.risk,
                                  None if a is None else float(a[0]),
                                  None if a is None else float(a[1]),
                                  row.top_tile, row.top_tile_attention])
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary_rows)
    _write_csv(out / "folds.csv", FOLD_COLUMNS, fold_rows)
    _write_csv(out / "losses.csv", LOSS_COLUMNS, loss_rows)
    _write_csv(out / "attention.csv", ATTENTION_COLUMNS, attn_rows)
    (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    info = {"wall_clock_seconds": wall_clock,
            "split_digest": split.digest() if split is not None else None}
    (out / "run.json").write_text(json.dumps(info, indent=2) + "\n")


def summarize_folds_csv(out_dir: str | Path) -> list[list]:
    """Recompute summary.csv rows from folds.csv and rewrite summary.csv."""
    out = Path(out_dir)
    path = out / "folds.csv"
    if not path.is_file():
        raise FileNotFoundError(f"no folds.csv in {out}")
    groups: dict[tuple, list[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["model"], row["design"], row["sharing"], row["activation"], int(row["seed"]))
            vals = groups.setdefault(key, [])
            if row["valid"] == "1":
                vals.append(float(row["cindex"]))
    rows = []
    for (model, design, sharing, activation, seed), vals in groups.items():
        mean, std = fold_stats(vals)
        rows.append([model, design, sharing, activation, mean, std, seed])
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, rows)
    return rows
