import csv
import math
import pickle
from dataclasses import replace

import numpy as np
import pytest

from cmfuse.data import CohortManifest, PatientRecord, PreprocessStats, SignalSpec, write_cohort
from cmfuse.harness import (
    SUMMARY_COLUMNS,
    ConfigError,
    ExperimentConfig,
    SyntheticData,
    _Inputs,
    ablation_grid,
    default_comparison,
    fold_stats,
    mean_loss,
    run_ablation,
    run_experiment,
    summarize_folds_csv,
    train_fold,
)
from cmfuse.model import ModelSpec
from cmfuse.survival import SurvivalLabel, compute_bin_edges

SMALL = ModelSpec(amil_embed_dim=8, amil_attn_dim=4, fnn_hidden=8, hidden=8)


def small_config(**kw):
    syn = SyntheticData(n=40, genes=12, tiles=(2, 4), image_dim=16, seed=1,
                        signal=SignalSpec(image_channels=4, omic_genes=3))
    return ExperimentConfig(synthetic=syn, model=SMALL, **{"epochs": 2, "folds": 3, **kw})


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_defaults_follow_training_recipe():
    cfg = ExperimentConfig(synthetic=SyntheticData())
    assert (cfg.epochs, cfg.lr, cfg.folds, cfg.beta1, cfg.beta2) == (55, 0.01, 5, 0.9, 0.999)
    assert cfg.model.name == "cmmf-shared-tanh"


def test_config_yaml_round_trip(tmp_path):
    cfg = small_config(seed=9)
    path = tmp_path / "c.yaml"
    import yaml

    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert ExperimentConfig.load(path) == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"synthetic": {}, "epoch": 3})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"epochs": 3})
    with pytest.raises(ConfigError):
        ExperimentConfig(synthetic=SyntheticData(), bin_scope="both")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.yaml")


def test_models_inherit_base_fields():
    cfg = ExperimentConfig.from_dict({"synthetic": {}, "model": {"hidden": 8},
                                      "models": [{"kind": "unimodal-image"}, {"design": "mean"}]})
    assert [m.name for m in cfg.models] == ["amil", "mean"]
    assert all(m.hidden == 8 for m in cfg.models)


def test_fold_stats_uses_sample_std():
    mean, std = fold_stats([0.6, 0.7, 0.8])
    assert mean == pytest.approx(0.7) and std == pytest.approx(0.1)


def test_model_sets():
    assert [s.name for s in default_comparison(SMALL)] == [
        "amil", "fnn", "raw-concat", "concat", "mean", "bilinear", "gated-attention",
        "cmmf-shared-tanh"]
    assert [s.name for s in ablation_grid(SMALL)] == [
        "cmmf-per-modality-relu", "cmmf-shared-relu", "cmmf-per-modality-tanh",
        "cmmf-shared-tanh"]


def toy_records(seed):
    rng = np.random.default_rng(seed)
    times = [100.0, 200.0, 300.0, 400.0]
    return [PatientRecord(f"t{i}", rng.normal(size=(3, 16)).astype(np.float32), rng.normal(size=12),
                          SurvivalLabel(t, False)) for i, t in enumerate(times)]


@pytest.mark.parametrize("kind", ["multimodal", "unimodal-image", "unimodal-omics"])
def test_one_epoch_smoke_train(kind):
    spec = replace(SMALL, kind=kind)
    improved = 0
    for seed in range(5):
        train = toy_records(seed)
        cfg = small_config(seed=seed, noise_sigma=0.0)
        losses = []
        for epochs in (0, 1):
            _, model = train_fold(replace(cfg, epochs=epochs), spec, train, train, return_model=True)
            stats = PreprocessStats.fit(train, spec.uses_image, spec.uses_omics)
            edges = compute_bin_edges([r.label for r in train])
            labels = [r.label.with_bin(edges) for r in train]
            losses.append(mean_loss(model, _Inputs(stats, spec), train, labels))
        assert math.isfinite(losses[1])
        improved += losses[1] <= losses[0]
    assert improved >= 3


def test_train_fold_is_deterministic():
    cfg = small_config()
    cohort = cfg.synthetic.generate()
    train, test = cohort.records[:30], cohort.records[30:]
    a = train_fold(cfg, SMALL, train, test)
    b = train_fold(cfg, SMALL, train, test)
    assert pickle.dumps(a) == pickle.dumps(b)
    assert len(a.epoch_losses) == 2 and 0 <= a.cindex <= 1
    for row in a.rows:
        assert abs(sum(row.modality_attention) - 1) < 1e-12


def test_invalid_fold_is_reported_not_raised():
    cfg = small_config()
    cohort = cfg.synthetic.generate()
    test = [replace(r, label=SurvivalLabel(r.label.time_days, True)) for r in cohort.records[30:]]
    rep = train_fold(cfg, SMALL, cohort.records[:30], test)
    assert not rep.valid and math.isnan(rep.cindex)


def test_compare_shares_splits_and_summary_recomputes(tmp_path):
    cfg = small_config()
    specs = [replace(SMALL, kind="unimodal-image"), replace(SMALL, kind="unimodal-omics"), SMALL]
    summaries = run_experiment(cfg, specs, tmp_path)
    folds = read(tmp_path / "folds.csv")
    assert len({r["split_digest"] for r in folds}) == 1
    assert len(folds) == 3 * 3
    summary = read(tmp_path / "summary.csv")
    assert list(summary[0]) == SUMMARY_COLUMNS
    for s, row in zip(summaries, summary):
        assert float(row["fold_mean_cindex"]) == s.mean_cindex
    before = (tmp_path / "summary.csv").read_bytes()
    recomputed = summarize_folds_csv(tmp_path)
    assert (tmp_path / "summary.csv").read_bytes() == before
    for s, row in zip(summaries, recomputed):
        mean, std = fold_stats(s.cindexes)
        assert abs(row[4] - mean) <= 1e-12 and abs(row[5] - std) <= 1e-12
    attn = read(tmp_path / "attention.csv")
    assert len(attn) == 3 * 40
    for row in attn:
        if row["attn_image"]:
            assert abs(float(row["attn_image"]) + float(row["attn_omics"]) - 1) < 1e-12
    losses = read(tmp_path / "losses.csv")
    assert len(losses) == 3 * 3 * 2
    assert (tmp_path / "config.yaml").is_file() and (tmp_path / "run.json").is_file()


def test_ablation_emits_four_rows(tmp_path):
    summaries = run_ablation(small_config(epochs=1), tmp_path)
    assert len(summaries) == 4
    assert len(read(tmp_path / "summary.csv")) == 4


def test_unimodal_run_never_reads_other_modality(tmp_path, monkeypatch):
    cfg = small_config()
    manifest_path = write_cohort(cfg.synthetic.generate(), tmp_path / "cohort")
    seen = []
    original = CohortManifest.load.__func__

    def spy(cls, path):
        m = original(cls, path)
        seen.append(m)
        return m

    monkeypatch.setattr(CohortManifest, "load", classmethod(spy))
    cfg = replace(cfg, synthetic=None, manifest=str(manifest_path), epochs=1)
    run_experiment(cfg, [replace(SMALL, kind="unimodal-image")])
    assert seen[-1].reads["omics"] == 0 and seen[-1].reads["bags"] == 40
    run_experiment(cfg, [replace(SMALL, kind="unimodal-omics")])
    assert seen[-1].reads["bags"] == 0 and seen[-1].reads["omics"] == 1


def test_bad_thread_setting(monkeypatch):
    monkeypatch.setenv("CMFUSE_THREADS", "many")
    with pytest.raises(ConfigError):
        run_experiment(small_config(epochs=0), [SMALL])


def test_image_only_signal_favours_image_model():
    syn = SyntheticData(n=150, genes=12, tiles=(3, 6), image_dim=32, seed=5,
                        signal=SignalSpec(alpha=1.5, beta=0, gamma=0, image_channels=8, omic_genes=3))
    cfg = ExperimentConfig(synthetic=syn, model=SMALL, epochs=5, folds=3, seed=5)
    img, omic = run_experiment(cfg, [replace(SMALL, kind="unimodal-image"),
                                     replace(SMALL, kind="unimodal-omics")])
    assert img.mean_cindex > omic.mean_cindex
