import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aullm.data import (
    AULabelVector,
    ClipDataset,
    DatasetManifest,
    MicroClip,
    SampleRecord,
    SyntheticConfig,
    export_labels_csv,
    generate_synthetic,
    load_clip,
    load_manifest,
    loso_folds,
    sample_labels,
    save_dataset,
    template_match_labels,
)
from aullm.errors import (
    ClipNotFoundError,
    ConfigError,
    CorruptionError,
    InputError,
    ManifestVersionError,
    ShapeError,
)


def _manifest(subject_sizes):
    samples = []
    for subject, count in subject_sizes:
        for j in range(count):
            cid = f"{subject}_{j}"
            samples.append(SampleRecord(cid, subject, "A", (0, 1), f"clips/{cid}.f32", (2, 1, 8, 8)))
    return DatasetManifest(1, ("AU1", "AU2"), samples)


def test_reference_counts_and_shapes():
    ds = generate_synthetic(SyntheticConfig(seed=7, num_subjects=6, clips_per_subject=10))
    assert ds.manifest.M == 60
    assert all(s.shape == (16, 1, 32, 32) for s in ds.manifest.samples)
    assert all(c.shape == (16, 1, 32, 32) and c.dtype == np.float32 for c in ds.clips.values())


def test_generation_is_deterministic():
    cfg = SyntheticConfig(num_subjects=2, clips_per_subject=4)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert a.manifest.to_json() == b.manifest.to_json()
    for cid in a.manifest.clip_ids:
        assert a.clips[cid].tobytes() == b.clips[cid].tobytes()


def test_positive_rule_raises_conditional_rate():
    cfg = SyntheticConfig(co_occurrence_rules=[("AU1", "AU2", 0.9)])
    y = sample_labels(cfg, 10_000, np.random.default_rng(0))
    au1, au2 = y[:, 0] == 1, y[:, 1] == 1
    assert au2[au1].mean() > au2[~au1].mean()


def test_negative_rule_lowers_conditional_rate():
    cfg = SyntheticConfig(co_occurrence_rules=[("AU12", "AU15", -0.9)])
    y = sample_labels(cfg, 10_000, np.random.default_rng(1))
    a, b = y[:, 4] == 1, y[:, 6] == 1
    assert b[a].mean() < b[~a].mean()


@pytest.mark.parametrize("rate", [0.2, 0.35, 0.6])
def test_marginals_match_base_rate_without_rules(rate):
    cfg = SyntheticConfig(base_rate=rate)
    y = sample_labels(cfg, 10_000, np.random.default_rng(2))
    assert np.all(np.abs(y.mean(0) - rate) <= 0.03)


def test_save_load_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticConfig(num_subjects=6, clips_per_subject=10))
    save_dataset(ds, tmp_path)
    loaded = load_manifest(tmp_path)
    assert loaded.to_json() == ds.manifest.to_json()
    for cid in loaded.clip_ids:
        clip, labels = load_clip(loaded, cid)
        assert clip.frames.tobytes() == ds.clips[cid].tobytes()
        assert tuple(labels.values) == loaded.record(cid).labels


def test_manifest_file_is_canonical(tmp_path):
    ds = generate_synthetic(SyntheticConfig(num_subjects=2, clips_per_subject=2))
    save_dataset(ds, tmp_path / "a")
    save_dataset(ds, tmp_path / "b")
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_truncated_clip_is_corruption(tmp_path):
    ds = generate_synthetic(SyntheticConfig(num_subjects=2, clips_per_subject=2))
    save_dataset(ds, tmp_path)
    cid = ds.manifest.clip_ids[0]
    path = tmp_path / ds.manifest.record(cid).path
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CorruptionError):
        load_clip(load_manifest(tmp_path), cid)


def test_missing_clip_id(tmp_path):
    ds = generate_synthetic(SyntheticConfig(num_subjects=2, clips_per_subject=2))
    save_dataset(ds, tmp_path)
    with pytest.raises(ClipNotFoundError):
        load_clip(load_manifest(tmp_path), "missing")
    with pytest.raises(KeyError):
        ds.manifest.record("missing")


def test_manifest_version_and_count_checks(tmp_path):
    ds = generate_synthetic(SyntheticConfig(num_subjects=2, clips_per_subject=2))
    save_dataset(ds, tmp_path)
    blob = json.loads((tmp_path / "manifest.json").read_text())
    blob["num_samples"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(blob))
    with pytest.raises(CorruptionError):
        load_manifest(tmp_path)
    blob["version"] = 2
    (tmp_path / "manifest.json").write_text(json.dumps(blob))
    with pytest.raises(ManifestVersionError):
        load_manifest(tmp_path)


def test_labels_csv_header(tmp_path):
    ds = generate_synthetic(SyntheticConfig(num_subjects=2, clips_per_subject=3))
    export_labels_csv(ds.manifest, tmp_path / "labels.csv")
    lines = (tmp_path / "labels.csv").read_text().splitlines()
    assert lines[0] == "clip_id,subject_id,domain_id,AU1,AU2,AU4,AU7,AU12,AU14,AU15,AU17"
    assert len(lines) == 1 + 6


def test_loso_fold_sizes():
    folds = loso_folds(_manifest([("s1", 2), ("s2", 3), ("s3", 1)]))
    assert [len(test) for _, test in folds] == [2, 3, 1]
    assert [len(train) for train, _ in folds] == [4, 3, 5]
    train_s2 = folds[1][0]
    assert not any(cid.startswith("s2") for cid in train_s2)


def test_loso_needs_two_subjects():
    with pytest.raises(ValueError):
        loso_folds(_manifest([("s1", 3)]))


@given(st.lists(st.integers(1, 5), min_size=2, max_size=6))
def test_loso_partition_property(sizes):
    manifest = _manifest([(f"s{i}", n) for i, n in enumerate(sizes)])
    folds = loso_folds(manifest)
    tests = [set(t) for _, t in folds]
    assert set().union(*tests) == set(manifest.clip_ids)
    assert sum(len(t) for t in tests) == manifest.M
    for train, test in folds:
        assert set(train).isdisjoint(test)
        assert set(train) | set(test) == set(manifest.clip_ids)
        subjects = {manifest.record(c).subject_id for c in test}
        assert len(subjects) == 1
        assert subjects.isdisjoint(manifest.record(c).subject_id for c in train)


def test_clips_within_unit_range_and_clamping_counted():
    cfg = SyntheticConfig(num_subjects=2, clips_per_subject=4, background=0.95, domain_styles={"A": (0.0, 0.05)})
    ds = generate_synthetic(cfg)
    assert all(c.min() >= 0.0 and c.max() <= 1.0 for c in ds.clips.values())
    assert ds.clamped > 0
    assert ds.manifest.metadata["clamped_entries"] == ds.clamped


def test_template_matching_recovers_planted_labels():
    for styles in ({"A": (0.0, 0.01)}, {"B": (0.1, 0.02)}):
        cfg = SyntheticConfig(domain_styles=styles)
        ds = ClipDataset.from_synthetic(generate_synthetic(cfg))
        pred = template_match_labels(cfg, ds.frames)
        assert (pred == ds.labels).mean() >= 0.95


def test_micro_clip_validation():
    with pytest.raises(ShapeError):
        MicroClip("c", "s", "A", np.zeros((1, 1, 8, 8), np.float32))
    with pytest.raises(InputError):
        MicroClip("c", "s", "A", np.full((2, 1, 8, 8), 1.5, np.float32))
    with pytest.raises(InputError):
        MicroClip("c", "s", "A", np.full((2, 1, 8, 8), np.nan, np.float32))


def test_label_vector_validation():
    assert AULabelVector([1, 0], ("AU1", "AU2")).active == ["AU1"]
    with pytest.raises(ValueError):
        AULabelVector([2, 0], ("AU1", "AU2"))
    with pytest.raises(ValueError):
        AULabelVector([1, 0], ("AU1", "AU1"))


def test_manifest_validation():
    rec = SampleRecord("c", "", "A", (0, 1), "clips/c.f32", (2, 1, 8, 8))
    with pytest.raises(ValueError):
        DatasetManifest(1, ("AU1", "AU2"), [rec])
    good = SampleRecord("c", "s", "A", (0, 1), "clips/c.f32", (2, 1, 8, 8))
    with pytest.raises(ValueError):
        DatasetManifest(1, ("AU1", "AU2"), [good, good])
    with pytest.raises(ShapeError):
        DatasetManifest(1, ("AU1",), [good])


@pytest.mark.parametrize("bad", [
    {"bump_amplitude": 0.0},
    {"au_region_centers": {**SyntheticConfig().au_region_centers, "AU1": (40, 40)}},
    {"au_region_centers": {**SyntheticConfig().au_region_centers, "AU2": (6, 12)}},
    {"domain_styles": {"A": (0.0, -0.1)}},
    {"co_occurrence_rules": [("AU1", "AU99", 0.5)]},
])
def test_synthetic_config_validation(bad):
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(**bad))


def test_domain_subset(small_dataset):
    sub = small_dataset.subset(["A"])
    assert len(sub) == len(small_dataset)
    with pytest.raises(ValueError):
        small_dataset.subset(["Z"])
