import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aullm.config import default_config
from aullm.data import ClipDataset, SyntheticConfig, generate_synthetic, loso_folds
from aullm.errors import ShapeError
from aullm.evaluation import (
    AUOrderError,
    ConstantPredictor,
    EvalReport,
    FoldFailedError,
    OraclePredictor,
    build_report,
    confusion_counts,
    emit_report,
    f1_per_au,
    load_report,
    macro_f1,
    model_predictor,
    negative_predictor,
    oracle_predictor,
    report_csv_text,
    run_crossdomain,
    run_loso,
)


def brute_force_f1(pred, truth):
    """Per-AU F1 from explicit loops and exact fractions; None marks a masked AU."""
    m, n = len(pred), len(pred[0])
    out = []
    for j in range(n):
        tp = fp = fn = 0
        for i in range(m):
            p, t = pred[i][j], truth[i][j]
            if p and t:
                tp += 1
            elif p and not t:
                fp += 1
            elif t and not p:
                fn += 1
        if tp == fp == fn == 0:
            out.append(None)
        elif tp == 0:
            out.append(0.0)
        else:
            prec, rec = Fraction(tp, tp + fp), Fraction(tp, tp + fn)
            out.append(float(2 * prec * rec / (prec + rec)))
    return out


@pytest.fixture(scope="module")
def six_subjects():
    return ClipDataset.from_synthetic(generate_synthetic(SyntheticConfig(num_subjects=6, clips_per_subject=5)))


def test_perfect_prediction():
    truth = np.eye(4, dtype=int)
    f1, mask = f1_per_au(truth, truth)
    assert f1.tolist() == [1.0] * 4 and mask.all()


def test_single_au_hand_value():
    tp, fp, fn = confusion_counts([[1], [1], [0], [0]], [[1], [0], [1], [0]])
    assert (tp[0], fp[0], fn[0]) == (1, 1, 1)
    f1, mask = f1_per_au([[1], [1], [0], [0]], [[1], [0], [1], [0]])
    assert f1[0] == pytest.approx(0.5, abs=1e-12) and mask[0]


def test_all_zero_au_is_masked():
    f1, mask = f1_per_au([[0, 1], [0, 0]], [[0, 1], [0, 1]])
    assert mask.tolist() == [False, True]
    with pytest.raises(ValueError):
        macro_f1(*f1_per_au([[0], [0]], [[0], [0]]))


def test_tp_zero_scores_zero():
    f1, mask = f1_per_au([[1], [0]], [[0], [1]])
    assert f1[0] == 0.0 and mask[0]


def test_macro_examples():
    assert macro_f1([1.0, 0.5], [True, True]) == 0.75
    assert macro_f1([0.3]) == 0.3
    assert macro_f1([0.8, 0.6, 0.0], [True, True, False]) == pytest.approx(0.7, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        f1_per_au(np.zeros((3, 2)), np.zeros((3, 3)))


def test_agrees_with_brute_force_on_random_matrices():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        m, n = rng.integers(1, 30), rng.integers(1, 10)
        density = rng.uniform(0, 1, size=2)
        pred = (rng.random((m, n)) < density[0]).astype(int)
        truth = (rng.random((m, n)) < density[1]).astype(int)
        f1, mask = f1_per_au(pred, truth)
        want = brute_force_f1(pred.tolist(), truth.tolist())
        assert mask.tolist() == [w is not None for w in want]
        assert [float(f) if k else None for f, k in zip(f1, mask)] == want
        included = [w for w in want if w is not None]
        if included:
            assert abs(macro_f1(f1, mask) - sum(included) / len(included)) < 1e-12


@given(st.integers(0, 2 ** 31 - 1))
def test_scores_stay_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    pred, truth = rng.integers(0, 2, (12, 5)), rng.integers(0, 2, (12, 5))
    f1, mask = f1_per_au(pred, truth)
    assert ((f1 >= 0) & (f1 <= 1)).all()
    if mask.any():
        assert 0 <= macro_f1(f1, mask) <= 1


def test_oracle_predictor_scores_one(six_subjects):
    r = run_loso(six_subjects, default_config(), oracle_predictor)
    assert r.macro_f1 == 1.0
    assert len(r.fold_details) == 6 and r.num_predictions == len(six_subjects)
    assert sum(d["n_test"] for d in r.fold_details) == len(six_subjects)
    assert r.aggregation == "pooled"


def test_negative_predictor_scores_zero(six_subjects):
    assert six_subjects.labels.sum(0).min() > 0
    r = run_loso(six_subjects, default_config(), negative_predictor)
    assert r.macro_f1 == 0.0 and set(r.per_au_f1.values()) == {0.0}


class _HalfRight:
    """Deterministic per-clip predictor whose score depends on which fold sees which clip."""

    def __init__(self, cfg=None):
        pass

    def fit(self, source, idx):
        return {"n": len(idx)}

    def predict(self, source, idx):
        y = source.clip_labels(idx).astype(int)
        y[::2] = 1 - y[::2]
        return y


def test_pooled_result_ignores_fold_order(six_subjects):
    cfg = default_config()
    a = run_loso(six_subjects, cfg, _HalfRight)
    b = run_loso(six_subjects, cfg, _HalfRight, fold_order=[5, 3, 1, 0, 2, 4])
    assert a.to_json() == b.to_json()
    with pytest.raises(ValueError):
        run_loso(six_subjects, cfg, _HalfRight, fold_order=[0, 1])


def test_per_fold_mode_is_labelled(six_subjects):
    cfg = default_config(**{"eval.aggregation": "per_fold"})
    r = run_loso(six_subjects, cfg, _HalfRight)
    assert r.aggregation == "per_fold"
    folds = loso_folds(six_subjects.manifest)
    slices = [six_subjects.indices(t) for _, t in folds]
    pred = np.concatenate([_HalfRight().predict(six_subjects, s) for s in slices])
    truth = np.concatenate([six_subjects.labels[s] for s in slices]).astype(int)
    scores = [f1_per_au(pred[i * 5:(i + 1) * 5], truth[i * 5:(i + 1) * 5]) for i in range(6)]
    au = six_subjects.au_names[0]
    vals = [f[0] for f, m in scores if m[0]]
    assert r.per_au_f1[au] == pytest.approx(sum(vals) / len(vals), abs=1e-12)


class _FailsOnThirdFold:
    def __init__(self, cfg=None):
        pass

    def fit(self, source, idx):
        if _FailsOnThirdFold.calls == 2:
            raise RuntimeError("boom")
        _FailsOnThirdFold.calls += 1
        return {}

    def predict(self, source, idx):
        return np.zeros((len(idx), len(source.au_names)), dtype=int)


def test_fold_failure_aborts(six_subjects):
    _FailsOnThirdFold.calls = 0
    with pytest.raises(FoldFailedError) as info:
        run_loso(six_subjects, default_config(), _FailsOnThirdFold)
    err = info.value
    assert err.fold == 2
    statuses = [d["status"] for d in err.report["fold_details"]]
    assert statuses == ["ok", "ok", "failed"]


def test_parallel_folds_match_serial(six_subjects):
    cfg = default_config()
    assert run_loso(six_subjects, cfg, oracle_predictor, jobs=2).to_json() == \
        run_loso(six_subjects, cfg, oracle_predictor).to_json()


class _RecordingSource:
    """Wraps a dataset and logs every tensor read together with the current phase."""

    def __init__(self, inner, log, name):
        self.inner, self.log, self.name = inner, log, name
        self.au_names, self.manifest = inner.au_names, inner.manifest
        self.phase = ["idle"]

    def __len__(self):
        return len(self.inner)

    def clip_frames(self, idx):
        self.log.append((self.name, "frames", self.phase[0]))
        return self.inner.clip_frames(idx)

    def clip_labels(self, idx):
        self.log.append((self.name, "labels", self.phase[0]))
        return self.inner.clip_labels(idx)


def test_crossdomain_never_reads_target_while_training():
    syn = SyntheticConfig(num_subjects=2, clips_per_subject=4, domain_styles={"A": (0.0, 0.01), "B": (0.1, 0.02)})
    full = ClipDataset.from_synthetic(generate_synthetic(syn))
    log, phase = [], ["idle"]
    source = _RecordingSource(full.subset(["A"]), log, "source")
    target = _RecordingSource(full.subset(["B"]), log, "target")
    source.phase = target.phase = phase
    cfg = default_config(**{"trainer.epochs": 1, "trainer.batch_size": 4})

    class Phased:
        def __init__(self, c):
            self.inner = model_predictor(c)

        def fit(self, src, idx):
            phase[0] = "fit"
            try:
                return self.inner.fit(src, idx)
            finally:
                phase[0] = "idle"

        def predict(self, src, idx):
            return self.inner.predict(src, idx)

    r = run_crossdomain(source, target, cfg, Phased)
    assert not [e for e in log if e[0] == "target" and e[2] == "fit"]
    assert any(e[0] == "source" and e[2] == "fit" for e in log)
    assert r.domains == {"source": "A", "target": "B"}
    assert np.isfinite(r.macro_f1) and r.num_predictions == len(target)


def test_crossdomain_oracle_and_identity(six_subjects):
    r = run_crossdomain(six_subjects, six_subjects, default_config(), oracle_predictor)
    assert r.macro_f1 == 1.0 and r.protocol == "crossdomain"
    assert r.fold_details[0]["n_train"] == r.fold_details[0]["n_test"] == len(six_subjects)


def test_crossdomain_au_mismatch():
    a = ClipDataset.from_synthetic(generate_synthetic(SyntheticConfig(num_subjects=1, clips_per_subject=2)))
    names = ("AU2", "AU1", "AU4", "AU7", "AU12", "AU14", "AU15", "AU17")
    b = ClipDataset.from_synthetic(generate_synthetic(SyntheticConfig(num_subjects=1, clips_per_subject=2,
                                                                      au_names=names)))
    with pytest.raises(AUOrderError):
        run_crossdomain(a, b, default_config(), oracle_predictor)


def _report():
    rng = np.random.default_rng(4)
    names = ["AU1", "AU2", "AU4", "AU7", "AU12", "AU14", "AU15", "AU17"]
    pred, truth = rng.integers(0, 2, (20, 8)), rng.integers(0, 2, (20, 8))
    truth[:, 7] = pred[:, 7] = 0
    return build_report("loso", names, pred, truth, default_config(), [{"fold": 0}])


def test_report_invariants():
    r = _report()
    assert r.per_au_f1["AU17"] is None
    vals = [v for v in r.per_au_f1.values() if v is not None]
    assert abs(r.macro_f1 - sum(vals) / len(vals)) < 1e-9
    assert all(0 <= v <= 1 for v in vals)


def test_emit_round_trip_and_bytes(tmp_path):
    r = _report()
    j1, c1 = emit_report(r, tmp_path / "a")
    j2, c2 = emit_report(r, tmp_path / "b")
    assert j1.read_bytes() == j2.read_bytes() and c1.read_bytes() == c2.read_bytes()
    assert load_report(j1) == r
    assert list(json.loads(j1.read_text())) == sorted(json.loads(j1.read_text()))
    rows = c1.read_text().splitlines()
    assert len(rows) == 10 and rows[0] == "au,f1,tp,fp,fn,included" and rows[-1].startswith("macro,")
    assert rows[8] == "AU17,,0,0,0,0"


def test_report_csv_matches_counts():
    r = _report()
    for line in report_csv_text(r).splitlines()[1:-1]:
        au, _, tp, fp, fn, _ = line.split(",")
        assert r.counts[au] == {"tp": int(tp), "fp": int(fp), "fn": int(fn)}


def test_emit_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(_report(), blocker / "sub")


def test_constant_predictor_shape(six_subjects):
    p = ConstantPredictor(1).predict(six_subjects, np.arange(3))
    assert p.shape == (3, 8) and p.min() == 1
    assert OraclePredictor().predict(six_subjects, np.arange(2)).dtype == np.int64
    assert isinstance(EvalReport.from_json(_report().to_json()), EvalReport)
