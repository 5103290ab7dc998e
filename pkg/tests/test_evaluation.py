import csv
import json

import numpy as np
import pytest

from stpredict import data as D
from stpredict.evaluation import (
    DB_FLOOR, MetricError, cdf_from_values, copy_last_forecast, db_or_floor, emit_report,
    evaluate_model, mse_cdf, nmae, nmse, per_timestep_curves, run_ablation, summarize, to_db,
    window_nmse, worker_count,
)
from stpredict.network import LinearPredictor, VariantSpec, table_variants

RNG = np.random.default_rng(0)


def field(*shape):
    return RNG.standard_normal(shape)


# -- metric identities ------------------------------------------------------

def test_perfect_and_zero_predictors():
    t = field(3, 4, 5)
    assert nmse(t, t) == 0 and nmae(t, t) == 0
    assert nmse(t, np.zeros_like(t)) == 1 and nmae(t, np.zeros_like(t)) == 1
    assert to_db(nmse(t, np.zeros_like(t))) == 0


def test_homogeneity_exact():
    # small dyadic rationals keep every sum and difference exact
    t = RNG.integers(-64, 64, (6, 7)) / 8.0
    e = RNG.integers(-64, 64, (6, 7)) / 8.0
    assert nmse(t, t + 2 * e) == 4 * nmse(t, t + e)
    assert nmae(t, t + 2 * e) == 2 * nmae(t, t + e)


def test_metric_errors():
    with pytest.raises(MetricError):
        nmse(np.zeros(3), np.ones(3))
    with pytest.raises(MetricError):
        nmae(np.zeros(3), np.ones(3))
    with pytest.raises(MetricError):
        nmse(np.ones(3), np.ones(4))
    for bad in (0.0, -1.0, float("nan")):
        with pytest.raises(MetricError):
            to_db(bad)


def test_db_values():
    assert to_db(1) == 0
    assert to_db(0.01) == pytest.approx(-20)
    assert to_db(0.004) == pytest.approx(-23.9794, abs=1e-4)
    assert db_or_floor(0.0) == DB_FLOOR and db_or_floor(1e-30) == DB_FLOOR


def test_db_monotone_preserves_order():
    vals = np.sort(RNG.uniform(1e-6, 10, 50))
    dbs = [to_db(v) for v in vals]
    assert all(a < b for a, b in zip(dbs, dbs[1:]))


def test_aggregate_is_weighted_mean_of_steps():
    t, p = field(5, 4, 3, 3), field(5, 4, 3, 3)
    num = [np.sum((t[:, k] - p[:, k]) ** 2) for k in range(4)]
    assert nmse(t, p) == pytest.approx(sum(num) / np.sum(t * t), rel=1e-12)
    per = [nmse(t[:, k], p[:, k]) * np.sum(t[:, k] ** 2) for k in range(4)]
    assert nmse(t, p) == pytest.approx(sum(per) / np.sum(t * t), rel=1e-12)


# -- curves -----------------------------------------------------------------

def test_perfect_model_curve_at_floor():
    w = field(4, 8, 1, 2, 2)
    c = per_timestep_curves(w[:, 3:6].copy(), w, J=3, K=3)
    assert c.nmse == [0.0] * 3 and c.nmse_db == [DB_FLOOR] * 3


def test_curve_length_and_models():
    w = field(3, 7, 1, 2, 2)
    c = per_timestep_curves(LinearPredictor(1.0, 0.0), w, J=4, K=3)
    assert len(c.nmse) == len(c.nmae) == 3
    np.testing.assert_allclose(c.nmse, per_timestep_curves(None, w, J=4, K=3).nmse)


def test_copy_last_degrades_with_horizon():
    cfg = D.desk_config("S1", seed=4, bursts=400, max_doppler_hz=1.0, path_lifetime=0, n_paths=3)
    ds = D.build_dataset(cfg)
    curve = per_timestep_curves(None, np.concatenate([ds.train, ds.test]), J=10, K=10).nmse
    assert all(b >= a for a, b in zip(curve, curve[1:]))


# -- CDFs -------------------------------------------------------------------

def test_constant_error_cdf_is_a_step():
    cdf = cdf_from_values([0.3] * 5)
    assert cdf.values == [0.3] * 5 and cdf.fractions[-1] == 1.0


def test_cdf_median_and_order():
    w = field(9, 6, 1, 2, 2)
    pred = w[:, 3:] + 0.1 * field(9, 3, 1, 2, 2)
    cdf = mse_cdf(pred, w, J=3, K=3)
    assert cdf.values == sorted(cdf.values)
    assert all(a <= b for a, b in zip(cdf.fractions, cdf.fractions[1:]))
    assert cdf.median() == pytest.approx(np.median(window_nmse(w[:, 3:], pred)))
    assert cdf_from_values([1.0, 2.0, 3.0, 4.0]).median() == 2.5


def test_cdf_dominance():
    w = field(12, 6, 1, 2, 2)
    good = w[:, 3:] + 0.1 * field(12, 3, 1, 2, 2)
    bad = w[:, 3:] + 2.0 * (good - w[:, 3:])
    a, b = mse_cdf(good, w, 3, 3), mse_cdf(bad, w, 3, 3)
    grid = np.linspace(0, max(b.values), 50)

    def F(c, x):
        return np.searchsorted(c.values, x, side="right") / len(c.values)
    assert all(F(a, x) >= F(b, x) for x in grid)


# -- records, ablation, reports --------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    return D.build_dataset(D.desk_config("S1", seed=1, bursts=240, delay_taps=2, n_antennas=2))


def test_evaluate_model_record(tiny):
    rec = evaluate_model(LinearPredictor(1.0, 0.0), tiny.test, J=10, K=10)
    assert rec.nmse_db == pytest.approx(to_db(rec.nmse_linear))
    assert len(rec.per_step_nmse) == 10 and len(rec.cdf) == len(tiny.test)


def test_ablation_grid_and_rerun(tiny, monkeypatch):
    monkeypatch.setenv("STPREDICT_THREADS", "1")
    vs = [VariantSpec(base="convlstm", channels=(2,)), VariantSpec(base="calstm", channels=(2,))]
    recs = run_ablation(vs, {"S1": tiny, "S1->S2": (tiny, tiny)}, seeds=[0, 1], iters=2, batch=2)
    assert len(recs) == 2 * 2 * 2
    assert [(r.train_geo, r.test_geo) for r in recs[:4]] == [("S1", "S1")] * 2 + [("S1", "S2")] * 2
    again = run_ablation(vs, {"S1": tiny, "S1->S2": (tiny, tiny)}, seeds=[0, 1], iters=2, batch=2)
    assert [r.nmse_linear for r in recs] == [r.nmse_linear for r in again]
    means = summarize(recs)
    assert len(means) == 4


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("STPREDICT_THREADS", "3")
    assert worker_count() == 3


def test_seven_row_grid_shape(tiny, monkeypatch):
    monkeypatch.setenv("STPREDICT_THREADS", "1")
    recs = run_ablation(table_variants(channels=(2, 2), ghu_channels=2), {"S1": tiny}, seeds=[0], iters=1, batch=2)
    assert [r.variant for r in recs] == [v.name for v in table_variants(channels=(2, 2), ghu_channels=2)]


def test_emit_report(tmp_path, tiny):
    recs = [evaluate_model(LinearPredictor(a, 0.0), tiny.test, 10, 10, seed=i) for i, a in enumerate((1.0, 0.5))]
    recs.append(evaluate_model(LinearPredictor(0.0, 0.0), tiny.test, 10, 10))
    emit_report(recs, tmp_path / "r", {"dataset_hash": "abc"})
    with open(tmp_path / "r" / "metrics.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(recs)
    assert (tmp_path / "r" / "metrics.csv").read_bytes().count(b"\r\n") == len(recs) + 1
    assert [float(r["nmse_linear"]) for r in rows] == [r.nmse_linear for r in recs]
    curves = json.loads((tmp_path / "r" / "curves.json").read_text())
    assert curves[0]["nmse"] == recs[0].per_step_nmse
    cdfs = json.loads((tmp_path / "r" / "cdfs.json").read_text())
    assert cdfs[1]["values"] == recs[1].cdf and cdfs[1]["fractions"][-1] == 1.0
    man = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert man["dataset_hash"] == "abc" and man["records"] == 3
    first = (tmp_path / "r" / "metrics.csv").read_bytes()
    emit_report(recs, tmp_path / "r", {"dataset_hash": "abc"})
    assert (tmp_path / "r" / "metrics.csv").read_bytes() == first


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot create"):
        emit_report([], blocker / "sub")


def test_copy_last_shape():
    w = field(2, 6, 1, 2, 2)
    f = copy_last_forecast(w, 4, 2)
    assert f.shape == (2, 2, 1, 2, 2)
    np.testing.assert_array_equal(f[:, 1], w[:, 3])
