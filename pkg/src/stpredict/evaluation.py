"""Metrics, per-step curves, CDFs, the ablation grid and report files."""
import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import no_grad
from .network import VariantSpec, build_model, count_flops, count_params, rollout

DB_FLOOR = -120.0


class MetricError(ValueError):
    pass


def _pair(truth, pred):
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape:
        raise MetricError(f"truth {t.shape} and prediction {p.shape} differ in shape")
    return t, p


def nmse(truth, pred):
    """Squared error energy over truth energy (Frobenius reading of the matrix norm)."""
    t, p = _pair(truth, pred)
    den = float(np.sum(t * t))
    if den == 0:
        raise MetricError("nmse undefined: ground truth has zero energy")
    return float(np.sum((t - p) ** 2)) / den


def nmae(truth, pred):
    t, p = _pair(truth, pred)
    den = float(np.sum(np.abs(t)))
    if den == 0:
        raise MetricError("nmae undefined: ground truth is identically zero")
    return float(np.sum(np.abs(t - p))) / den


def to_db(x):
    if not x > 0:
        raise MetricError(f"dB conversion needs a positive value, got {x}")
    return 10.0 * math.log10(x)


def db_or_floor(x):
    """dB value with the sentinel floor for exact zeros."""
    return DB_FLOOR if x == 0 else max(to_db(x), DB_FLOOR)


# -- predictions -------------------------------------------------------------------

def forecast(model, windows, J, K, batch=16):
    """Forecast frames ``J+1 .. J+K`` for every window, shape ``[n, K, ...]``."""
    windows = np.asarray(windows)
    out = []
    for s in range(0, len(windows), batch):
        with no_grad():
            r = rollout(model, windows[s:s + batch], J, K, mode="eval")
        out.append(np.moveaxis(r.numpy()[J - 1:], 0, 1))
    return np.concatenate(out) if out else np.zeros((0, K) + windows.shape[2:], np.float32)


def copy_last_forecast(windows, J, K):
    """Baseline that repeats the last observed frame."""
    windows = np.asarray(windows)
    return np.repeat(windows[:, J - 1:J], K, axis=1)


def _as_forecast(source, windows, J, K):
    if source is None:
        return copy_last_forecast(windows, J, K)
    if isinstance(source, np.ndarray):
        return source
    return forecast(source, windows, J, K)


@dataclass
class Curves:
    nmse: list
    nmae: list

    @property
    def nmse_db(self):
        return [db_or_floor(v) for v in self.nmse]

    @property
    def nmae_db(self):
        return [db_or_floor(v) for v in self.nmae]


def curves_from_forecast(truth, pred):
    """Per-step ratio of sums over windows; ``truth``/``pred`` are ``[n, K, ...]``."""
    t, p = _pair(truth, pred)
    K = t.shape[1]
    return Curves([nmse(t[:, k], p[:, k]) for k in range(K)], [nmae(t[:, k], p[:, k]) for k in range(K)])


def per_timestep_curves(model, test_set, J=10, K=10):
    """``model`` may be a network, a precomputed ``[n, K, ...]`` forecast, or ``None`` for copy-last."""
    test_set = np.asarray(test_set)
    pred = _as_forecast(model, test_set, J, K)
    return curves_from_forecast(test_set[:, J:J + K], pred)


@dataclass
class CdfSeries:
    values: list
    fractions: list

    def median(self):
        v = self.values
        n = len(v)
        return 0.5 * (v[(n - 1) // 2] + v[n // 2])


def cdf_from_values(values):
    v = sorted(float(x) for x in values)
    n = len(v)
    return CdfSeries(v, [(i + 1) / n for i in range(n)])


def window_nmse(truth, pred):
    return [nmse(t, p) for t, p in zip(truth, pred)]


def mse_cdf(model, test_set, J=10, K=10):
    """Empirical CDF of per-window NMSE over the forecast frames."""
    test_set = np.asarray(test_set)
    pred = _as_forecast(model, test_set, J, K)
    return cdf_from_values(window_nmse(test_set[:, J:J + K], pred))


# -- records -------------------------------------------------------------------

@dataclass
class MetricsRecord:
    variant: str
    train_geo: str
    test_geo: str
    seed: int
    nmse_linear: float
    nmse_db: float
    nmae_linear: float
    nmae_db: float
    per_step_nmse: list
    per_step_nmae: list
    cdf: list = field(default_factory=list)
    params: int = 0
    flops: int = 0
    spec: dict = field(default_factory=dict)

    def row(self):
        return {k: getattr(self, k) for k in CSV_FIELDS}


CSV_FIELDS = ("variant", "train_geo", "test_geo", "seed", "nmse_linear", "nmse_db",
              "nmae_linear", "nmae_db", "params", "flops")


def evaluate_model(model, test_set, J=10, K=10, train_geo="", test_geo="", seed=0, with_flops=False):
    test_set = np.asarray(test_set)
    truth = test_set[:, J:J + K]
    pred = forecast(model, test_set, J, K)
    curves = curves_from_forecast(truth, pred)
    lin, mae = nmse(truth, pred), nmae(truth, pred)
    variant = getattr(model, "variant", None)
    return MetricsRecord(
        variant=variant.name if variant else type(model).__name__, train_geo=train_geo, test_geo=test_geo,
        seed=int(seed), nmse_linear=lin, nmse_db=db_or_floor(lin), nmae_linear=mae, nmae_db=db_or_floor(mae),
        per_step_nmse=curves.nmse, per_step_nmae=curves.nmae, cdf=cdf_from_values(window_nmse(truth, pred)).values,
        params=count_params(model) if variant else 0,
        flops=count_flops(model, L=J + K) if (variant and with_flops) else 0,
        spec=variant.to_dict() if variant else {})


# -- ablation --------------------------------------------------------------------

@dataclass
class AblationJob:
    variant: VariantSpec
    train_geo: str
    test_geo: str
    seed: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    iters: int
    batch: int
    lr: float
    J: int
    K: int


def _run_job(job):
    from .training import supervised_train
    model = build_model(job.variant, job.train.shape[2], job.train.shape[-1], seed=job.seed)
    supervised_train(model, (job.train, job.val), iters=job.iters, batch=job.batch, lr=job.lr,
                     seed=job.seed, J=job.J, K=job.K, val_every=max(job.iters, 1))
    return evaluate_model(model, job.test, job.J, job.K, job.train_geo, job.test_geo, job.seed)


def worker_count(default=None):
    env = os.environ.get("STPREDICT_THREADS")
    if env:
        return max(1, int(env))
    return default or os.cpu_count() or 1


def run_ablation(variants, scenarios, seeds, iters=1000, batch=8, lr=1e-3, J=10, K=10, workers=None):
    """Train and evaluate every ``variant × scenario × seed``.

    ``scenarios`` maps a label to a dataset (anything with ``train``/``val``/
    ``test``) or to a ``(train_dataset, test_dataset)`` pair for cross-scenario
    runs, labelled ``"A->B"``. Records come back in grid order.
    """
    jobs = []
    for v in variants:
        for label, ds in scenarios.items():
            if isinstance(ds, tuple):
                tr, te = ds
                train_geo, _, test_geo = label.partition("->")
            else:
                tr = te = ds
                train_geo = test_geo = label
            for s in seeds:
                jobs.append(AblationJob(v, train_geo, test_geo or train_geo, int(s), tr.train, tr.val,
                                        te.test, iters, batch, lr, J, K))
    workers = min(worker_count(), len(jobs)) if workers is None else workers
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_job, jobs))


def summarize(records, key="nmse_db"):
    """Mean metric per (variant, train_geo, test_geo), in first-seen order."""
    out = {}
    for r in records:
        out.setdefault((r.variant, r.train_geo, r.test_geo), []).append(getattr(r, key))
    return {k: float(np.mean(v)) for k, v in out.items()}


# -- reports -------------------------------------------------------------------

def emit_report(records, out_dir, manifest=None):
    """Write ``metrics.csv``, ``curves.json``, ``cdfs.json`` and ``manifest.json``.

    No timestamps or host details, so reruns are byte-identical.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out_dir!r}: {e}") from e
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\r\n")
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})
    curves = [{"variant": r.variant, "train_geo": r.train_geo, "test_geo": r.test_geo, "seed": r.seed,
               "nmse": r.per_step_nmse, "nmae": r.per_step_nmae,
               "nmse_db": [db_or_floor(v) for v in r.per_step_nmse],
               "nmae_db": [db_or_floor(v) for v in r.per_step_nmae]} for r in records]
    cdfs = [{"variant": r.variant, "train_geo": r.train_geo, "test_geo": r.test_geo, "seed": r.seed,
             "values": r.cdf, "fractions": [(i + 1) / len(r.cdf) for i in range(len(r.cdf))]} for r in records]
    for name, obj in (("curves.json", curves), ("cdfs.json", cdfs)):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
            fh.write("\n")
    man = {"records": len(records),
           "specs": [r.spec for r in records], "seeds": sorted({r.seed for r in records})}
    if manifest:
        man.update(manifest)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir
