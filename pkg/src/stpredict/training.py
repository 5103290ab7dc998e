"""Losses, the supervised trainer and the meta pseudo-label trainer."""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, add, mse, mul, no_grad, scale, sub, sum as tsum
from .network import rollout


class NumericAbort(RuntimeError):
    """A loss or gradient went non-finite."""

    def __init__(self, message, iteration=None, stage=None):
        super().__init__(message)
        self.iteration = iteration
        self.stage = stage


# -- losses --------------------------------------------------------------------

@dataclass
class LossReport:
    """Rollout loss split into the teacher-forced (APE-free) and autoregressive (APE) parts.

    All three share the denominator ``(L - 1) * elements_per_step``, so
    ``total == ape_free + ape``. ``loss`` is the differentiable total.
    """
    total: float
    ape_free: float
    ape: float
    per_step: list
    loss: Tensor = field(default=None, repr=False)


def _targets(rollout_, frames):
    frames = np.asarray(frames)
    n = len(rollout_.predictions)
    if frames.ndim != 5 or frames.shape[1] < n + 1:
        raise ValueError(f"targets need {n + 1} frames [B, L, D, S, S], got shape {frames.shape}")
    return frames


def _sum_terms(terms):
    acc = None
    for t in terms:
        acc = t if acc is None else add(acc, t)
    return acc


def mse_loss(rollout_, frames):
    """Mean squared error of a rollout against ``frames[:, 1:J+K]``."""
    frames = _targets(rollout_, frames)
    preds, J = rollout_.predictions, rollout_.J
    n = len(preds)
    steps = [mse(p, frames[:, s + 1]) for s, p in enumerate(preds)]
    free = scale(_sum_terms(steps[:J - 1]), 1.0 / n) if J > 1 else None
    ape = scale(_sum_terms(steps[J - 1:]), 1.0 / n) if n > J - 1 else None
    total = free if ape is None else (ape if free is None else add(free, ape))
    return LossReport(
        total=float(total.data), ape_free=float(free.data) if free is not None else 0.0,
        ape=float(ape.data) if ape is not None else 0.0,
        per_step=[float(s.data) for s in steps], loss=total)


def frame_weights(frames, steps=None):
    """Softmax weights over target frames ``t = 2 .. L`` from similarity to the mean frame.

    ``frames`` is ``[B, L, ...]``; the mean runs over all ``L`` frames and the
    inner product is divided by the per-frame element count. Returns ``[B, L-1]``.
    """
    x = np.asarray(frames, dtype=np.float64)
    B, L = x.shape[:2]
    flat = x.reshape(B, L, -1)
    mean = flat.mean(axis=1, keepdims=True)
    logits = -0.5 * (flat[:, 1:] * mean).sum(axis=-1) / flat.shape[-1]
    if steps is not None:
        logits = logits[:, :steps]
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def weighted_mse(rollout_, target, frames=None):
    """Per-step squared errors weighted by :func:`frame_weights`.

    ``frames`` defaults to ``target``; each window carries its own weights.
    Returns a :class:`LossReport` whose ``total`` is the weighted loss.
    """
    target = _targets(rollout_, target)
    frames = target if frames is None else np.asarray(frames)
    preds, J = rollout_.predictions, rollout_.J
    n = len(preds)
    w = frame_weights(frames[:, :n + 1])
    B = target.shape[0]
    terms, per_step = [], []
    for s, p in enumerate(preds):
        d = sub(p, Tensor(target[:, s + 1], dtype=p.dtype))
        per = p.data[0].size
        wt = (w[:, s] / (B * per)).astype(p.dtype).reshape((B,) + (1,) * (p.ndim - 1))
        terms.append(tsum(mul(mul(d, d), Tensor(wt, dtype=p.dtype))))
        per_step.append(float(np.mean((p.data - target[:, s + 1]) ** 2)))
    free = _sum_terms(terms[:J - 1]) if J > 1 else None
    ape = _sum_terms(terms[J - 1:]) if n > J - 1 else None
    total = free if ape is None else (ape if free is None else add(free, ape))
    return LossReport(float(total.data), float(free.data) if free is not None else 0.0,
                      float(ape.data) if ape is not None else 0.0, per_step, total)


def compute_loss(rollout_, frames, adaptive=False):
    return weighted_mse(rollout_, frames) if adaptive else mse_loss(rollout_, frames)


# -- helpers -------------------------------------------------------------------

def param_list(model):
    return list(model.params.values())


def gradients(loss, params):
    """Gradients of ``loss`` w.r.t. ``params`` as fresh arrays; leaves ``.grad`` clean."""
    for p in params:
        p.grad = None
    loss.backward()
    out = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for p in params:
        p.grad = None
    return out


def _finite(grads):
    return all(np.isfinite(g).all() for g in grads)


def _dot(a, b):
    return float(sum(np.vdot(x.astype(np.float64), y.astype(np.float64)) for x, y in zip(a, b)))


def _norm(a):
    return math.sqrt(_dot(a, a))


class BatchSampler:
    """Epoch-wise shuffled minibatches; wraps to a fresh permutation."""

    def __init__(self, n, batch, rng):
        if n < 1:
            raise ValueError("cannot sample batches from an empty set")
        self.n, self.batch, self.rng = n, min(batch, n), rng
        self.perm, self.pos = rng.permutation(n), 0

    def next(self):
        if self.pos + self.batch > self.n:
            self.perm, self.pos = self.rng.permutation(self.n), 0
        idx = self.perm[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return np.sort(idx)


def forecast_nmse(model, windows, J, K, batch=16):
    """Linear NMSE over the ``K`` forecast frames of ``windows``."""
    num = den = 0.0
    for s in range(0, len(windows), batch):
        w = windows[s:s + batch]
        with no_grad():
            pred = rollout(model, w, J, K, mode="eval").numpy()[J - 1:]
        truth = np.moveaxis(w[:, J:J + K], 1, 0)
        num += float(np.sum((truth.astype(np.float64) - pred) ** 2))
        den += float(np.sum(truth.astype(np.float64) ** 2))
    return num / den if den > 0 else float("nan")


def _db(x):
    return 10 * math.log10(x) if x > 0 else -120.0


class History:
    """In-memory list of records, mirrored to a JSONL file when a path is given."""

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def append(self, rec):
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __iter__(self):
        return iter(self.records)


def _splits(dataset):
    if isinstance(dataset, (tuple, list)):
        train = np.asarray(dataset[0])
        val = np.asarray(dataset[1]) if len(dataset) > 1 and dataset[1] is not None else None
        return train, val
    if isinstance(dataset, np.ndarray):
        return dataset, None
    return dataset.train, getattr(dataset, "val", None)


# -- supervised ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    history: History
    final_val_nmse: float = None


def supervised_train(model, dataset, iters=10000, batch=8, lr=1e-3, seed=0, J=10, K=10,
                     val_every=100, history_path=None, adaptive=False, on_batch=None):
    """ADAM on the rollout MSE. Aborts with :class:`NumericAbort` on a non-finite loss."""
    train, val = _splits(dataset)
    rng = np.random.default_rng(seed)
    sampler = BatchSampler(len(train), batch, rng)
    params = param_list(model)
    opt = Adam(params, lr=lr)
    hist = History(history_path)
    val_nmse = None
    try:
        for it in range(1, iters + 1):
            idx = sampler.next()
            frames = train[idx, :J + K]
            report = compute_loss(rollout(model, frames, J, K), frames, adaptive)
            if not math.isfinite(report.total):
                raise NumericAbort(f"non-finite training loss at iteration {it}", it, "supervised")
            grads = gradients(report.loss, params)
            if not _finite(grads):
                raise NumericAbort(f"non-finite gradient at iteration {it}", it, "supervised")
            opt.step(grads)
            rec = {"iter": it, "total": report.total, "ape_free": report.ape_free, "ape": report.ape}
            if val is not None and len(val) and (it % val_every == 0 or it == iters):
                val_nmse = forecast_nmse(model, val, J, K)
                rec["val_nmse_db"] = _db(val_nmse)
            if on_batch is not None:
                on_batch(it, report)
            hist.append(rec)
    finally:
        hist.close()
    return TrainResult(model, hist, val_nmse)


# -- meta pseudo labels --------------------------------------------------------

@dataclass
class MetaConfig:
    student_lr: float = 1e-3
    teacher_lr: float = 1e-3
    labeled_fraction: float = 0.1
    adaptive: bool = False
    feedback_clip: float = 10.0
    observed_prefix: bool = True
    student_optimizer: str = "sgd"
    teacher_supervised: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.student_lr > 0 and self.teacher_lr > 0):
            raise ValueError("student_lr and teacher_lr must be positive")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if self.feedback_clip < 0:
            raise ValueError("feedback_clip must be non-negative")
        if self.student_optimizer not in ("sgd", "adam"):
            raise ValueError(f"student_optimizer must be 'sgd' or 'adam', got {self.student_optimizer!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class MetaStepDiagnostics:
    h: float
    h_raw: float
    unlabeled_loss: float
    student_labeled_loss: float
    teacher_labeled_loss: float   # None when the teacher has no supervised term
    student_grad_norm: float
    teacher_grad_norm: float
    feedback_grad: list = field(default=None, repr=False)
    teacher_grad: list = field(default=None, repr=False)

    def record(self):
        d = asdict(self)
        d.pop("feedback_grad")
        d.pop("teacher_grad")
        return d


class MetaState:
    """Optimizer state for one teacher/student pair."""

    def __init__(self, teacher, student, cfg):
        self.teacher_opt = Adam(param_list(teacher), lr=cfg.teacher_lr)
        self.student_opt = Adam(param_list(student), lr=cfg.student_lr) if cfg.student_optimizer == "adam" else None


def _pseudo_targets(teacher_roll, unlabeled, J, K, observed_prefix):
    """Detached pseudo frames aligned with ``frames[:, :J+K]`` and the mask of teacher-made steps."""
    preds = teacher_roll.numpy()          # [J+K-1, B, ...]
    B = unlabeled.shape[0]
    out = np.empty((B, J + K) + preds.shape[2:], dtype=preds.dtype)
    out[:, 0] = unlabeled[:, 0]
    out[:, 1:] = np.moveaxis(preds, 0, 1)
    teacher_steps = np.ones(J + K - 1, dtype=bool)
    if observed_prefix:
        out[:, 1:J] = unlabeled[:, 1:J]
        teacher_steps[:J - 1] = False
    return out, teacher_steps


def _check(grads, stage, it):
    if not _finite(grads):
        raise NumericAbort(f"non-finite gradient in stage '{stage}'" + (f" at iteration {it}" if it else ""), it, stage)


def meta_step(teacher, student, labeled, unlabeled, cfg, J=10, K=10, state=None, iteration=None):
    """One teacher/student update.

    ``labeled`` is ``[B, J+K, ...]``; only the first ``J`` frames of
    ``unlabeled`` are read. Returns ``(teacher, student, diagnostics)``; both
    models are updated in place.
    """
    state = state or MetaState(teacher, student, cfg)
    t_params, s_params = param_list(teacher), param_list(student)
    labeled = np.asarray(labeled)[:, :J + K]
    unlabeled = np.asarray(unlabeled)[:, :J]

    # 1. pseudo targets from the teacher; its graph is kept for the feedback term
    t_roll_u = rollout(teacher, unlabeled, J, K)
    pseudo, teacher_steps = _pseudo_targets(t_roll_u, unlabeled, J, K, cfg.observed_prefix)

    # 2. student step on the unlabeled loss only
    s_roll_u = rollout(student, unlabeled, J, K)
    lu = mse_loss(s_roll_u, pseudo)
    g_u = gradients(lu.loss, s_params)
    _check(g_u, "student-unlabeled", iteration)
    s_pred_u = s_roll_u.numpy()
    before = [p.data.copy() for p in s_params]
    if state.student_opt is None:
        for p, g in zip(s_params, g_u):
            p.data -= p.data.dtype.type(cfg.student_lr) * g
    else:
        state.student_opt.step(g_u)

    # 3. feedback scalar from the updated student on labeled data; with an
    # adaptive optimizer the realised step stands in for lr * grad
    ll_s = compute_loss(rollout(student, labeled, J, K), labeled, cfg.adaptive)
    g_l = gradients(ll_s.loss, s_params)
    _check(g_l, "student-labeled", iteration)
    if state.student_opt is None:
        h_raw = cfg.student_lr * _dot(g_l, g_u)
    else:
        h_raw = -_dot(g_l, [p.data - b for p, b in zip(s_params, before)])
    h = float(np.clip(h_raw, -cfg.feedback_clip, cfg.feedback_clip))

    # 4. teacher: feedback through its pseudo targets plus its own supervised loss
    n = len(t_roll_u.predictions)
    fb_terms = [mse(p, s_pred_u[s]) for s, p in enumerate(t_roll_u.predictions) if teacher_steps[s]]
    if h != 0 and fb_terms:
        fb = gradients(scale(_sum_terms(fb_terms), 1.0 / n), t_params)
        feedback = [-h * g for g in fb]
    else:
        feedback = [np.zeros_like(p.data) for p in t_params]
    _check(feedback, "teacher-feedback", iteration)
    if cfg.teacher_supervised:
        ll_t = compute_loss(rollout(teacher, labeled, J, K), labeled, cfg.adaptive)
        g_t = gradients(ll_t.loss, t_params)
        _check(g_t, "teacher-labeled", iteration)
        t_loss = ll_t.total
    else:
        g_t, t_loss = [np.zeros_like(p.data) for p in t_params], None
    t_grad = [a + b for a, b in zip(g_t, feedback)]
    state.teacher_opt.step(t_grad)

    diag = MetaStepDiagnostics(
        h=h, h_raw=float(h_raw), unlabeled_loss=lu.total, student_labeled_loss=ll_s.total,
        teacher_labeled_loss=t_loss, student_grad_norm=_norm(g_u), teacher_grad_norm=_norm(t_grad),
        feedback_grad=feedback, teacher_grad=t_grad)
    return teacher, student, diag


def meta_train(teacher, student, labeled_set, unlabeled_set, cfg, iters=10000, seed=0, batch=8,
               J=10, K=10, val_set=None, val_every=100, history_path=None):
    """Loop :func:`meta_step`; the student is the evaluated network.

    With an empty unlabeled set both networks are trained with
    :func:`supervised_train` on the labeled data, with the same seed and
    ``teacher_lr`` as the ADAM rate.
    """
    labeled_set = np.asarray(labeled_set)
    unlabeled_set = np.asarray(unlabeled_set) if unlabeled_set is not None else np.zeros((0,))
    if len(unlabeled_set) == 0:
        data = (labeled_set, val_set)
        res_s = supervised_train(student, data, iters, batch, cfg.teacher_lr, seed, J, K, val_every,
                                 history_path, cfg.adaptive)
        supervised_train(teacher, data, iters, batch, cfg.teacher_lr, seed, J, K, val_every, None, cfg.adaptive)
        return teacher, student, res_s.history
    rng = np.random.default_rng(seed)
    lab = BatchSampler(len(labeled_set), batch, rng)
    unl = BatchSampler(len(unlabeled_set), batch, rng)
    state = MetaState(teacher, student, cfg)
    hist = History(history_path)
    try:
        for it in range(1, iters + 1):
            lb = labeled_set[lab.next()]
            ub = unlabeled_set[unl.next()]
            _, _, diag = meta_step(teacher, student, lb, ub, cfg, J, K, state, iteration=it)
            rec = {"iter": it, **diag.record()}
            for key in ("unlabeled_loss", "student_labeled_loss", "teacher_labeled_loss"):
                if rec[key] is not None and not math.isfinite(rec[key]):
                    raise NumericAbort(f"non-finite {key} at iteration {it}", it, key)
            if val_set is not None and len(val_set) and (it % val_every == 0 or it == iters):
                rec["student_val_nmse_db"] = _db(forecast_nmse(student, val_set, J, K))
                rec["teacher_val_nmse_db"] = _db(forecast_nmse(teacher, val_set, J, K))
            hist.append(rec)
    finally:
        hist.close()
    return teacher, student, hist
