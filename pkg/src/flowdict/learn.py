"""Supervised dictionary learning with fixed-point differentiation.

The dictionary and the classifier are updated jointly by minibatch
stochastic descent. The code ``alpha`` is differentiated through the
stationarity conditions of the lasso restricted to its active set; the
flow field is piecewise constant in the dictionary, so it contributes no
gradient.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import classifier as clf
from .alignment import align
from .lasso import (AlignedDictionary, NumericalError, SolverConfig, SparseCode,
                    assemble, kkt_residual, solve)
from .tensor import Dictionary, FlowField, GeometryError, Grid, TensorImage, tensorize

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12


class SingularActiveSetError(NumericalError):
    """The Gram matrix restricted to the active set is (near) singular."""


class FixedPointError(NumericalError):
    """The code is not a lasso solution, so the implicit gradient is invalid."""


@dataclass(frozen=True)
class LearnConfig:
    n_atoms: int = 150
    lam: float = 0.01
    mu: float = 1e-4
    rho0: float = 0.001
    batch_size: int = 512
    epochs: int = 1
    decay_halflife: int = 1000
    window_side: int = 5
    patch_size: int = 5
    stride: int = 1
    seed: int = 0
    normalize: bool = True
    refit_svm: bool = False
    n_threads: int = 1

    def __post_init__(self):
        for name in ("n_atoms", "batch_size", "decay_halflife", "window_side",
                     "patch_size", "stride", "n_threads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("lam", "rho0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.mu < 0:
            raise ValueError("epochs and mu must be nonnegative")
        if self.window_side % 2 == 0:
            raise ValueError("window_side must be odd")

    def solver(self) -> SolverConfig:
        return SolverConfig(lam=self.lam)

    def step_size(self, t: int) -> float:
        return self.rho0 / (1.0 + t / self.decay_halflife)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Model:
    dictionary: Dictionary
    classifier: clf.ClassifierParams
    config: LearnConfig
    history: tuple = ()

    @property
    def n_classes(self) -> int:
        return self.classifier.n_classes

    def tensorize(self, image) -> TensorImage:
        return prepare_image(image, self.config)

    def encode(self, image, window_side=None) -> tuple[SparseCode, FlowField]:
        x = image if isinstance(image, TensorImage) else self.tensorize(image)
        w = self.config.window_side if window_side is None else window_side
        flow, _ = align(self.dictionary, x, w)
        return solve(assemble(self.dictionary, flow, x), self.config.solver()), flow

    def predict_one(self, image, window_side=None) -> int:
        code, _ = self.encode(image, window_side)
        return clf.predict(self.classifier, code.alpha)


@dataclass(eq=False)
class TrainState:
    dictionary: Dictionary
    classifier: clf.ClassifierParams
    t: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list = field(default_factory=list)


@dataclass
class StepReport:
    n_samples: int = 0
    loss: float = 0.0
    errors: int = 0
    active: int = 0
    skipped: int = 0


def prepare_image(image, cfg: LearnConfig) -> TensorImage:
    x = tensorize(image, cfg.patch_size, cfg.stride)
    if cfg.normalize:
        norm = np.linalg.norm(x.data)
        if norm > 0:
            x = TensorImage(x.data / norm, x.grid)
    return x


def _map(fn, items, n_threads):
    n_threads = max(1, int(n_threads))
    if n_threads == 1 or len(items) < 2:
        return [fn(it) for it in items]
    # map preserves input order, keeping reductions deterministic
    with ThreadPoolExecutor(n_threads) as ex:
        return list(ex.map(fn, items))


def env_threads(default=1) -> int:
    try:
        return max(1, int(os.environ.get("FLOWDICT_THREADS", default)))
    except ValueError:
        return default


# --------------------------------------------------------------------------
# gradients

def _active_gram(aligned: AlignedDictionary, code: SparseCode):
    lam_idx = code.active_set
    sub = aligned.gram[np.ix_(lam_idx, lam_idx)]
    if lam_idx.size and np.linalg.cond(sub) > CONDITION_LIMIT:
        raise SingularActiveSetError(
            f"active Gram matrix of size {lam_idx.size} is singular")
    return lam_idx, sub


def _check_fixed_point(aligned, code, tol):
    kkt = kkt_residual(aligned, code.alpha, code.lam)
    if kkt > tol:
        raise FixedPointError(f"KKT residual {kkt:.3g} exceeds {tol:.3g}")


def grad_dictionary_adjoint(dictionary: Dictionary, flow: FlowField, x: TensorImage,
                            code: SparseCode, galpha, aligned=None,
                            kkt_tol=1e-6) -> np.ndarray:
    """Gradient of the loss w.r.t. every dictionary entry, shape ``N x M x P``.

    ``galpha`` is the loss gradient w.r.t. the code. One linear solve on the
    active set gives the adjoint ``beta``; each aligned column then receives
    ``beta_n (x_p - D_p alpha) - alpha_n D_p,act beta_act`` and is scattered
    back onto the subatom it was selected from.
    """
    galpha = np.asarray(galpha, dtype=np.float64)
    n_atoms = dictionary.n_atoms
    if galpha.shape != (n_atoms,):
        raise GeometryError("galpha must have one entry per atom")
    grad = np.zeros_like(dictionary.data)
    if aligned is None:
        aligned = assemble(dictionary, flow, x)
    _check_fixed_point(aligned, code, kkt_tol)
    act, sub = _active_gram(aligned, code)
    if act.size == 0 or not np.any(galpha[act]):
        return grad
    beta = np.linalg.solve(sub, galpha[act])
    alpha = code.alpha[act]
    eff = aligned.effective[act]                      # |A| x P x M
    resid = x.data.T - np.einsum("a,apm->pm", alpha, eff)
    back = np.einsum("a,apm->pm", beta, eff)
    g_eff = beta[:, None, None] * resid[None] - alpha[:, None, None] * back[None]
    m_dim = dictionary.grid.dim
    n_pos = dictionary.grid.n_positions
    flat = np.zeros((act.size * n_pos, m_dim))
    rows = (np.arange(act.size)[:, None] * n_pos + flow.selected[act]).ravel()
    np.add.at(flat, rows, g_eff.reshape(-1, m_dim))
    grad[act] = flat.reshape(act.size, n_pos, m_dim).transpose(0, 2, 1)
    return grad


def jacobian_entry(dictionary: Dictionary, flow: FlowField, x: TensorImage,
                   code: SparseCode, m: int, n: int, p: int,
                   kkt_tol=1e-6) -> np.ndarray:
    """Derivative of the active code entries w.r.t. entry ``m`` of subatom ``p`` of atom ``n``.

    Slow, explicit evaluation meant for checking the adjoint gradient.
    """
    aligned = assemble(dictionary, flow, x)
    _check_fixed_point(aligned, code, kkt_tol)
    act, sub = _active_gram(aligned, code)
    if act.size == 0:
        return np.zeros(0)
    n_atoms = dictionary.n_atoms
    m_dim = dictionary.grid.dim
    alpha = code.alpha[act]
    d_corr = np.zeros(act.size)
    d_gram = np.zeros((act.size, act.size))
    for q in np.flatnonzero(flow.selected[n] == p):
        dc = aligned.effective[:, q, :].T            # M x N aligned at q
        d_dc = np.zeros((m_dim, n_atoms))
        d_dc[m, n] = 1.0
        d_corr += (d_dc[:, act].T @ x.data[:, q])
        d_gram += d_dc[:, act].T @ dc[:, act] + dc[:, act].T @ d_dc[:, act]
    return np.linalg.solve(sub, d_corr - d_gram @ alpha)


def project_unit_fro(dictionary: Dictionary) -> Dictionary:
    norms = dictionary.norms()
    if np.any(norms == 0):
        raise NumericalError("cannot project an all-zero atom")
    data = dictionary.data / norms[:, None, None]
    return Dictionary(data, dictionary.grid, dictionary.class_hint)


# --------------------------------------------------------------------------
# training

def _sample_gradients(state, cfg, sample):
    x, label = sample
    flow, _ = align(state.dictionary, x, cfg.window_side)
    aligned = assemble(state.dictionary, flow, x)
    code = solve(aligned, cfg.solver())
    params = state.classifier
    loss = clf.loss(params, code.alpha, label)
    pred = clf.predict(params, code.alpha)
    g_w = clf.loss_grad_W(params, code.alpha, label)
    g_d = None
    if code.active_set.size:
        galpha = clf.loss_grad_alpha(params, code.alpha, label)
        try:
            g_d = grad_dictionary_adjoint(state.dictionary, flow, x, code, galpha,
                                          aligned=aligned)
        except (SingularActiveSetError, FixedPointError) as exc:
            logger.warning("skipping sample: %s", exc)
            return None
    return loss, int(pred != label.class_index), code.active_set.size, g_w, g_d


def batch_gradients(state: TrainState, batch, cfg: LearnConfig, report=None):
    """Mean classifier and dictionary gradients over ``batch``.

    Returns ``(grad_W, grad_D, n_used)``; skipped samples do not count.
    """
    batch = list(batch)
    grad_w = np.zeros_like(state.classifier.weights)
    grad_d = np.zeros_like(state.dictionary.data)
    used = 0
    report = report if report is not None else StepReport()
    chunk = max(1, int(cfg.n_threads))
    # per-sample gradients are dictionary-sized: reduce chunk by chunk, in order
    for start in range(0, len(batch), chunk):
        part = batch[start:start + chunk]
        for res in _map(lambda s: _sample_gradients(state, cfg, s), part, cfg.n_threads):
            if res is None:
                report.skipped += 1
                continue
            loss, err, n_act, g_w, g_d = res
            used += 1
            grad_w += g_w
            if g_d is not None:
                grad_d += g_d
            report.n_samples += 1
            report.loss += loss
            report.errors += err
            report.active += n_act
    if used:
        grad_w /= used
        grad_d /= used
    return grad_w, grad_d, used


def sgd_step(state: TrainState, batch, cfg: LearnConfig, report=None) -> TrainState:
    """One projected stochastic-gradient step on a minibatch of ``(TensorImage, Label)``."""
    if not batch:
        raise ValueError("empty batch")
    grad_w, grad_d, used = batch_gradients(state, batch, cfg, report)
    rate = cfg.step_size(state.t)
    dictionary, params = state.dictionary, state.classifier
    if used:
        params = clf.ClassifierParams(params.weights - rate * grad_w, params.mu)
        if np.any(grad_d):
            dictionary = project_unit_fro(Dictionary(
                dictionary.data - rate * grad_d, dictionary.grid, dictionary.class_hint))
    return TrainState(dictionary, params, state.t + 1, state.rng, state.history)


def init_dictionary(images, labels, n_atoms, cfg: LearnConfig, seed=None) -> Dictionary:
    """Class-stratified sample of training images used as initial atoms."""
    labels = np.asarray(labels)
    if len(images) < n_atoms:
        raise ValueError(f"need at least {n_atoms} samples, got {len(images)}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    classes = np.unique(labels)
    quota = np.full(classes.size, n_atoms // classes.size)
    extra = n_atoms - quota.sum()
    if extra:
        quota[np.sort(rng.choice(classes.size, extra, replace=False))] += 1
    picks, hint = [], []
    for c, k in zip(classes, quota):
        members = np.flatnonzero(labels == c)
        if members.size < k:
            raise ValueError(f"class {c} has {members.size} samples, needs {k}")
        chosen = np.sort(rng.choice(members, k, replace=False))
        picks.extend(chosen)
        hint.extend([c] * k)
    atoms = [tensorize(images[i], cfg.patch_size, cfg.stride) for i in picks]
    grid = atoms[0].grid
    data = np.stack([a.data for a in atoms])
    norms = np.linalg.norm(data.reshape(len(atoms), -1), axis=1)
    if np.any(norms == 0):
        raise ValueError("an initial atom is an all-zero image")
    return project_unit_fro(Dictionary(data, grid, np.asarray(hint)))


def _as_samples(images, labels, cfg, n_classes):
    return [(prepare_image(img, cfg), clf.Label(int(y), n_classes))
            for img, y in zip(images, labels)]


def encode_all(dictionary, samples, cfg: LearnConfig, window_side=None):
    w = cfg.window_side if window_side is None else window_side
    solver = cfg.solver()

    def one(x):
        flow, _ = align(dictionary, x, w)
        return solve(assemble(dictionary, flow, x), solver).alpha

    return np.stack(_map(one, list(samples), cfg.n_threads))


def refit_classifier(codes, labels, n_classes, mu, init=None) -> clf.ClassifierParams:
    """Train the one-vs-all squared-hinge classifier on frozen codes (full batch)."""
    codes = np.asarray(codes, dtype=np.float64)
    n, dim = codes.shape
    aug = np.hstack([codes, np.ones((n, 1))])
    y = -np.ones((n, n_classes))
    y[np.arange(n), np.asarray(labels)] = 1.0
    reg = np.ones(dim + 1)
    reg[-1] = 0.0

    def fun(w_flat):
        w = w_flat.reshape(n_classes, dim + 1)
        slack = np.maximum(0.0, 1.0 - y * (aug @ w.T))
        f = (slack ** 2).sum() / n + 0.5 * mu * ((w * reg) ** 2).sum()
        g = -2.0 * (slack * y).T @ aug / n + mu * w * reg
        return f, g.ravel()

    w0 = np.zeros((n_classes, dim + 1)) if init is None else init.weights
    res = minimize(fun, np.ravel(w0), jac=True, method="L-BFGS-B",
                   options={"maxiter": 2000})
    return clf.ClassifierParams(res.x.reshape(n_classes, dim + 1), mu)


def train(dataset, cfg: LearnConfig, n_classes=None, callback=None,
          step_callback=None) -> Model:
    """Jointly learn the dictionary and classifier.

    ``dataset`` is any object with ``images`` and ``labels`` sequences, or an
    ``(images, labels)`` pair. One metrics row is recorded per epoch and passed
    to ``callback(epoch, state, row)``; ``step_callback(state)`` runs after
    every minibatch update.
    """
    images, labels = (dataset.images, dataset.labels) if hasattr(dataset, "images") \
        else dataset
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty training set")
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if np.unique(labels).size < 2:
        raise ValueError("training needs at least two classes")

    dictionary = init_dictionary(images, labels, cfg.n_atoms, cfg)
    params = clf.ClassifierParams.from_class_hint(dictionary.class_hint, n_classes, cfg.mu)
    rng = np.random.default_rng(cfg.seed + 1)
    state = TrainState(dictionary, params, 0, rng, [])
    samples = _as_samples(images, labels, cfg, n_classes)
    history = []
    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        order = rng.permutation(len(samples))
        report = StepReport()
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            state = sgd_step(state, batch, cfg, report)
            if step_callback is not None:
                step_callback(state)
        used = max(report.n_samples, 1)
        row = {"epoch": epoch,
               "mean_loss": report.loss / used,
               "train_error": report.errors / used,
               "mean_active_set": report.active / used,
               "wall_seconds": time.perf_counter() - tic}
        history.append(row)
        logger.info("epoch %d loss %.5f error %.4f", epoch, row["mean_loss"],
                    row["train_error"])
        if callback is not None:
            callback(epoch, state, row)
    params = state.classifier
    if cfg.refit_svm:
        codes = encode_all(state.dictionary, [s[0] for s in samples], cfg)
        params = refit_classifier(codes, labels, n_classes, cfg.mu, init=params)
    return Model(state.dictionary, params, cfg, tuple(history))


def with_window(cfg: LearnConfig, window_side: int) -> LearnConfig:
    return replace(cfg, window_side=int(window_side))
