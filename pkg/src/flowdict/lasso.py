"""L1 sparse coding over an aligned dictionary, solved with ADMM.

All positions share one code vector, so the problem is solved in its
``N``-dimensional normal form::

    minimize  0.5 * a' G a - b' a + 0.5 * ||x||^2 + lam * ||a||_1

with ``G = sum_p Dp' Dp`` and ``b = sum_p Dp' x_p`` where ``Dp`` is the
``M x N`` matrix of subatoms aligned at position ``p``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .alignment import align
from .tensor import Dictionary, FlowField, GeometryError, TensorImage, effective_columns

logger = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    """Raised on non-finite data or a degenerate linear system."""


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 0.01
    admm_penalty: float = 1.0
    eps_abs: float = 1e-6
    eps_rel: float = 1e-4
    max_iter: int = 1000
    activation_tol: float = 1e-8
    kkt_tol: float = 1e-6
    adapt_penalty: bool = True

    def __post_init__(self):
        for name in ("lam", "admm_penalty", "eps_abs", "eps_rel",
                     "activation_tol", "kkt_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class SolverStats:
    iterations: int = 0
    primal_residual: float = 0.0
    dual_residual: float = 0.0
    objective: float = 0.0
    kkt: float = 0.0
    penalty: float = 1.0
    converged: bool = True


@dataclass(frozen=True, eq=False)
class SparseCode:
    alpha: np.ndarray
    active_set: np.ndarray
    lam: float
    stats: SolverStats = field(default_factory=SolverStats)

    @classmethod
    def from_alpha(cls, alpha, lam, activation_tol=1e-8, stats=None):
        alpha = np.array(alpha, dtype=np.float64, copy=True)
        alpha.setflags(write=False)
        active = np.flatnonzero(np.abs(alpha) > activation_tol)
        return cls(alpha, active, float(lam), stats or SolverStats())


@dataclass(frozen=True, eq=False)
class AlignedDictionary:
    """Aligned subatoms for one image plus the normal-equation terms.

    ``effective`` is ``N x P x M``: ``effective[n, p]`` is the subatom of
    atom ``n`` selected at position ``p``.
    """

    effective: np.ndarray
    gram: np.ndarray
    correlation: np.ndarray
    x_sqnorm: float

    @property
    def n_atoms(self) -> int:
        return self.gram.shape[0]

    @property
    def stacked(self) -> np.ndarray:
        """The ``(P*M) x N`` operator, rows ordered position-major."""
        n = self.effective.shape[0]
        return self.effective.reshape(n, -1).T

    def objective(self, alpha, lam) -> float:
        alpha = np.asarray(alpha, dtype=np.float64)
        quad = 0.5 * alpha @ self.gram @ alpha - self.correlation @ alpha
        return float(max(quad + 0.5 * self.x_sqnorm, 0.0) + lam * np.abs(alpha).sum())


def assemble(dictionary: Dictionary, flow: FlowField, x: TensorImage) -> AlignedDictionary:
    if not dictionary.grid.compatible(x.grid):
        raise GeometryError("image grid does not match the dictionary grid")
    eff = effective_columns(dictionary, flow)
    stacked = eff.reshape(eff.shape[0], -1).T
    target = x.data.T.ravel()
    gram = stacked.T @ stacked
    gram = 0.5 * (gram + gram.T)
    return AlignedDictionary(eff, gram, stacked.T @ target, float(target @ target))


def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def kkt_residual(aligned: AlignedDictionary, alpha, lam, activation_tol=1e-8) -> float:
    """Largest violation of the lasso stationarity conditions."""
    alpha = np.asarray(alpha, dtype=np.float64)
    grad = aligned.gram @ alpha - aligned.correlation
    active = np.abs(alpha) > activation_tol
    viol = np.where(active,
                    np.abs(grad + lam * np.sign(alpha)),
                    np.maximum(np.abs(grad) - lam, 0.0))
    return float(viol.max()) if viol.size else 0.0


def _polish(aligned, z, lam, cfg):
    """Re-solve exactly on the support and signs found by ADMM."""
    support = np.flatnonzero(np.abs(z) > cfg.activation_tol)
    alpha = np.zeros_like(z)
    if support.size:
        sub = aligned.gram[np.ix_(support, support)]
        rhs = aligned.correlation[support] - lam * np.sign(z[support])
        try:
            alpha[support] = np.linalg.solve(sub, rhs)
        except np.linalg.LinAlgError:
            return None
        if np.any(np.sign(alpha[support]) != np.sign(z[support])):
            return None
    return alpha


def solve(aligned: AlignedDictionary, cfg: SolverConfig | None = None,
          init=None) -> SparseCode:
    """Lasso by scaled-form ADMM with residual balancing and support polishing."""
    cfg = cfg or SolverConfig()
    gram, b = aligned.gram, aligned.correlation
    if not (np.all(np.isfinite(gram)) and np.all(np.isfinite(b))):
        raise NumericalError("non-finite values in the aligned dictionary")
    n = b.shape[0]
    lam = cfg.lam
    rho = cfg.admm_penalty

    if np.max(np.abs(b), initial=0.0) <= lam:
        alpha = np.zeros(n)
        stats = SolverStats(0, 0.0, 0.0, aligned.objective(alpha, lam),
                            kkt_residual(aligned, alpha, lam), rho, True)
        return SparseCode.from_alpha(alpha, lam, cfg.activation_tol, stats)

    if init is None:
        z = np.zeros(n)
        u = np.zeros(n)
    else:
        z = np.array(init, dtype=np.float64, copy=True)
        u = (b - gram @ z) / rho
    factor = cho_factor(gram + rho * np.eye(n))
    eps_abs, eps_rel = cfg.eps_abs, cfg.eps_rel
    best = None
    r_norm = s_norm = np.inf
    it = 0
    while it < cfg.max_iter:
        it += 1
        a = cho_solve(factor, b + rho * (z - u))
        z_old = z
        z = soft_threshold(a + u, lam / rho)
        u = u + a - z
        r_norm = np.linalg.norm(a - z)
        s_norm = rho * np.linalg.norm(z - z_old)
        eps_pri = np.sqrt(n) * eps_abs + eps_rel * max(np.linalg.norm(a), np.linalg.norm(z))
        eps_dual = np.sqrt(n) * eps_abs + eps_rel * rho * np.linalg.norm(u)
        if r_norm <= eps_pri and s_norm <= eps_dual:
            cand = _polish(aligned, z, lam, cfg)
            for alpha in (cand, z):
                if alpha is None:
                    continue
                kkt = kkt_residual(aligned, alpha, lam, cfg.activation_tol)
                if best is None or kkt < best[1]:
                    best = (alpha.copy(), kkt)
            if best[1] <= cfg.kkt_tol:
                break
            # not yet at the fixed point; tighten and keep iterating
            eps_abs *= 0.1
            eps_rel *= 0.1
            continue
        if cfg.adapt_penalty:
            new_rho = rho
            if r_norm > 10.0 * s_norm:
                new_rho = 2.0 * rho
            elif s_norm > 10.0 * r_norm:
                new_rho = 0.5 * rho
            if new_rho != rho:
                u = u * (rho / new_rho)
                rho = new_rho
                factor = cho_factor(gram + rho * np.eye(n))

    kkt_z = kkt_residual(aligned, z, lam, cfg.activation_tol)
    if best is None or kkt_z < best[1]:
        best = (z, kkt_z)
    alpha, kkt = best
    converged = kkt <= cfg.kkt_tol
    if not converged:
        logger.warning("ADMM stopped after %d iterations with KKT residual %.3g",
                       it, kkt)
    stats = SolverStats(it, float(r_norm), float(s_norm),
                        aligned.objective(alpha, lam), kkt, rho, converged)
    return SparseCode.from_alpha(alpha, lam, cfg.activation_tol, stats)


def encode(dictionary: Dictionary, x: TensorImage, window_side: int,
           cfg: SolverConfig | None = None) -> tuple[SparseCode, FlowField]:
    """Align every atom to ``x`` then sparse-code ``x`` over the aligned atoms."""
    flow, _ = align(dictionary, x, window_side)
    code = solve(assemble(dictionary, flow, x), cfg)
    return code, flow


def with_lambda(cfg: SolverConfig, lam: float) -> SolverConfig:
    return replace(cfg, lam=float(lam))
