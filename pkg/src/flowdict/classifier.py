"""One-vs-all linear classifier with squared hinge loss over sparse codes.

Scores are ``W @ [alpha; 1]``; the last column of ``W`` is an unregularized
bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import GeometryError


@dataclass(frozen=True, eq=False)
class ClassifierParams:
    weights: np.ndarray
    mu: float = 1e-4

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 2 or w.shape[0] < 2 or w.shape[1] < 2:
            raise GeometryError("weights must be C x (N+1) with C >= 2")
        if not np.all(np.isfinite(w)):
            raise ValueError("classifier weights must be finite")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1] - 1

    @classmethod
    def zeros(cls, n_classes, n_atoms, mu=1e-4):
        return cls(np.zeros((n_classes, n_atoms + 1)), mu)

    @classmethod
    def from_class_hint(cls, class_hint, n_classes, mu=1e-4):
        """+1 weight from each atom to its own class, -1 to every other class."""
        hint = np.asarray(class_hint)
        w = np.zeros((n_classes, hint.size + 1))
        w[:, :-1] = np.where(hint[None, :] == np.arange(n_classes)[:, None], 1.0, -1.0)
        return cls(w, mu)


@dataclass(frozen=True)
class Label:
    class_index: int
    n_classes: int

    def __post_init__(self):
        if self.n_classes < 2 or not 0 <= self.class_index < self.n_classes:
            raise ValueError("class index outside [0, n_classes)")

    @property
    def one_vs_all(self) -> np.ndarray:
        y = -np.ones(self.n_classes)
        y[self.class_index] = 1.0
        return y


def _augment(params, alpha):
    alpha = np.asarray(getattr(alpha, "alpha", alpha), dtype=np.float64)
    if alpha.shape != (params.n_features,):
        raise GeometryError(
            f"code length {alpha.shape} does not match classifier ({params.n_features},)")
    return np.append(alpha, 1.0)


def _slack(params, alpha, y):
    if isinstance(y, Label):
        if y.n_classes != params.n_classes:
            raise GeometryError("label has a different number of classes")
        y = y.one_vs_all
    a = _augment(params, alpha)
    y = np.asarray(y, dtype=np.float64)
    return a, y, np.maximum(0.0, 1.0 - y * (params.weights @ a))


def loss(params: ClassifierParams, alpha, y) -> float:
    _, _, slack = _slack(params, alpha, y)
    return float(slack @ slack)


def loss_grad_alpha(params: ClassifierParams, alpha, y) -> np.ndarray:
    _, y, slack = _slack(params, alpha, y)
    return -2.0 * (slack * y) @ params.weights[:, :-1]


def loss_grad_W(params: ClassifierParams, alpha, y) -> np.ndarray:
    a, y, slack = _slack(params, alpha, y)
    grad = -2.0 * np.outer(slack * y, a)
    grad[:, :-1] += params.mu * params.weights[:, :-1]
    return grad


def decision_function(params: ClassifierParams, alpha) -> np.ndarray:
    return params.weights @ _augment(params, alpha)


def predict(params: ClassifierParams, alpha) -> int:
    # argmax returns the first maximum, i.e. the smallest class index
    return int(np.argmax(decision_function(params, alpha)))
