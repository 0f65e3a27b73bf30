"""scikit-learn compatible wrappers.

``AlignedSparseClassifier`` learns the dictionary and classifier jointly;
``AlignedSparseCoder`` maps images to codes over a fixed dictionary. Both
accept images as an ``(n, H, W)`` array, or as ``(n, H*W)`` rows together
with ``image_shape``.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from . import classifier as clf
from .learn import LearnConfig, Model, encode_all, prepare_image, train
from .tensor import Dictionary, GeometryError


def _check_images(X, image_shape=None):
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim == 3:
        if image_shape is not None and tuple(X.shape[1:]) != tuple(image_shape):
            raise ValueError(f"images are {X.shape[1:]}, expected {tuple(image_shape)}")
        return X
    if X.ndim != 2:
        raise ValueError("expected an (n, H, W) or (n, H*W) array")
    if image_shape is None:
        side = int(round(np.sqrt(X.shape[1])))
        if side * side != X.shape[1]:
            raise ValueError("non-square flattened images need image_shape")
        image_shape = (side, side)
    return X.reshape(len(X), *image_shape)


class AlignedSparseClassifier(ClassifierMixin, BaseEstimator):
    """Sparse-code classifier whose dictionary atoms are aligned to each input.

    ``window_side=1`` disables alignment and gives plain L1 sparse coding.

    Parameters
    ----------
    n_atoms : int
        Number of tensor atoms.
    lam : float
        L1 penalty of the sparse coding problem.
    mu : float
        Ridge penalty on the classifier weights.
    rho0, decay_halflife : float, int
        Step size ``rho0 / (1 + t / decay_halflife)`` at batch ``t``.
    batch_size, epochs : int
        Minibatch size and number of passes over the training set.
    window_side, patch_size, stride : int
        Search window, local patch side and patch stride, in pixels / grid cells.
    normalize : bool
        Scale each tensorized input to unit Frobenius norm.
    refit_svm : bool
        Retrain the classifier on the final codes after the last epoch.
    image_shape : tuple or None
        Required for flattened non-square input.
    random_state : int
        Seed for atom initialization and shuffling.
    n_jobs : int
        Worker threads for per-sample coding.
    """

    def __init__(self, n_atoms=150, lam=0.01, mu=1e-4, rho0=0.001, batch_size=512,
                 epochs=1, decay_halflife=1000, window_side=5, patch_size=5, stride=1,
                 normalize=True, refit_svm=False, image_shape=None, random_state=0,
                 n_jobs=1):
        self.n_atoms = n_atoms
        self.lam = lam
        self.mu = mu
        self.rho0 = rho0
        self.batch_size = batch_size
        self.epochs = epochs
        self.decay_halflife = decay_halflife
        self.window_side = window_side
        self.patch_size = patch_size
        self.stride = stride
        self.normalize = normalize
        self.refit_svm = refit_svm
        self.image_shape = image_shape
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        seed = self.random_state
        if seed is None:
            seed = int(np.random.randint(2**31 - 1))
        return LearnConfig(n_atoms=self.n_atoms, lam=self.lam, mu=self.mu, rho0=self.rho0,
                           batch_size=self.batch_size, epochs=self.epochs,
                           decay_halflife=self.decay_halflife, window_side=self.window_side,
                           patch_size=self.patch_size, stride=self.stride,
                           seed=int(seed), normalize=self.normalize,
                           refit_svm=self.refit_svm, n_threads=self.n_jobs)

    def fit(self, X, y):
        images = _check_images(X, self.image_shape)
        y = np.asarray(y)
        if len(y) != len(images):
            raise ValueError(f"{len(images)} images but {len(y)} labels")
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need samples of at least two classes")
        self.model_ = train((images, y_idx), self._config(), n_classes=self.classes_.size)
        self.image_shape_ = images.shape[1:]
        self.n_features_in_ = int(np.prod(self.image_shape_))
        self.history_ = list(self.model_.history)
        return self

    @classmethod
    def from_model(cls, model: Model, classes=None):
        """Wrap an already trained model."""
        cfg = model.config
        est = cls(n_atoms=model.dictionary.n_atoms, lam=cfg.lam, mu=cfg.mu, rho0=cfg.rho0,
                  batch_size=cfg.batch_size, epochs=cfg.epochs,
                  decay_halflife=cfg.decay_halflife, window_side=cfg.window_side,
                  patch_size=cfg.patch_size, stride=cfg.stride, normalize=cfg.normalize,
                  refit_svm=cfg.refit_svm, random_state=cfg.seed, n_jobs=cfg.n_threads)
        est.model_ = model
        est.classes_ = np.arange(model.n_classes) if classes is None else np.asarray(classes)
        dims = model.dictionary.grid.source_dims
        est.image_shape_ = tuple(dims) if dims else None
        est.n_features_in_ = int(np.prod(dims)) if dims else None
        est.history_ = list(model.history)
        return est

    def transform(self, X):
        """Sparse codes, one row per image."""
        check_is_fitted(self, "model_")
        images = _check_images(X, self.image_shape or self.image_shape_)
        cfg = self.model_.config
        samples = [prepare_image(im, cfg) for im in images]
        return encode_all(self.model_.dictionary, samples, cfg, self.window_side)

    def decision_function(self, X):
        codes = self.transform(X)
        w = self.model_.classifier.weights
        return codes @ w[:, :-1].T + w[:, -1]

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class AlignedSparseCoder(TransformerMixin, BaseEstimator):
    """Encode images over a fixed tensor dictionary with per-input alignment.

    ``dictionary`` is a :class:`~flowdict.tensor.Dictionary` or an
    ``(N, M, P)`` array laid out on the grid implied by ``patch_size`` and
    ``stride``.
    """

    def __init__(self, dictionary, window_side=5, lam=0.01, patch_size=5, stride=1,
                 normalize=True, image_shape=None, n_jobs=1):
        self.dictionary = dictionary
        self.window_side = window_side
        self.lam = lam
        self.patch_size = patch_size
        self.stride = stride
        self.normalize = normalize
        self.image_shape = image_shape
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        cfg = LearnConfig(n_atoms=1, lam=self.lam, window_side=self.window_side,
                          patch_size=self.patch_size, stride=self.stride,
                          normalize=self.normalize, n_threads=self.n_jobs)
        if X is not None:
            images = _check_images(X, self.image_shape)
            grid = prepare_image(images[0], cfg).grid
        d = self.dictionary
        if not isinstance(d, Dictionary):
            if X is None:
                raise ValueError("an array dictionary needs sample images to infer the grid")
            d = Dictionary(np.asarray(d, dtype=np.float64), grid)
        elif X is not None and not d.grid.compatible(grid):
            raise GeometryError("image geometry does not match the dictionary grid")
        self.dictionary_ = d
        self.config_ = cfg
        self.n_features_in_ = None if X is None else int(np.prod(images.shape[1:]))
        return self

    def transform(self, X):
        if not hasattr(self, "dictionary_"):
            self.fit(X)
        images = _check_images(X, self.image_shape)
        samples = [prepare_image(im, self.config_) for im in images]
        return encode_all(self.dictionary_, samples, self.config_)


def predict_model(model: Model, images, window_side=None, n_threads=None) -> np.ndarray:
    """Class index per image for a trained model."""
    cfg = model.config if n_threads is None else replace(model.config, n_threads=n_threads)
    codes = encode_all(model.dictionary, [prepare_image(im, cfg) for im in images], cfg,
                       window_side)
    return np.array([clf.predict(model.classifier, a) for a in codes], dtype=np.int64)
