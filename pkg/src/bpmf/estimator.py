"""scikit-learn style estimator over the Gibbs sampling engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import sampler
from .data import RatingsMatrix
from .scheduler import SchedulerPolicy

__all__ = ["BPMF"]


class BPMF(BaseEstimator, RegressorMixin):
    """Bayesian matrix factorisation as a regressor on index pairs.

    ``X`` is an integer array of shape (n_samples, 2) holding
    ``(user, movie)`` index pairs and ``y`` the observed ratings.
    :meth:`fit` runs the Gibbs sampler and keeps posterior-mean factors;
    :meth:`predict` returns their dot products.

    Parameters
    ----------
    n_components : factor rank K.
    alpha : precision of the Gaussian rating noise.
    n_iter, burn_in : total sweeps and how many to discard before
        averaging predictions and factors.
    seed : base seed of the counter-based sampling streams; runs are
        bit-reproducible in it regardless of ``n_threads``.
    n_threads : worker threads for the item updates.
    clamp : optional (lo, hi) applied to predictions.
    shape : optional (n_users, n_movies); inferred from the data when
        omitted.
    init_scale : scale on the standard-normal starting factors; small
        values mix faster when ``alpha`` is large.
    """

    def __init__(self, n_components=32, alpha=2.0, n_iter=100, burn_in=20,
                 seed=0, n_threads=1, clamp=None, shape=None, init_scale=1.0):
        self.n_components = n_components
        self.alpha = alpha
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.seed = seed
        self.n_threads = n_threads
        self.clamp = clamp
        self.shape = shape
        self.init_scale = init_scale

    def _validate_pairs(self, X, fitting):
        X = check_array(X, dtype=np.int64, ensure_2d=True)
        if X.shape[1] != 2:
            raise ValueError(f"X must have exactly 2 columns, got {X.shape[1]}")
        if X.size and X.min() < 0:
            raise ValueError("user/movie indices must be non-negative")
        if not fitting:
            check_is_fitted(self, "u_mean_")
            if X.size and (
                X[:, 0].max() >= self.n_users_ or X[:, 1].max() >= self.n_movies_
            ):
                raise ValueError(
                    f"index pair out of range for the fitted "
                    f"{self.n_users_}x{self.n_movies_} matrix"
                )
        return X

    def fit(self, X, y):
        """Run the sampler on the given (user, movie, rating) triplets."""
        X = self._validate_pairs(X, fitting=True)
        y = check_array(y, dtype=np.float64, ensure_2d=False)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError("y must be 1-d and aligned with X")
        if self.shape is not None:
            n_users, n_movies = self.shape
        else:
            n_users = int(X[:, 0].max()) + 1 if X.size else 1
            n_movies = int(X[:, 1].max()) + 1 if X.size else 1
        ratings = RatingsMatrix(n_users, n_movies, X[:, 0], X[:, 1], y)
        report = sampler.run(
            ratings,
            k=self.n_components,
            alpha=self.alpha,
            iterations=self.n_iter,
            burn_in=self.burn_in,
            seed=self.seed,
            policy=SchedulerPolicy(threads=self.n_threads),
            clamp=self.clamp,
            init_scale=self.init_scale,
        )
        self.u_mean_ = report.u_mean
        self.v_mean_ = report.v_mean
        self.n_users_ = n_users
        self.n_movies_ = n_movies
        self.report_ = report
        return self

    def predict(self, X):
        """Posterior-mean prediction for each (user, movie) pair."""
        X = self._validate_pairs(X, fitting=False)
        return sampler.predict_pairs(
            self.u_mean_, self.v_mean_, X[:, 0], X[:, 1], self.clamp
        )
