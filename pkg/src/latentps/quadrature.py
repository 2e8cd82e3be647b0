"""Gauss-Hermite rules for expectations under a standard normal."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product Gauss-Hermite rule for E[f(T)], T ~ N(0, I_dim).

    Attributes
    ----------
    points, weights : ndarray, shape (n_points,)
        One-dimensional nodes and positive weights summing to one.
    dim : int
        Number of latent dimensions (1 or 2).
    adaptive : bool
        Whether the likelihood code re-centres and re-scales the nodes at each
        unit's posterior (see :mod:`latentps.sem.likelihood`).
    """

    points: np.ndarray
    weights: np.ndarray
    dim: int = 1
    adaptive: bool = True

    @property
    def n_points(self) -> int:
        return self.points.size

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    def tensor(self):
        """Full grid: nodes of shape (n_points**dim, dim) and matching weights."""
        if self.dim == 1:
            return self.points[:, None], self.weights
        grid = np.stack(np.meshgrid(self.points, self.points, indexing="ij"), axis=-1).reshape(-1, 2)
        return grid, np.outer(self.weights, self.weights).ravel()

    def expect(self, f) -> float:
        """E[f(T)] for a vectorized ``f`` taking an array of shape (Q, dim)."""
        nodes, weights = self.tensor()
        return float(np.dot(weights, f(nodes)))


@lru_cache(maxsize=None)
def _hermite_1d(n_points):
    x, w = np.polynomial.hermite_e.hermegauss(n_points)
    w = w / np.sqrt(2.0 * np.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_hermite(n_points=21, dim=1, adaptive=True) -> QuadratureRule:
    """Gauss-Hermite rule for the standard normal in 1 or 2 dimensions."""
    if dim not in (1, 2):
        raise ValueError("dim must be 1 or 2")
    x, w = _hermite_1d(n_points)
    return QuadratureRule(points=x, weights=w, dim=dim, adaptive=adaptive)
