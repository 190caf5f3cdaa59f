"""Proper orthogonal decomposition of field snapshots.

The basis is affine: ``project`` subtracts the temporal mean before
applying the transposed modes and ``reconstruct`` adds it back.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container

__all__ = [
    "FieldSeries",
    "PodBasis",
    "NormStats",
    "compute_pod",
    "project",
    "reconstruct",
    "truncation_error",
    "normalize_coeffs",
]


@dataclass(frozen=True)
class FieldSeries:
    """Daily full-state snapshots, ``data[t, row, col]``."""

    data: np.ndarray
    day_index: np.ndarray = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"field data must be rank 3 (T, H, W), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field data contains non-finite values")
        if self.day_index is None:
            days = np.arange(data.shape[0], dtype=np.int64)
        else:
            days = np.asarray(self.day_index, dtype=np.int64)
        if days.shape != (data.shape[0],):
            raise ValueError("day_index length must match the number of snapshots")
        if days.size > 1 and not np.all(np.diff(days) == 1):
            raise ValueError("day_index must increase with unit stride")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "day_index", days)

    @property
    def grid_dims(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def n_points(self) -> int:
        return self.data.shape[1] * self.data.shape[2]

    def __len__(self) -> int:
        return self.data.shape[0]

    def flat(self) -> np.ndarray:
        """Snapshots as rows, shape ``(T, N)``."""
        return self.data.reshape(len(self), -1)

    def slice_days(self, start: int, stop: int) -> "FieldSeries":
        """Sub-series by position (not by day value)."""
        return FieldSeries(self.data[start:stop], self.day_index[start:stop])

    def save(self, path) -> None:
        container.save(path, {"field": self.data, "day_index": self.day_index})

    @classmethod
    def load(cls, path) -> "FieldSeries":
        blocks = container.load(path)
        container.require(blocks, "field", "day_index")
        return cls(blocks["field"], blocks["day_index"])


@dataclass(frozen=True)
class NormStats:
    """Per-mode z-score statistics."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, coeffs):
        return (np.asarray(coeffs, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def normalize_coeffs(coeffs) -> tuple[np.ndarray, NormStats]:
    """Z-score each mode channel of a ``(T, k)`` coefficient series.

    Channels with zero spread get a unit std so they map to zeros.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[0] == 0:
        raise ValueError("expected a nonempty (T, k) coefficient series")
    mu = coeffs.mean(axis=0)
    sd = coeffs.std(axis=0)
    sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mu)), sd, 1.0)
    stats = NormStats(mu, sd)
    return stats.apply(coeffs), stats


@dataclass(frozen=True)
class PodBasis:
    """Truncated POD basis.

    Attributes
    ----------
    modes : (N, k) array with orthonormal columns
    singular_values : all M singular values of the centered snapshot matrix
    temporal_mean : (N,) snapshot mean
    grid_dims : (H, W) of the originating field, used to reshape reconstructions
    """

    modes: np.ndarray
    singular_values: np.ndarray
    temporal_mean: np.ndarray
    grid_dims: tuple[int, int] = field(default=None)

    @property
    def k(self) -> int:
        return self.modes.shape[1]

    @property
    def n_snapshots(self) -> int:
        return self.singular_values.shape[0]

    @property
    def n_points(self) -> int:
        return self.modes.shape[0]

    def energy_fraction(self, k: int | None = None) -> float:
        """Share of centered variance captured by the leading ``k`` modes."""
        k = self.k if k is None else k
        s2 = self.singular_values ** 2
        total = s2.sum()
        return 1.0 if total == 0 else float(s2[:k].sum() / total)

    def truncate(self, k: int) -> "PodBasis":
        """Leading ``k`` modes of this basis."""
        if not 1 <= k <= self.k:
            raise ValueError(f"k must be in [1, {self.k}], got {k}")
        return PodBasis(self.modes[:, :k].copy(), self.singular_values, self.temporal_mean,
                        self.grid_dims)

    def save(self, path, norm: NormStats | None = None) -> None:
        blocks = {
            "modes": self.modes,
            "sigma": self.singular_values,
            "mean": self.temporal_mean,
        }
        if norm is not None:
            blocks["norm_mu"] = norm.mean
            blocks["norm_sd"] = norm.std
        if self.grid_dims is not None:
            blocks["grid"] = np.asarray(self.grid_dims, dtype=np.float64)
        container.save(path, blocks)

    @classmethod
    def load(cls, path) -> tuple["PodBasis", NormStats | None]:
        blocks = container.load(path)
        container.require(blocks, "modes", "sigma", "mean")
        grid = tuple(int(g) for g in blocks["grid"]) if "grid" in blocks else None
        basis = cls(blocks["modes"], blocks["sigma"], blocks["mean"], grid)
        norm = None
        if "norm_mu" in blocks and "norm_sd" in blocks:
            norm = NormStats(blocks["norm_mu"], blocks["norm_sd"])
        return basis, norm


def _fix_signs(u: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of every mode made positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def compute_pod(series: FieldSeries | np.ndarray, k: int) -> PodBasis:
    """Leading ``k`` left singular vectors of the mean-centered snapshots.

    ``series`` may also be a raw ``(M, N)`` array of flattened snapshots.
    When N > 4M the M x M Gram matrix is diagonalized instead of the full
    matrix, unless the retained spectrum is too ill-conditioned for it.
    """
    if isinstance(series, FieldSeries):
        snaps = series.flat()
        grid = series.grid_dims
    else:
        snaps = np.asarray(series, dtype=np.float64)
        grid = None
        if snaps.ndim != 2:
            raise ValueError("snapshot array must be (M, N)")
        if not np.all(np.isfinite(snaps)):
            raise ValueError("snapshots contain non-finite values")
    m, n = snaps.shape
    if m < 2:
        raise ValueError("need at least two snapshots")
    if not (isinstance(k, (int, np.integer)) and 1 <= k <= min(m, n)):
        raise ValueError(f"k must be an integer in [1, {min(m, n)}], got {k!r}")

    mean = snaps.mean(axis=0)
    x = (snaps - mean).T  # (N, M)

    u = None
    if n > 4 * m:
        lam, v = np.linalg.eigh(x.T @ x)
        order = np.argsort(lam)[::-1]
        lam, v = lam[order], v[:, order]
        sigma = np.sqrt(np.clip(lam, 0.0, None))
        if sigma[0] > 0 and sigma[k - 1] > 1e-6 * sigma[0]:
            u = (x @ v[:, :k]) / sigma[:k]
    if u is None:
        uu, sigma, _ = np.linalg.svd(x, full_matrices=False)
        u = uu[:, :k]
    # economy shapes give min(N, M) values; pad so all M are stored
    sig = np.zeros(m)
    sig[: sigma.shape[0]] = sigma[:m]
    return PodBasis(_fix_signs(u), sig, mean, grid)


def _as_flat(basis: PodBasis, state) -> np.ndarray:
    if isinstance(state, FieldSeries):
        state = state.data
    arr = np.asarray(state, dtype=np.float64)
    n = basis.n_points
    if arr.shape[-1] == n:
        return arr
    if arr.ndim >= 2 and arr.shape[-2] * arr.shape[-1] == n:
        return arr.reshape(arr.shape[:-2] + (n,))
    raise ValueError(f"state has shape {arr.shape}, basis expects length {n}")


def project(basis: PodBasis, state) -> np.ndarray:
    """Reduced coefficients ``modes.T @ (state - mean)``.

    Works on a single state or on a stack with time as the leading axis.
    """
    flat = _as_flat(basis, state)
    return (flat - basis.temporal_mean) @ basis.modes


def reconstruct(basis: PodBasis, r) -> np.ndarray:
    """Flat full state ``mean + modes @ r`` (stacks broadcast over leading axes)."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != basis.k:
        raise ValueError(f"coefficient length {r.shape[-1]} != basis k {basis.k}")
    return basis.temporal_mean + r @ basis.modes.T


def truncation_error(basis: PodBasis, series, k: int | None = None) -> float:
    """Summed squared residual of the rank-``k`` reconstruction of ``series``.

    ``k`` defaults to the basis size; ``k=0`` gives the full centered energy.
    """
    snaps = series.flat() if isinstance(series, FieldSeries) else np.asarray(series, float)
    if snaps.shape[-1] != basis.n_points:
        raise ValueError("series grid does not match the basis")
    k = basis.k if k is None else k
    if not 0 <= k <= basis.k:
        raise ValueError(f"k must lie in [0, {basis.k}]")
    xc = snaps - basis.temporal_mean
    phi = basis.modes[:, :k]
    resid = xc - (xc @ phi) @ phi.T
    return float(np.sum(resid * resid))
