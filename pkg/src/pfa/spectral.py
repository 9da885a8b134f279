"""Response matrices and the normalized eigenvalue spectrum of their covariance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSpectrum, InvalidInput, InvalidShape, NumericalFailure

# absolute threshold on the covariance trace below which a layer is "dead"
DEGENERATE_EPS = 1e-12
# eigenvalues below this fraction of the largest one are clamped to zero
CLAMP_RTOL = 1e-12


@dataclass(frozen=True)
class ResponseMatrix:
    layer_id: str
    data: np.ndarray  # (M, C), rows are samples

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise InvalidShape(f"{self.layer_id}: response matrix must be 2-D, got {data.shape}")
        if data.shape[0] < 2 or data.shape[1] < 1:
            raise InvalidShape(f"{self.layer_id}: need M >= 2 and C >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInput(f"{self.layer_id}: response matrix contains NaN/Inf")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def samples(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Spectrum:
    layer_id: str
    values: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise InvalidShape(f"{self.layer_id}: spectrum must be a non-empty vector")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise InvalidInput(f"{self.layer_id}: spectrum values must be finite and >= 0")
        if self.degenerate:
            if np.any(values != 0):
                raise InvalidInput(f"{self.layer_id}: degenerate spectrum must be all zeros")
        else:
            if np.any(np.diff(values) > 0):
                raise InvalidInput(f"{self.layer_id}: spectrum must be sorted non-increasing")
            if abs(values.sum() - 1.0) > 1e-9:
                raise InvalidInput(f"{self.layer_id}: spectrum must sum to 1 (got {values.sum()!r})")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.size

    def cumulative(self) -> np.ndarray:
        """Prefix energies ``E_k = sum(values[:k])`` for k = 1..C.

        Clipped to 1 and pinned to exactly 1 at k = C, so the full layer
        always reaches any threshold in (0, 1].
        """
        cum = np.minimum(np.cumsum(self.values), 1.0)
        cum[-1] = 1.0
        return cum


def pool_responses(tensor, layer_id: str = "", pool: str = "max") -> ResponseMatrix:
    """Collapse an (M, H, W, C) output tensor to an (M, C) response matrix.

    2-D (M, C) input from fully connected layers passes through unchanged.
    """
    t = np.asarray(tensor)
    if t.ndim == 2:
        return ResponseMatrix(layer_id, t)
    if t.ndim != 4:
        raise InvalidShape(f"{layer_id}: expected (M,H,W,C) or (M,C) tensor, got shape {t.shape}")
    if pool == "max":
        pooled = t.max(axis=(1, 2))
    elif pool == "avg":
        pooled = t.mean(axis=(1, 2), dtype=np.float64)
    else:
        raise InvalidInput(f"unknown pooling mode {pool!r}")
    return ResponseMatrix(layer_id, pooled)


def covariance(data: np.ndarray) -> np.ndarray:
    """Unbiased sample covariance of the columns, accumulated in float64."""
    a = np.asarray(data, dtype=np.float64)
    centered = a - a.mean(axis=0)
    cov = centered.T @ centered / (a.shape[0] - 1)
    return (cov + cov.T) / 2


def compute_spectrum(responses: ResponseMatrix) -> Spectrum:
    cov = covariance(responses.data)
    C = cov.shape[0]
    if np.trace(cov) < DEGENERATE_EPS:
        return Spectrum(responses.layer_id, np.zeros(C), degenerate=True)
    try:
        eig = np.linalg.eigvalsh(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"{responses.layer_id}: eigensolver failed: {exc}") from exc
    eig = np.sort(eig)[::-1]
    eig[eig < CLAMP_RTOL * eig[0]] = 0.0
    values = eig / eig.sum()
    return Spectrum(responses.layer_id, values)


def kl_to_uniform(spectrum: Spectrum) -> float:
    """KL(spectrum || uniform) in nats; lies in [0, ln C]."""
    if spectrum.degenerate:
        raise DegenerateSpectrum(f"{spectrum.layer_id}: KL undefined for a degenerate spectrum")
    C = spectrum.channels
    lam = spectrum.values[spectrum.values > 0]
    kl = float(np.sum(lam * np.log(lam * C)))
    return min(max(kl, 0.0), math.log(C))


def kl_upper_bound(channels: int) -> float:
    """KL of the one-point distribution [1, 0, ..., 0] from uniform, i.e. ln C."""
    return math.log(channels)
