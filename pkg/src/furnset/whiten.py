"""ZCA whitening and row-wise l2 normalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InsufficientData, ShapeError
from .ingest import (
    EmbeddingMatrix,
    load_embedding_file,
    read_sidecar,
    write_embedding_file,
    write_sidecar,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ZcaModel:
    mean: np.ndarray  # (d,)
    transform: np.ndarray  # (d, d), symmetric
    epsilon: float

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def identity(cls, dim: int) -> "ZcaModel":
        return cls(np.zeros(dim), np.eye(dim), 0.0)


def fit_zca(X: EmbeddingMatrix | np.ndarray, epsilon: float = 1e-5) -> ZcaModel:
    """Fit ``W = U (L + eps I)^(-1/2) U^T`` on the (n-1)-normalized covariance."""
    data = X.data if isinstance(X, EmbeddingMatrix) else np.asarray(X)
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if data.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {data.shape}")
    if data.shape[0] < 2:
        raise InsufficientData(f"whitening needs at least 2 rows, got {data.shape[0]}")
    data = data.astype(np.float64)
    if not np.isfinite(data).all():
        raise DataError("non-finite value in whitening input")

    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (data.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals, 0.0)
    with np.errstate(divide="ignore"):
        scale = 1.0 / np.sqrt(evals + epsilon)
    if not np.isfinite(scale).all():
        raise InsufficientData("singular covariance with epsilon=0; use a positive epsilon")
    transform = (evecs * scale) @ evecs.T
    transform = 0.5 * (transform + transform.T)
    return ZcaModel(mean, transform, float(epsilon))


def apply_zca(model: ZcaModel, X: EmbeddingMatrix) -> EmbeddingMatrix:
    if X.dim != model.dim:
        raise ShapeError(f"input dim {X.dim} does not match model dim {model.dim}")
    out = (X.data.astype(np.float64) - model.mean) @ model.transform.T
    return X.with_data(out)


def l2_normalize(X: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every non-zero row to unit norm; zero rows pass through."""
    normalized, zero_rows = l2_normalize_array(X.data)
    if zero_rows:
        logger.warning("l2_normalize: %d zero row(s) left unchanged", zero_rows)
    return X.with_data(normalized)


def l2_normalize_array(data: np.ndarray) -> tuple[np.ndarray, int]:
    """Return the normalized rows and the number of zero rows."""
    data = np.asarray(data)
    norms = np.sqrt(np.einsum("ij,ij->i", data.astype(np.float64), data.astype(np.float64)))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    out = (data / safe[:, None]).astype(data.dtype, copy=False)
    return out, int(zero.sum())


def whiten_and_normalize(model: ZcaModel, X: EmbeddingMatrix) -> EmbeddingMatrix:
    return l2_normalize(apply_zca(model, X))


# Persistence: mean as row "__mean", transform rows "__zca.0" .. "__zca.{d-1}",
# plus a sidecar header with epsilon and dim.


def save_zca(model: ZcaModel, path: str | Path) -> None:
    path = Path(path)
    ids = ("__mean",) + tuple(f"__zca.{i}" for i in range(model.dim))
    rows = np.vstack([model.mean[None, :], model.transform])
    write_embedding_file(path, EmbeddingMatrix(ids, rows))
    write_sidecar(_header_path(path), {"kind": "zca", "epsilon": model.epsilon, "dim": model.dim})


def load_zca(path: str | Path) -> ZcaModel:
    path = Path(path)
    header = read_sidecar(_header_path(path))
    m = load_embedding_file(path)
    d = int(header["dim"])
    if m.dim != d or len(m) != d + 1:
        raise FormatError(f"ZCA file shape {len(m)}x{m.dim} does not match dim {d}")
    data = m.data.astype(np.float64)
    return ZcaModel(data[0], data[1:], float(header["epsilon"]))


def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")
