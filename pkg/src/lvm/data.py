"""Data helpers: CSV input/output and sufficient statistics."""
from __future__ import annotations

import io
from dataclasses import dataclass
from importlib import resources

import numpy as np
import pandas as pd

MISSING_TOKENS = ["", "NA", "NaN"]


def read_csv(path_or_buf) -> pd.DataFrame:
    """Read a CSV file; empty cells, ``NA`` and ``NaN`` are missing."""
    return pd.read_csv(path_or_buf, na_values=MISSING_TOKENS, keep_default_na=False)


def write_csv(frame: pd.DataFrame, path_or_buf=None) -> str | None:
    """Write with a fixed float format so output is byte reproducible."""
    return frame.to_csv(path_or_buf, index=False, float_format="%.10g", na_rep="NA")


def as_frame(data) -> pd.DataFrame:
    if isinstance(data, pd.DataFrame):
        return data
    if isinstance(data, dict):
        return pd.DataFrame(data)
    raise TypeError(f"expected a data frame, got {type(data).__name__}")


def numeric_columns(frame: pd.DataFrame, columns) -> np.ndarray:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise KeyError(f"data lacks columns: {', '.join(missing)}")
    try:
        return frame[list(columns)].to_numpy(dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"non-numeric data in model columns: {exc}") from None


def faithful() -> pd.DataFrame:
    """Old Faithful eruption durations and waiting times (272 rows)."""
    text = resources.files("lvm.datasets").joinpath("faithful.csv").read_text()
    return pd.read_csv(io.StringIO(text))


@dataclass
class SufficientStats:
    """Weighted sample size, mean and ML (divisor n) covariance."""

    n: float
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_rows(cls, Z: np.ndarray, weights: np.ndarray | None = None) -> "SufficientStats":
        Z = np.asarray(Z, dtype=float)
        if weights is None:
            n = float(Z.shape[0])
            mean = Z.mean(axis=0)
            R = Z - mean
            cov = R.T @ R / n
        else:
            w = np.asarray(weights, dtype=float)
            n = float(w.sum())
            mean = w @ Z / n
            R = Z - mean
            cov = (R * w[:, None]).T @ R / n
        return cls(n, mean, (cov + cov.T) / 2)

    def subset(self, idx) -> "SufficientStats":
        idx = np.asarray(idx, dtype=int)
        return SufficientStats(self.n, self.mean[idx], self.cov[np.ix_(idx, idx)])
