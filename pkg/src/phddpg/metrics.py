"""Travel-time metrics over episode logs and the critic's gradient-contribution matrix."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .sim import EpisodeLog

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("episode", "seed", "att", "datt", "dar", "mean_diag")


def travel_times(log: EpisodeLog) -> list[float]:
    """Per-vehicle travel time, with unfinished vehicles accruing time up to the horizon."""
    return [(arr if arr is not None else log.horizon) - entry for _, entry, arr in log.vehicles]


def att(log: EpisodeLog) -> float:
    times = travel_times(log)
    if not times:
        return 0.0
    return float(sum(times) / len(times))


def datt(log: EpisodeLog) -> float:
    times = [arr - entry for _, entry, arr in log.vehicles if arr is not None]
    if not times:
        logger.warning("no vehicle arrived; DATT is undefined")
        return math.nan
    return float(sum(times) / len(times))


def dar(log: EpisodeLog, window: float = 3600.0) -> float:
    entered = sum(1 for _, entry, _ in log.vehicles if entry <= window)
    if entered == 0:
        return 1.0
    arrived = sum(1 for _, _, arr in log.vehicles if arr is not None and arr <= window)
    return arrived / entered


def summarize(log: EpisodeLog, window: float = 3600.0) -> dict:
    return {"att": att(log), "datt": datt(log), "dar": dar(log, window), "vehicles": len(log.vehicles),
            "arrived": sum(1 for v in log.vehicles if v[2] is not None), "empty": not log.vehicles}


# ---------------------------------------------------------------- contribution matrix

@dataclass
class Contribution:
    matrix: np.ndarray  # columns sum to 1
    raw: np.ndarray  # un-normalised |sum of ratios|
    skipped: int  # (sample, j) pairs whose column-sum derivative was below tolerance
    degenerate_columns: list[int]

    @property
    def mean_diagonal(self) -> float:
        return float(np.mean(np.diag(self.matrix)))


def contribution_from_jacobians(J: np.ndarray, tol: float = 1e-12) -> Contribution:
    """Normalised share of each output's dependence on each action parameter.

    ``J[n, i, j]`` is d r_i / d x_j for sample n. Each sample's entry is divided by
    the column total d(sum_k r_k)/d x_j, summed over samples, and made absolute;
    columns are then scaled to sum to one.
    """
    J = np.asarray(J, dtype=float)
    denom = J.sum(axis=1, keepdims=True)  # (N, 1, K)
    ok = np.abs(denom) >= tol
    skipped = int((~ok).sum())
    ratios = np.where(ok, J / np.where(ok, denom, 1.0), 0.0)
    raw = np.abs(ratios.sum(axis=0))
    K = raw.shape[1]
    col = raw.sum(axis=0)
    out = np.empty_like(raw)
    degenerate = []
    for j in range(K):
        if col[j] > 0:
            out[:, j] = raw[:, j] / col[j]
        else:
            degenerate.append(j)
            out[:, j] = 1.0 / raw.shape[0]
    if degenerate:
        logger.warning("contribution columns %s are all zero; replaced by uniform columns", degenerate)
    if skipped:
        logger.info("contribution matrix skipped %d near-zero denominators", skipped)
    return Contribution(out, raw, skipped, degenerate)


def contribution_matrix(critic_fn, states: np.ndarray, x: np.ndarray, tol: float = 1e-12) -> Contribution:
    """Jacobian of critic_fn(states, x) with respect to x, reduced to the contribution matrix."""
    xt = ad.Tensor(np.asarray(x, dtype=float), requires_grad=True)
    out = critic_fn(np.asarray(states, dtype=float), xt)
    return contribution_from_jacobians(ad.jacobian(out, xt), tol)


# ---------------------------------------------------------------- emitters

def write_metrics_csv(path: str | Path, rows: Iterable[dict], extra: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(CSV_COLUMNS) + [c for c in extra if c not in CSV_COLUMNS]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in cols})
    return path


def read_metrics_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: str | Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
