"""Ensemble-versus-truth error statistics.

All norms are discrete L2 norms ``sqrt(x^T M x)`` with the P1 mass matrix.
"""

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np


@dataclass
class StepStats:
    step: int
    emre: float
    rb: float
    res: float
    ess_pre: float
    n_temper: int


def _norms(diff, mass):
    diff = np.atleast_2d(diff)
    return np.sqrt(np.maximum(np.einsum("ij,ij->i", diff, (mass @ diff.T).T), 0.0))


def _truth_norm(truth, mass):
    t = float(_norms(truth, mass)[0])
    if t == 0.0:
        raise ZeroDivisionError("truth has zero norm")
    return t


def emre(truth, ensemble, mass) -> float:
    """Mean over particles of the relative L2 distance to the truth."""
    truth = np.asarray(truth, dtype=float)
    ens = np.asarray(ensemble, dtype=float)
    return float(np.mean(_norms(ens - truth, mass)) / _truth_norm(truth, mass))


def rb(truth, ensemble, mass) -> float:
    """Relative L2 error of the ensemble mean."""
    truth = np.asarray(truth, dtype=float)
    mean = np.mean(np.asarray(ensemble, dtype=float), axis=0)
    return float(_norms(mean - truth, mass)[0] / _truth_norm(truth, mass))


def res(ensemble, truth, mass) -> float:
    """Relative spread ``sum_n ||u_n - mean|| / ((N_p - 1) ||truth||)``."""
    ens = np.asarray(ensemble, dtype=float)
    if ens.shape[0] < 2:
        raise ValueError("spread needs at least two particles")
    mean = ens.mean(axis=0)
    return float(np.sum(_norms(ens - mean, mass)) / (ens.shape[0] - 1)
                 / _truth_norm(np.asarray(truth, dtype=float), mass))


def step_stats(step, truth, ensemble, mass, ess_pre=float("nan"), n_temper=0) -> StepStats:
    return StepStats(step, emre(truth, ensemble, mass), rb(truth, ensemble, mass),
                     res(ensemble, truth, mass), float(ess_pre), int(n_temper))


class StatsWriter:
    """Appends one CSV row per assimilation step and flushes immediately."""

    columns = [f.name for f in fields(StepStats)]

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w", newline="")
        self._out = csv.DictWriter(self._fh, fieldnames=self.columns)
        self._out.writeheader()

    def write(self, stats: StepStats):
        row = asdict(stats)
        for k in ("emre", "rb", "res", "ess_pre"):
            row[k] = repr(float(row[k]))
        self._out.writerow(row)
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_stats(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return {
        "step": np.array([int(r["step"]) for r in rows]),
        **{k: np.array([float(r[k]) for r in rows]) for k in ("emre", "rb", "res", "ess_pre")},
        "n_temper": np.array([int(r["n_temper"]) for r in rows]),
    }
