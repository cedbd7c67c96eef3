"""Readers and schema validation for the chmm-evidence result CSVs.

These are the only inputs the figures consume; nothing here recomputes a
statistic, so a figure is a pure view of the files it was built from.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

PARAM_NAMES = ("p_n", "p_t", "beta_n", "beta_t", "nu_n", "gamma_n", "gamma_t")

RANK_COLUMNS = ["model", "log_ml", "se_log", "lo3", "hi3", "category"]
SMOOTH_COLUMNS = ["chicken", "pen", "t", "day", "p_s", "p_i", "p_r"]


class SchemaError(ValueError):
    """A result file does not satisfy its documented schema."""


def file_digest(path: str, n_hex: int = 12) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()[:n_hex]


def _read_csv(path: str):
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    return header, rows


@dataclass
class EvidenceTable:
    models: np.ndarray
    log_ml: np.ndarray
    categories: list

    def weights(self) -> np.ndarray:
        """Evidence weights, normalized over the models present."""
        shifted = self.log_ml - self.log_ml.max()
        w = np.exp(shifted)
        return w / w.sum()


def read_evidence_csv(path: str) -> EvidenceTable:
    header, rows = _read_csv(path)
    if header != RANK_COLUMNS:
        raise SchemaError("%s: expected columns %s" % (path, RANK_COLUMNS))
    models = np.array([int(r[0]) for r in rows])
    log_ml = np.array([float(r[1]) for r in rows])
    if not np.all(np.isfinite(log_ml)):
        raise SchemaError("%s: log_ml must be finite" % path)
    return EvidenceTable(models, log_ml, [r[5] for r in rows])


def read_theta_samples_csv(path: str) -> np.ndarray:
    header, rows = _read_csv(path)
    if header != list(PARAM_NAMES):
        raise SchemaError("%s: expected columns %s" % (path, list(PARAM_NAMES)))
    return np.array([[float(v) for v in r] for r in rows])


@dataclass
class SmoothTable:
    chickens: np.ndarray
    pens: np.ndarray
    steps: np.ndarray
    days: np.ndarray
    probs: np.ndarray  # (n_rows, 3) for S, I, R

    def infection_by_day(self):
        """Mean P(infectious) per (chicken, day) plus the axis labels."""
        chick_ids = np.unique(self.chickens)
        day_ids = np.unique(self.days)
        grid = np.zeros((chick_ids.size, day_ids.size))
        counts = np.zeros_like(grid)
        ci = {c: i for i, c in enumerate(chick_ids)}
        di = {d: i for i, d in enumerate(day_ids)}
        for c, d, p in zip(self.chickens, self.days, self.probs[:, 1]):
            grid[ci[c], di[d]] += p
            counts[ci[c], di[d]] += 1
        if np.any(counts == 0):
            raise SchemaError("smoothing table has holes in the (chicken, day) grid")
        return chick_ids, day_ids, grid / counts


def read_smooth_csv(path: str) -> SmoothTable:
    header, rows = _read_csv(path)
    if header != SMOOTH_COLUMNS:
        raise SchemaError("%s: expected columns %s" % (path, SMOOTH_COLUMNS))
    probs = np.array([[float(r[4]), float(r[5]), float(r[6])] for r in rows])
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise SchemaError("%s: probabilities outside [0, 1]" % path)
    return SmoothTable(
        chickens=np.array([int(r[0]) for r in rows]),
        pens=np.array([int(r[1]) for r in rows]),
        steps=np.array([int(r[2]) for r in rows]),
        days=np.array([int(r[3]) for r in rows]),
        probs=probs,
    )


@dataclass
class DataTable:
    chickens: np.ndarray
    pens: np.ndarray
    symbols: list  # list of per-bird symbol strings


def read_data_csv(path: str) -> DataTable:
    header, rows = _read_csv(path)
    if header[:4] != ["chicken", "pen", "transgenic", "challenge"]:
        raise SchemaError("%s: not a data CSV" % path)
    return DataTable(
        chickens=np.array([int(r[0]) for r in rows]),
        pens=np.array([int(r[1]) for r in rows]),
        symbols=[[c.strip() for c in r[4:]] for r in rows],
    )
