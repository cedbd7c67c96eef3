"""File formats: delimited grids, parameter files, and result tables.

Data CSVs carry one row per bird with the header
``chicken,pen,transgenic,challenge,t1..tT``; observation symbols are
A (alive), D (dead), M (moribund extraction), and '.' (censored).  A bird
is present up to its last non-censored column and absent afterwards
(physical removal); isolated interior '.' cells are plain missing
observations.  Hidden-state grids use the same layout with S/I/R letters.
All floats are written with shortest round-trip formatting, so identical
runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .core import MISSING, HiddenTrajectories, ObservationGrid
from .sir import ChickenMeta, ModelVariant, SirObservation, SirParams, PARAM_NAMES

SYMBOL_CHARS = {
    int(SirObservation.ALIVE): "A",
    int(SirObservation.DEAD): "D",
    int(SirObservation.MORIBUND_REMOVED): "M",
    MISSING: ".",
}
CHAR_SYMBOLS = {v: k for k, v in SYMBOL_CHARS.items()}
STATE_CHARS = "SIR"


def _fmt(x) -> str:
    if isinstance(x, float):
        if np.isnan(x):
            return ""
        return repr(x)
    return str(x)


def atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_rows_csv(path: str, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _grid_rows(chickens, cells):
    rows = []
    for k, c in enumerate(chickens):
        rows.append([k + 1, c.pen + 1, int(c.transgenic), int(c.challenge)] + cells[k])
    return rows


def _data_header(n_steps: int):
    return ["chicken", "pen", "transgenic", "challenge"] + \
        ["t%d" % (t + 1) for t in range(n_steps)]


def write_observations_csv(path: str, y: ObservationGrid, chickens) -> None:
    cells = [[SYMBOL_CHARS[int(v)] for v in y.symbols[k]] for k in range(y.n_chains)]
    write_rows_csv(path, _data_header(y.n_steps), _grid_rows(chickens, cells))


def write_truth_csv(path: str, x: HiddenTrajectories, chickens) -> None:
    cells = [[STATE_CHARS[int(v)] for v in x.states[k]] for k in range(x.n_chains)]
    write_rows_csv(path, _data_header(x.n_steps), _grid_rows(chickens, cells))


def read_observations_csv(path: str):
    """Load a data CSV into (ObservationGrid, [ChickenMeta]).

    Presence is derived from the trailing-censored rule; moribund symbols
    are validated to appear at most once and only as a bird's final record.
    """
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    n_steps = len(header) - 4
    if n_steps <= 0 or header[:4] != ["chicken", "pen", "transgenic", "challenge"]:
        raise ValueError("unrecognized data header in %s" % path)
    symbols = np.empty((len(rows), n_steps), dtype=np.int16)
    raw = []
    for k, row in enumerate(rows):
        pen = int(row[1]) - 1
        transgenic = bool(int(row[2]))
        challenge = bool(int(row[3]))
        for t, ch in enumerate(row[4:]):
            try:
                symbols[k, t] = CHAR_SYMBOLS[ch.strip()]
            except KeyError:
                raise ValueError("unknown symbol %r at row %d column t%d"
                                 % (ch, k + 1, t + 1))
        non_missing = np.flatnonzero(symbols[k] != MISSING)
        present = np.zeros(n_steps, dtype=bool)
        if non_missing.size:
            present[: non_missing[-1] + 1] = True
        m_idx = np.flatnonzero(symbols[k] == int(SirObservation.MORIBUND_REMOVED))
        if m_idx.size > 1:
            raise ValueError("bird %d has more than one moribund record" % (k + 1))
        if m_idx.size == 1 and non_missing.size and m_idx[0] != non_missing[-1]:
            raise ValueError("bird %d has records after its moribund extraction" % (k + 1))
        raw.append((pen, transgenic, challenge, present))
    pens = np.array([r[0] for r in raw])
    if np.any(np.diff(pens) < 0):
        raise ValueError("rows must be grouped by pen")
    sizes = np.bincount(pens)
    meta = [ChickenMeta(pen, transgenic, challenge, present,
                        pen_size=int(sizes[pen]))
            for pen, transgenic, challenge, present in raw]
    return ObservationGrid(symbols), meta


def read_truth_csv(path: str):
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    n_steps = len(header) - 4
    states = np.empty((len(rows), n_steps), dtype=np.int8)
    for k, row in enumerate(rows):
        for t, ch in enumerate(row[4:]):
            states[k, t] = STATE_CHARS.index(ch.strip())
    return HiddenTrajectories(states, 3)


def grid_envelope(grid, labels, kind: str) -> dict:
    arr = grid.states if isinstance(grid, HiddenTrajectories) else grid.symbols
    return {
        "kind": kind,
        "K": int(arr.shape[0]),
        "T": int(arr.shape[1]),
        "S": len(labels),
        "labels": list(labels),
        "cells": arr.tolist(),
    }


def write_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def write_params_json(path: str, params: SirParams, model_number: int) -> None:
    write_json(path, {"model": model_number,
                      "params": {n: getattr(params, n) for n in PARAM_NAMES}})


def read_params_json(path: str):
    d = read_json(path)
    variant = ModelVariant.from_model_number(int(d["model"]))
    params = SirParams(**{n: float(d["params"][n]) for n in PARAM_NAMES})
    if not params.satisfies(variant):
        raise ValueError("parameters in %s violate model %d ties"
                         % (path, variant.model_number))
    return params, variant


def load_params_arg(path_or_none, variant: ModelVariant):
    """Parameter file, defaulting to the benchmark point for fully-split models."""
    from .sir import scaling_study_params

    if path_or_none is None:
        params = scaling_study_params()
        if not params.satisfies(variant):
            raise ValueError("model %d needs an explicit parameter file"
                             % variant.model_number)
        return params
    params, file_variant = read_params_json(path_or_none)
    if file_variant.model_number != variant.model_number:
        if not params.satisfies(variant):
            raise ValueError("parameter file is for model %d, not %d"
                             % (file_variant.model_number, variant.model_number))
    return params


RANK_HEADER = ["model", "log_ml", "se_log", "lo3", "hi3", "category"]


def write_rank_csv(path: str, table) -> None:
    rows = [[r.model_number, r.log_ml, r.se_log, r.lo3, r.hi3, r.category]
            for r in table.rows]
    write_rows_csv(path, RANK_HEADER, rows)


COMPARE_HEADER = ["method", "n_estimates", "mean_log", "lo3", "hi3", "note"]


def write_compare_csv(path: str, reports) -> None:
    rows = [[r.method, r.n_estimates, r.mean_log, r.lo3, r.hi3, r.note]
            for r in reports]
    write_rows_csv(path, COMPARE_HEADER, rows)


SMOOTH_HEADER = ["chicken", "pen", "t", "day", "p_s", "p_i", "p_r"]


def write_smooth_csv(path: str, marginals: np.ndarray, chickens) -> None:
    clipped = np.clip(marginals, 0.0, 1.0)  # schema: probabilities in [0, 1]
    rows = []
    for k, c in enumerate(chickens):
        for t in range(clipped.shape[1]):
            p = clipped[k, t]
            rows.append([k + 1, c.pen + 1, t + 1, t // 2 + 1,
                         float(p[0]), float(p[1]), float(p[2])])
    write_rows_csv(path, SMOOTH_HEADER, rows)


def write_theta_samples_csv(path: str, tied_samples: np.ndarray) -> None:
    rows = [[float(v) for v in row] for row in tied_samples]
    write_rows_csv(path, list(PARAM_NAMES), rows)


def write_guiding_csv(path: str, ensemble) -> None:
    """Debug dump of a guiding ensemble: one row per (member, bird)."""
    n, k_chains, t_steps = ensemble.trajectories.shape
    header = ["member", "chicken"] + ["t%d" % (t + 1) for t in range(t_steps)]
    rows = []
    for i in range(n):
        for k in range(k_chains):
            rows.append([i + 1, k + 1]
                        + [STATE_CHARS[int(s)] for s in ensemble.trajectories[i, k]])
    write_rows_csv(path, header, rows)
