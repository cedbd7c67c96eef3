"""The two report figures.

Both emit vector (pdf) and raster (png) files whose names carry a digest
of the inputs, and the digests are embedded in the figure metadata, so any
figure can be traced back to the exact files it rendered.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .tables import (PARAM_NAMES, SchemaError, file_digest, read_data_csv,
                     read_evidence_csv, read_smooth_csv,
                     read_theta_samples_csv)

PARAM_LABELS = {
    "p_n": "p (non-transgenic)", "p_t": "p (transgenic)",
    "beta_n": "beta (non-transgenic)", "beta_t": "beta (transgenic)",
    "nu_n": "nu (non-transgenic)",
    "gamma_n": "gamma (non-transgenic)", "gamma_t": "gamma (transgenic)",
}


def weighted_kde(values: np.ndarray, weights: np.ndarray,
                 grid: np.ndarray) -> np.ndarray:
    """Gaussian kernel density with Silverman bandwidth on weighted samples."""
    w = weights / weights.sum()
    mu = float(np.sum(w * values))
    var = float(np.sum(w * (values - mu) ** 2))
    neff = 1.0 / float(np.sum(w ** 2))
    bw = max(np.sqrt(var) * (4.0 / (3.0 * neff)) ** 0.2, 1e-9)
    z = (grid[:, None] - values[None, :]) / bw
    return (np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)) @ w / bw


def model_averaged_densities(samples_by_model: dict, evidence_csv: str,
                             n_grid: int = 256):
    """Evidence-weighted posterior densities per parameter.

    Returns (per-parameter dict of (grid, density), weight-by-model dict,
    list of models in the evidence table without a samples file).
    """
    table = read_evidence_csv(evidence_csv)
    weights = table.weights()
    have = {}
    missing = []
    model_weight = {}
    for m, w in zip(table.models, weights):
        model_weight[int(m)] = float(w)
        if int(m) in samples_by_model:
            have[int(m)] = read_theta_samples_csv(samples_by_model[int(m)])
        else:
            missing.append(int(m))
    unknown = set(samples_by_model) - set(model_weight)
    if unknown:
        raise SchemaError("samples given for models %s absent from the evidence table"
                          % sorted(unknown))
    if not have:
        raise SchemaError("no samples files matched the evidence table")
    kept = np.array([model_weight[m] for m in have])
    kept = kept / kept.sum()
    densities = {}
    for j, name in enumerate(PARAM_NAMES):
        pooled = np.concatenate([have[m][:, j] for m in have])
        pooled_w = np.concatenate([
            np.full(have[m].shape[0], wm / have[m].shape[0])
            for m, wm in zip(have, kept)])
        lo = 0.0
        if name.startswith("p"):
            hi = 1.0
        else:
            # axis range from the models that actually carry weight
            contributing = np.concatenate(
                [have[m][:, j] for m, wm in zip(have, kept) if wm > 1e-9])
            hi = float(contributing.max()) * 1.15 + 1e-6
        grid = np.linspace(lo, hi, n_grid)
        densities[name] = (grid, weighted_kde(pooled, pooled_w, grid))
    return densities, model_weight, missing


def plot_posteriors(samples_by_model: dict, evidence_csv: str,
                    out_dir: str, stem: str = "posteriors") -> list:
    """Render the evidence-weighted parameter posterior panels.

    ``samples_by_model`` maps model numbers to their samples CSVs; models
    listed in the evidence table without a file are annotated on the
    figure rather than silently dropped.  Returns the written paths.
    """
    densities, model_weight, missing = model_averaged_densities(
        samples_by_model, evidence_csv)
    digest = "-".join([file_digest(evidence_csv)]
                      + [file_digest(p) for _, p in sorted(samples_by_model.items())])
    fig, axes = plt.subplots(2, 4, figsize=(13, 6))
    axes = axes.ravel()
    for ax, name in zip(axes, PARAM_NAMES):
        grid, dens = densities[name]
        ax.plot(grid, dens, lw=1.5)
        ax.fill_between(grid, dens, alpha=0.25)
        ax.set_xlabel(PARAM_LABELS[name])
        ax.set_yticks([])
    axes[-1].axis("off")
    lines = ["weights:"] + [
        "model %d: %.3f" % (m, w) for m, w in sorted(model_weight.items())]
    if missing:
        lines.append("no samples for: %s" % ", ".join(map(str, missing)))
    axes[-1].text(0.0, 0.95, "\n".join(lines), va="top", fontsize=7,
                  family="monospace")
    fig.suptitle("Model-averaged parameter posteriors")
    fig.tight_layout()
    return _save(fig, out_dir, "%s_%s" % (stem, digest.split("-")[0]),
                 {"inputs": digest})


def plot_state_heatmap(smooth_csv: str, data_csv: str, out_dir: str,
                       stem: str = "infection_grid") -> list:
    """Render the per-bird daily infection-probability grid.

    Circle shading is P(infectious) (white = zero); squares mark known
    deaths, with a strike when the death is implied by a moribund
    extraction rather than observed directly.
    """
    smooth = read_smooth_csv(smooth_csv)
    data = read_data_csv(data_csv)
    chick_ids, day_ids, grid = smooth.infection_by_day()
    if chick_ids.size != data.chickens.size:
        raise SchemaError("smoothing table covers %d birds, data file %d"
                          % (chick_ids.size, data.chickens.size))
    n_steps = len(data.symbols[0])
    if day_ids.size != (n_steps + 1) // 2:
        raise SchemaError("smoothing table days do not match the data horizon")

    digest = "%s-%s" % (file_digest(smooth_csv), file_digest(data_csv))
    height = max(3.0, 0.22 * chick_ids.size)
    fig, ax = plt.subplots(figsize=(0.5 * day_ids.size + 2.0, height))
    for i, c in enumerate(chick_ids):
        for j, d in enumerate(day_ids):
            ax.add_patch(plt.Circle((d, i), 0.32, facecolor=str(1.0 - grid[i, j]),
                                    edgecolor="0.4", lw=0.5))
    # overlay death markers from the data file
    row_of = {c: i for i, c in enumerate(chick_ids)}
    for bird, symbols in zip(data.chickens, data.symbols):
        for t, ch in enumerate(symbols):
            day = t // 2 + 1
            if ch == "D":
                ax.scatter([day], [row_of[bird]], marker="s", s=90,
                           facecolors="none", edgecolors="black", lw=1.2)
                break
            if ch == "M":
                ax.scatter([day], [row_of[bird]], marker="s", s=90,
                           facecolors="none", edgecolors="black", lw=1.2)
                ax.scatter([day], [row_of[bird]], marker="x", s=60,
                           color="black", lw=1.2)
                break
    pen_bounds = np.flatnonzero(np.diff(data.pens)) + 0.5
    for b in pen_bounds:
        ax.axhline(b, color="0.8", lw=0.8)
    ax.set_xlim(0.3, day_ids.size + 0.7)
    ax.set_ylim(-0.7, chick_ids.size - 0.3)
    ax.set_xlabel("day")
    ax.set_ylabel("bird")
    ax.set_yticks(range(chick_ids.size))
    ax.set_yticklabels(chick_ids, fontsize=6)
    ax.invert_yaxis()
    ax.set_title("Posterior daily infection probabilities")
    fig.tight_layout()
    return _save(fig, out_dir, "%s_%s" % (stem, digest.split("-")[0]),
                 {"inputs": digest})


def _save(fig, out_dir: str, name: str, meta: dict) -> list:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    png = os.path.join(out_dir, name + ".png")
    fig.savefig(png, dpi=150, metadata={"Software": "chmmplots",
                                        "Description": meta["inputs"]})
    paths.append(png)
    pdf = os.path.join(out_dir, name + ".pdf")
    fig.savefig(pdf, metadata={"Subject": meta["inputs"]})
    paths.append(pdf)
    plt.close(fig)
    return paths
