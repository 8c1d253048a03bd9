"""Figure renderers for the experiment CSV artifacts.

One renderer per figure kind plus a dispatcher. Renderers do no statistics:
every number is read from the CSV or from summary.json (theory reference
lines); the only transforms applied are axis transforms such as logs and
quantile pairing. Next to each image a ``<image>.meta.json`` sidecar records
the reference-line values and axis ranges for pixel-free verification.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


class SchemaError(ValueError):
    """CSV does not carry the columns the figure kind needs."""


@dataclass
class FigureSpec:
    csv_path: str
    figure_kind: str
    output_path: str
    summary_path: str | None = None
    title: str | None = None
    labels: dict = field(default_factory=dict)


REQUIRED_COLUMNS = {
    "variance_inflation": ["sd_empirical", "sd_classical", "sd_theory"],
    "qq": ["normal_quantile", "std_theory_wins", "std_classical_wins"],
    "ratio_curves": ["kappa", "gamma", "log_f_ratio"],
    "between_pair": ["kappa_split", "gamma", "theory"],
    "loocv_curve": ["lambda", "sd_theory", "sd_empirical", "chosen_by_loocv"],
}

FIGURE_KINDS = tuple(REQUIRED_COLUMNS)


def _read_csv(path: str) -> dict:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: no header row")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    out = {}
    for name in reader.fieldnames:
        vals = [r[name] for r in rows]
        try:
            out[name] = np.array([float(v) for v in vals])
        except ValueError:
            out[name] = np.array(vals)
    return out


def _check_columns(kind: str, data: dict, path: str):
    missing = [c for c in REQUIRED_COLUMNS[kind] if c not in data]
    if missing:
        raise SchemaError(
            f"{path}: missing columns for kind {kind!r}: {', '.join(missing)}"
        )


def _load_summary(spec: FigureSpec) -> dict:
    if spec.summary_path is None:
        return {}
    with open(spec.summary_path) as fh:
        return json.load(fh)


def _render_variance_inflation(data, summary, ax):
    sd = data["sd_empirical"]
    ax.hist(sd, bins=max(5, min(40, sd.size // 3)), color="#77aadd",
            edgecolor="white", label="empirical SE")
    section = summary.get("variance_inflation", {})
    classical = section.get("sd_classical", float(data["sd_classical"][0]))
    theory = section.get("sd_theory", float(data["sd_theory"][0]))
    ax.axvline(classical, color="red", lw=2, label="classical SE")
    ax.axvline(theory, color="#225588", lw=2, ls="--", label="high-dim SE")
    ax.set_xlabel("standard error of the scaled cross-fit estimator")
    ax.set_ylabel("count")
    ax.legend()
    return {"classical_line": classical, "theory_line": theory,
            "n_points": int(sd.size)}


def _render_qq(data, summary, ax):
    q = data["normal_quantile"]
    ax.plot(q, q, color="gray", lw=1, ls="--", label="reference")
    ax.plot(q, data["std_classical_wins"], ".", ms=3, color="#55ccee",
            label="classical standardization")
    ax.plot(q, data["std_theory_wins"], ".", ms=3, color="#225588",
            label="high-dim standardization")
    ax.set_xlabel("theoretical normal quantile")
    ax.set_ylabel("sample quantile (standardized)")
    ax.legend()
    return {"n_points": int(q.size), "reference_slope": 1.0}


def _render_ratio_curves(data, summary, ax):
    refs = {}
    for gamma in np.unique(data["gamma"]):
        sel = data["gamma"] == gamma
        order = np.argsort(data["kappa"][sel])
        ax.plot(data["kappa"][sel][order], data["log_f_ratio"][sel][order],
                marker="o", label=f"gamma={gamma:g}")
        refs[f"gamma={gamma:g}"] = float(data["log_f_ratio"][sel][order][-1])
    ax.axhline(0.0, color="gray", lw=1)
    ax.set_xlabel("p/n")
    ax.set_ylabel("log( f / E[1/sigma(x'beta)] )")
    ax.legend()
    return {"zero_line": 0.0, "last_values": refs}


def _render_between_pair(data, summary, ax):
    refs = {}
    for gamma in np.unique(data["gamma"]):
        sel = (data["gamma"] == gamma) & (data["theory"] < 0)
        if not sel.any():
            continue
        order = np.argsort(data["kappa_split"][sel])
        x = data["kappa_split"][sel][order]
        y = -np.log10(-data["theory"][sel][order])
        ax.plot(x, y, marker="o", label=f"gamma={gamma:g}")
        refs[f"gamma={gamma:g}"] = float(y[-1])
    if "empirical" in data:
        sel = np.isfinite(data["empirical"]) & (data["empirical"] < 0)
        if sel.any():
            ax.plot(data["kappa_split"][sel],
                    -np.log10(-data["empirical"][sel]), "k*", ms=10,
                    label="empirical")
    ax.set_xlabel("per-split p/n")
    ax.set_ylabel("-log10( -between-pair covariance )")
    ax.legend()
    return {"curves": refs}


def _render_loocv_curve(data, summary, ax):
    order = np.argsort(data["lambda"])
    lam = data["lambda"][order]
    ax.plot(lam, data["sd_theory"][order], color="#2255cc", marker="o",
            label="theoretical SD")
    ax.plot(lam, data["sd_empirical"][order], color="#99bbee", marker=".",
            ls=":", label="empirical SD")
    chosen = data["chosen_by_loocv"][order] > 0
    refs = {}
    if chosen.any():
        lam_loocv = float(lam[chosen][0])
        sd_loocv = float(data["sd_theory"][order][chosen][0])
        ax.axhline(sd_loocv, color="red", ls="--", lw=2,
                   label=f"LOOCV choice (lambda={lam_loocv:g})")
        refs = {"lambda_loocv": lam_loocv, "sd_at_loocv": sd_loocv}
    section = summary.get("loocv_curve", {})
    if "sd_theory_mle" in section:
        ax.axhline(section["sd_theory_mle"], color="gray", lw=1, ls="-.",
                   label="MLE")
        refs["sd_theory_mle"] = section["sd_theory_mle"]
    ax.set_xscale("log")
    ax.set_xlabel("ridge penalty")
    ax.set_ylabel("SD of the scaled cross-fit estimator")
    ax.legend()
    return refs


RENDERERS = {
    "variance_inflation": _render_variance_inflation,
    "qq": _render_qq,
    "ratio_curves": _render_ratio_curves,
    "between_pair": _render_between_pair,
    "loocv_curve": _render_loocv_curve,
}


def render(spec: FigureSpec) -> str:
    """Render one figure; writes the image and its .meta.json sidecar."""
    if spec.figure_kind not in RENDERERS:
        raise ValueError(f"unknown figure kind {spec.figure_kind!r}")
    data = _read_csv(spec.csv_path)
    _check_columns(spec.figure_kind, data, spec.csv_path)
    summary = _load_summary(spec)
    fig, ax = plt.subplots(figsize=(6.4, 4.8), dpi=120)
    try:
        refs = RENDERERS[spec.figure_kind](data, summary, ax)
        if spec.title:
            ax.set_title(spec.title)
        if "xlabel" in spec.labels:
            ax.set_xlabel(spec.labels["xlabel"])
        if "ylabel" in spec.labels:
            ax.set_ylabel(spec.labels["ylabel"])
        meta = {
            "figure_kind": spec.figure_kind,
            "csv_path": os.path.abspath(spec.csv_path),
            "reference_lines": refs,
            "x_range": list(ax.get_xlim()),
            "y_range": list(ax.get_ylim()),
        }
        fig.tight_layout()
        fig.savefig(spec.output_path)
    finally:
        plt.close(fig)
    with open(spec.output_path + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return spec.output_path
