"""CSV tables and figures for embedding runs and payload sweeps."""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .devpipe import unblockify
from .formats import atomic_write
from .lattice import N_LATTICES

SWEEP_FIELDS = (["cover", "H_in", "H_out", "drop", "lambda_in", "lambda_baseline", "nzac", "n_conditioned",
                 "n_plus", "n_minus"]
                + [f"H_in_L{i}" for i in range(N_LATTICES)] + [f"H_out_L{i}" for i in range(N_LATTICES)])


def sweep_row(cover_name, cal) -> dict:
    rep = cal.report
    row = {"cover": cover_name, "H_in": rep.H_in, "H_out": rep.H_out, "drop": rep.drop,
           "lambda_in": rep.lam, "lambda_baseline": cal.lam_baseline, "nzac": rep.nzac,
           "n_conditioned": rep.n_conditioned, "n_plus": rep.n_plus, "n_minus": rep.n_minus}
    for i in range(N_LATTICES):
        row[f"H_in_L{i}"] = rep.lattice_entropy_in[i]
        row[f"H_out_L{i}"] = rep.lattice_entropy_out[i]
    return row


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def csv_text(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def write_sweep_csv(path, rows):
    atomic_write(path, csv_text(rows, SWEEP_FIELDS))


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k != "cover":
                r[k] = float(v)
    return rows


def lattice_table(report) -> list[dict]:
    """Per-lattice mean entropies of one run."""
    return [{"lattice": i, "H_in": report.lattice_entropy_in[i], "H_out": report.lattice_entropy_out[i]}
            for i in range(N_LATTICES)]


def write_lattice_csv(path, report):
    atomic_write(path, csv_text(lattice_table(report), ["lattice", "H_in", "H_out"]))


def change_probability_difference(pmf_sync, pmf_base) -> np.ndarray:
    """``P(change)`` under synchronization minus baseline, laid out as an image."""
    d = (1.0 - pmf_sync[..., 1]) - (1.0 - pmf_base[..., 1])
    return unblockify(d)


def write_matrix_csv(path, M):
    buf = io.StringIO()
    np.savetxt(buf, np.asarray(M), delimiter=",", fmt="%.10g")
    atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------- figures


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams.update({"font.size": 9, "axes.grid": True, "grid.alpha": 0.3, "figure.dpi": 120})
    return plt


def _mean_by(rows, key, val):
    xs = sorted({r[key] for r in rows})
    ys = [[r[val] for r in rows if r[key] == x] for x in xs]
    m = np.array([np.mean(v) for v in ys])
    s = np.array([np.std(v) for v in ys])
    return np.array(xs), m, s


def plot_entropy_drop(rows, path):
    """Entropy drop against target payload, mean and spread over covers."""
    plt = _plt()
    x, m, s = _mean_by(rows, "H_in", "drop")
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    ax.fill_between(x, m - s, m + s, alpha=0.25, lw=0)
    ax.plot(x, m, "o-", ms=3)
    ax.axhline(0.1, color="k", ls="--", lw=0.8)
    ax.set_xlabel(r"$H_{in}$ (bits/nzAC)")
    ax.set_ylabel(r"$H_{in}-H_{out}$ (bits/nzAC)")
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_lattice_entropies(rows, path):
    """Mean per-lattice entropy, input vs synchronized, one curve pair per payload."""
    plt = _plt()
    payloads = sorted({r["H_in"] for r in rows})
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    lat = np.arange(N_LATTICES)
    cmap = plt.get_cmap("viridis")
    for k, h in enumerate(payloads):
        sub = [r for r in rows if r["H_in"] == h]
        hin = np.mean([[r[f"H_in_L{i}"] for i in lat] for r in sub], axis=0)
        hout = np.mean([[r[f"H_out_L{i}"] for i in lat] for r in sub], axis=0)
        col = cmap(k / max(len(payloads) - 1, 1))
        ax.plot(lat, hin, "--", color=col, lw=0.9)
        ax.plot(lat, hout, "o-", color=col, ms=3, label=f"{h:g}")
    ax.set_xlabel("lattice")
    ax.set_ylabel("mean entropy (bits/coef.)")
    ax.set_ylim(bottom=0)
    ax.legend(title=r"$H_{in}$", fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_probability_difference(M, path):
    plt = _plt()
    M = np.asarray(M)
    v = float(np.abs(M).max()) or 1.0
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(M, cmap="RdBu_r", vmin=-v, vmax=v, interpolation="nearest")
    ax.grid(False)
    ax.set_xticks(np.arange(0, M.shape[1] + 1, 8) - 0.5, minor=True)
    ax.set_yticks(np.arange(0, M.shape[0] + 1, 8) - 0.5, minor=True)
    if max(M.shape) <= 128:
        ax.grid(which="minor", color="k", lw=0.3, alpha=0.4)
    fig.colorbar(im, ax=ax, label="P(change) sync - baseline")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render(out_dir, sweep_rows=None, diff=None, fmt="png") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if sweep_rows:
        p = out_dir / f"entropy_drop.{fmt}"
        plot_entropy_drop(sweep_rows, p)
        written.append(p)
        p = out_dir / f"lattice_entropy.{fmt}"
        plot_lattice_entropies(sweep_rows, p)
        written.append(p)
    if diff is not None:
        p = out_dir / f"probability_difference.{fmt}"
        plot_probability_difference(diff, p)
        written.append(p)
    return written
