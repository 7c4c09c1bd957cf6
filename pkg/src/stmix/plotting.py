"""Diagnostic figures written to files (no interactive display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def trace_plots(draws, out_dir) -> list[Path]:
    """Trace plots of beta, sigma2 and the mixing hyperparameters."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blocks = draws.draws if hasattr(draws, "draws") else [draws]
    paths = []
    for b in blocks:
        suffix = "" if b.period is None else f"_period{b.period + 1}"
        K, P = b.beta.shape[1], b.beta.shape[2]
        fig, axes = plt.subplots(P + 1, 1, figsize=(8, 1.8 * (P + 1)), sharex=True)
        for j in range(P):
            for k in range(K):
                axes[j].plot(b.beta[:, k, j], lw=0.6, label=f"k={k + 1}")
            axes[j].set_ylabel(f"beta[.][{j}]")
        for k in range(K):
            axes[P].plot(b.sigma2[:, k], lw=0.6, label=f"k={k + 1}")
        axes[P].set_ylabel("sigma2")
        axes[P].set_xlabel("stored draw")
        axes[0].legend(loc="upper right", fontsize="small", ncol=K)
        fig.tight_layout()
        p = out_dir / f"trace_components{suffix}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
        if K > 1:
            names = ["mu", "tau", "alpha", "rho"] if b.variant != "spatial" else ["mu", "tau", "rho"]
            if b.variant == "two_way":
                names = ["mu", "tau", "alpha"]
            fig, axes = plt.subplots(len(names), 1, figsize=(8, 1.8 * len(names)), sharex=True)
            for ax, name in zip(np.atleast_1d(axes), names):
                arr = getattr(b, name)
                for k in range(1, K):
                    ax.plot(arr[:, k], lw=0.6, label=f"k={k + 1}")
                ax.set_ylabel(name)
            np.atleast_1d(axes)[0].legend(loc="upper right", fontsize="small")
            fig.tight_layout()
            p = out_dir / f"trace_mixing{suffix}.png"
            fig.savefig(p, dpi=100)
            plt.close(fig)
            paths.append(p)
    return paths


def interval_plot(table, quantity: str, out_dir) -> Path:
    """Posterior means and intervals of one quantity, one line per area, across periods."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    st = table.stats[quantity]
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(len(table.periods))
    for i in range(len(table.area_ids)):
        ax.plot(x, st["mean"][i], lw=0.5, color="C0", alpha=0.4)
    ax.fill_between(x, np.nanmin(st["lower"], axis=0), np.nanmax(st["upper"], axis=0), color="C0", alpha=0.1)
    ax.set_xticks(x, table.periods)
    ax.set_xlabel("period")
    ax.set_ylabel(quantity)
    fig.tight_layout()
    safe = quantity.replace("[", "_").replace("]", "")
    p = out_dir / f"summary_{safe}.png"
    fig.savefig(p, dpi=100)
    plt.close(fig)
    return p


def matching_plot(reports, out_dir, threshold: float = 0.999) -> Path:
    """Matching fraction against K."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ks = [r.K for r in reports]
    ax.plot(ks, [r.fraction for r in reports], "o-", label="sum criterion")
    ax.plot(ks, [r.exact_fraction for r in reports], "s--", label="permutation")
    ax.axhline(threshold, color="grey", lw=0.8)
    ax.set_xticks(ks)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("K")
    ax.set_ylabel("matching fraction")
    ax.legend(fontsize="small")
    fig.tight_layout()
    p = out_dir / "matching_fraction.png"
    fig.savefig(p, dpi=100)
    plt.close(fig)
    return p
