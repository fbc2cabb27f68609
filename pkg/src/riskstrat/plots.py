"""Plot-ready CSVs derived from a report bundle, and PNG rendering of them."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

Z975 = 1.959963984540054
DENSITY_BINS = 50
BOUNDARY_POINTS = 201

FOREST_COLUMNS = ["outcome_id", "risk_stratum", "hr", "hr_lo", "hr_hi", "ard", "ard_lo",
                  "ard_hi", "diagnostics_pass"]


def significance_boundary(max_abs_log_hr: float, points: int = BOUNDARY_POINTS) -> pd.DataFrame:
    """Curve se = |log_hr| / z_0.975; estimates with se below it are significant."""
    x = np.linspace(-max_abs_log_hr, max_abs_log_hr, points)
    return pd.DataFrame({"log_hr": x, "se": np.abs(x) / Z975})


def preference_density(ps: pd.DataFrame, bins: int = DENSITY_BINS) -> pd.DataFrame:
    edges = np.linspace(0.0, 1.0, bins + 1)
    centers = 0.5 * (edges[1:] + edges[:-1])
    ps = ps.copy()
    ps["arm"] = np.where(ps["treatment"] == 1, "target", "comparator")
    rows = []
    for (oid, stratum, arm), g in ps.groupby(["outcome_id", "risk_stratum", "arm"], sort=True):
        vals = g["preference"].dropna().to_numpy(float)
        if vals.size == 0:
            continue
        dens, _ = np.histogram(vals, bins=edges, density=True)
        rows.append(pd.DataFrame({"outcome_id": oid, "risk_stratum": stratum, "arm": arm,
                                  "preference": centers, "density": dens}))
    if not rows:
        return pd.DataFrame(columns=["outcome_id", "risk_stratum", "arm", "preference",
                                     "density"])
    return pd.concat(rows, ignore_index=True)


def _read(path, **kw) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False, **kw)


def emit_plot_data(bundle_dir, out_dir) -> dict[str, Path]:
    """Write the per-figure CSVs; returns name -> path.

    Projections (balance, forest) are copied as text so values match the
    bundle byte for byte.
    """
    bundle_dir, out_dir = Path(bundle_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}

    def put(name, df):
        p = out_dir / name
        df.to_csv(p, index=False, lineterminator="\n")
        written[name] = p

    est = _read(bundle_dir / "estimates.csv", dtype=str)
    put("forest.csv", est[FOREST_COLUMNS])
    put("balance_scatter.csv", _read(bundle_dir / "balance.csv", dtype=str))

    ncs = pd.read_csv(bundle_dir / "ncs.csv", dtype={"risk_stratum": str,
                                                     "target_outcome_id": str,
                                                     "outcome_id": str})
    ncs["significant"] = (ncs["p"] < 0.05).astype(int) if len(ncs) else []
    put("nc_scatter.csv", ncs)
    span = float(np.nanmax(np.abs(ncs["log_hr"]))) if len(ncs) else 1.0
    span = max(1.0, np.ceil(span * 1.1 * 10) / 10) if np.isfinite(span) else 1.0
    put("nc_boundary.csv", significance_boundary(span))

    ps = pd.read_csv(bundle_dir / "ps.csv", dtype={"risk_stratum": str, "outcome_id": str})
    put("preference_density.csv", preference_density(ps))
    return written


# ----------------------------------------------------------------- rendering

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _stratum_order(labels):
    labels = list(dict.fromkeys(labels))
    return sorted(labels, key=lambda s: (not str(s).isdigit(), int(s) if str(s).isdigit() else 0))


def render_figures(plot_dir, fig_dir=None) -> list[Path]:
    """Render the plot-data CSVs in ``plot_dir`` to PNGs (one set per outcome)."""
    plt = _pyplot()
    plot_dir = Path(plot_dir)
    fig_dir = Path(fig_dir) if fig_dir is not None else plot_dir
    fig_dir.mkdir(parents=True, exist_ok=True)
    out = []

    def save(fig, name):
        p = fig_dir / name
        fig.savefig(p, dpi=120, bbox_inches="tight", metadata={"Software": None})
        plt.close(fig)
        out.append(p)

    forest = pd.read_csv(plot_dir / "forest.csv", dtype={"risk_stratum": str, "outcome_id": str})
    dens = pd.read_csv(plot_dir / "preference_density.csv",
                       dtype={"risk_stratum": str, "outcome_id": str})
    bal = pd.read_csv(plot_dir / "balance_scatter.csv",
                      dtype={"risk_stratum": str, "outcome_id": str})
    ncs = pd.read_csv(plot_dir / "nc_scatter.csv",
                      dtype={"risk_stratum": str, "target_outcome_id": str})
    bound = pd.read_csv(plot_dir / "nc_boundary.csv")

    for oid, f in forest.groupby("outcome_id", sort=True):
        strata = _stratum_order(f["risk_stratum"])
        f = f.set_index("risk_stratum").loc[strata]
        y = np.arange(len(strata))[::-1]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 0.5 * len(strata) + 1.5), sharey=True)
        ax1.errorbar(f["hr"], y, xerr=[f["hr"] - f["hr_lo"], f["hr_hi"] - f["hr"]],
                     fmt="o", color="k", capsize=3)
        ax1.axvline(1.0, ls="--", color="grey")
        ax1.set_xscale("log")
        ax1.set_xlabel("hazard ratio")
        ax2.errorbar(f["ard"], y, xerr=[f["ard"] - f["ard_lo"], f["ard_hi"] - f["ard"]],
                     fmt="o", color="k", capsize=3)
        ax2.axvline(0.0, ls="--", color="grey")
        ax2.set_xlabel("absolute risk difference (%)")
        ax1.set_yticks(y)
        ax1.set_yticklabels([s if s == "overall" else f"risk stratum {s}" for s in strata])
        fig.suptitle(f"outcome {oid}")
        save(fig, f"forest_{oid}.png")

        sub = dens[dens["outcome_id"] == oid]
        strata = _stratum_order(sub["risk_stratum"])
        if strata:
            fig, axes = plt.subplots(1, len(strata), figsize=(3 * len(strata), 2.6), squeeze=False)
            for ax, s in zip(axes[0], strata):
                for arm, color in (("target", "tab:blue"), ("comparator", "tab:orange")):
                    g = sub[(sub["risk_stratum"] == s) & (sub["arm"] == arm)]
                    ax.fill_between(g["preference"], g["density"], alpha=0.4, color=color,
                                    label=arm, step="mid")
                ax.set_title(s)
                ax.set_xlabel("preference score")
            axes[0][0].legend(fontsize=7)
            save(fig, f"preference_{oid}.png")

        sub = bal[bal["outcome_id"] == oid]
        if len(sub):
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.scatter(sub["smd_before"].abs(), sub["smd_after"].abs(), s=6, alpha=0.5)
            lim = max(0.15, float(np.nanmax(sub[["smd_before", "smd_after"]].abs().to_numpy())))
            ax.axhline(0.1, ls="--", color="grey")
            ax.plot([0, lim], [0, lim], color="lightgrey", lw=0.8)
            ax.set_xlabel("|SMD| before")
            ax.set_ylabel("|SMD| after")
            save(fig, f"balance_{oid}.png")

        sub = ncs[ncs["target_outcome_id"].astype(str) == str(oid)]
        if len(sub):
            fig, ax = plt.subplots(figsize=(4.5, 4))
            ax.scatter(sub["log_hr"], sub["se"], s=10, c=np.where(sub["significant"] == 1,
                                                                  "tab:red", "tab:blue"))
            ax.plot(bound["log_hr"], bound["se"], ls="--", color="grey")
            ax.set_xlabel("log hazard ratio")
            ax.set_ylabel("standard error")
            ax.set_ylim(bottom=0)
            ax.invert_yaxis()
            save(fig, f"negative_controls_{oid}.png")
    return out
