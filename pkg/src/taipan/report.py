"""Markdown report and figures from a finished (or partial) results bundle."""
from __future__ import annotations

import glob
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from taipan.experiment import MissingArtifact, load_bundle  # noqa: E402
from taipan.metrics import METRIC_KEYS  # noqa: E402


class EmptyBundle(ValueError):
    pass


def _md_table(df: pd.DataFrame) -> str:
    cols = [" / ".join(str(n) for n in df.index.names if n is not None)] + [str(c) for c in df.columns]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for idx, row in df.iterrows():
        cells = [str(idx) if not isinstance(idx, tuple) else " / ".join(map(str, idx))]
        cells += [v if isinstance(v, str) else f"{v:.2f}" for v in row]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def results_frame(bundle: dict) -> pd.DataFrame:
    rows = [
        {"seed": c["seed"], "method": c["method"], **c["metrics"]}
        for c in bundle["cells"]
        if c.get("status") == "ok" and "metrics" in c
    ]
    return pd.DataFrame(rows, columns=["seed", "method", *METRIC_KEYS])


def summary_table(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation over seeds per method, as 'mean ± std' strings."""
    order = list(dict.fromkeys(frame["method"]))
    grouped = frame.groupby("method", sort=False)[list(METRIC_KEYS)]
    mean, std = grouped.mean(), grouped.std(ddof=0)
    out = mean.copy().astype(object)
    for m in mean.index:
        for k in METRIC_KEYS:
            out.loc[m, k] = f"{mean.loc[m, k]:.2f} ± {std.loc[m, k]:.2f}"
    out = out.loc[order]
    out.index.name = "method"
    return out


def _plot_curves(out_dir: str, paths: list[str]) -> str | None:
    if not paths:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for p in paths:
        with open(p) as fh:
            traj = json.load(fh)["trajectory"]
        if traj:
            ax.plot([r["step"] for r in traj], [r["prm"] for r in traj], label=p.split(os.sep)[-4])
    ax.set_xlabel("adaptation step")
    ax.set_ylabel("token objective")
    ax.legend(fontsize=7)
    fig.tight_layout()
    name = "adaptation_curve.png"
    fig.savefig(os.path.join(out_dir, name), dpi=120)
    plt.close(fig)
    return name


def _plot_nodes(out_dir: str, csvs: list[str]) -> list[str]:
    if not csvs:
        return []
    table = pd.concat([pd.read_csv(p) for p in csvs], ignore_index=True)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5), sharey=True)
    for ax, col in zip(axes, ("degree", "homophily")):
        ax.scatter(table[col], table["node_accuracy"], s=6, alpha=0.4)
        ax.set_xlabel(col)
    axes[0].set_ylabel("share of attributes inferred")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "vulnerability_scatter.png"), dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(table["joint_confidence"], bins=30)
    ax.set_xlabel("joint confidence")
    ax.set_ylabel("nodes")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "joint_confidence.png"), dpi=120)
    plt.close(fig)
    return ["vulnerability_scatter.png", "joint_confidence.png"]


def emit_report(bundle_dir: str) -> str:
    """Write ``report.md`` plus PNG figures into ``bundle_dir``; returns the report path."""
    bundle = load_bundle(bundle_dir)
    frame = results_frame(bundle)
    if frame.empty:
        raise EmptyBundle(f"bundle in {bundle_dir} has no successful cells to report")

    parts = [
        "# Attribute inference results",
        "",
        f"config hash `{bundle['config_hash']}`, scenario `{bundle['config'].get('scenario')}`, "
        f"seeds {bundle['seeds']}" + ("" if bundle.get("complete") else " (INCOMPLETE bundle)"),
        "",
        "## Mean ± std over seeds",
        "",
        _md_table(summary_table(frame)),
        "",
    ]

    audits = []
    for p in sorted(glob.glob(os.path.join(bundle_dir, "seed_*", "audit.json"))):
        with open(p) as fh:
            a = json.load(fh)
        audits.append({"seed": a["seed"], "ODC": a.get("ODC", np.nan), "DDC": a.get("DDC", np.nan)})
    if audits:
        at = pd.DataFrame(audits).set_index("seed")
        parts += ["## Leakage audit (dCor x100)", "", _md_table(at), ""]

    vuln = []
    for c in bundle["cells"]:
        mp = os.path.join(bundle_dir, c.get("path", ""), "metrics.json")
        if c.get("status") == "ok" and c.get("path") and os.path.exists(mp):
            with open(mp) as fh:
                v = json.load(fh).get("extra", {}).get("vulnerability")
            if v:
                vuln.append({"seed": c["seed"], "method": c["method"], **v})
    if vuln:
        vt = pd.DataFrame(vuln).set_index(["seed", "method"])
        parts += ["## Vulnerability (Spearman vs node accuracy)", "", _md_table(vt), ""]

    failed = [c for c in bundle["cells"] if c.get("status") != "ok"]
    if failed:
        parts += ["## Failed cells", ""]
        parts += [f"- seed {c['seed']} / {c['method']}: {c.get('error', 'unknown error')}" for c in failed]
        parts.append("")

    figures = []
    curve = _plot_curves(
        bundle_dir, sorted(glob.glob(os.path.join(bundle_dir, "seed_*", "checkpoints", "full", "adapted_trajectory.json")))
    )
    if curve:
        figures.append(curve)
    figures += _plot_nodes(bundle_dir, sorted(glob.glob(os.path.join(bundle_dir, "seed_*", "methods", "Taipan", "per_node.csv"))))
    if figures:
        parts += ["## Figures", ""] + [f"![{f}]({f})" for f in figures] + [""]

    appendix = frame.set_index(["seed", "method"]).sort_index()
    parts += ["## Appendix: per-seed values", "", _md_table(appendix), ""]

    path = os.path.join(bundle_dir, "report.md")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
    return path


__all__ = ["emit_report", "results_frame", "summary_table", "EmptyBundle", "MissingArtifact"]
