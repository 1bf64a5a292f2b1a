"""Figure-data export: CSV tables plus rendered PNGs.

Three analyses come out of completed run artifacts:

* monitored node: ground-truth RMS voltage vs the points the VO actually
  forwarded (shows the burst following the transient);
* estimated trajectory of a non-instrumented node under each mode;
* per-second network load, frames per second normalized by PMU count.

Every figure is written both as a delimited CSV (plottable by any tool)
and as a PNG rendered with matplotlib.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

from .kv import KvFormatError, load_kv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


class FigureError(Exception):
    pass


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise FigureError(f"missing artifact file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            if line.strip():
                rows.append(dict(zip(header, line.rstrip("\n").split(","))))
    return rows


def _run_meta(run_dir: Path) -> dict:
    doc = load_kv(run_dir / "experiment.kv", "experiment")
    return {
        "mode": doc.get("mode", "?"),
        "pmu_nodes": [int(n) for n in doc.get("pmu_nodes", "").split()],
    }


def export_monitored_node(run_dir: Path, out_dir: Path) -> list[Path]:
    truth_rows = _read_csv(run_dir / "truth.csv")
    emission_rows = _read_csv(run_dir / "emissions.csv")
    meta = _run_meta(run_dir)
    monitored = meta["pmu_nodes"]

    emitted = defaultdict(dict)  # node -> time -> vmag
    for row in emission_rows:
        node = int(row["vo_id"].split("-", 1)[1])
        emitted[node][f"{float(row['time_s']):.6f}"] = float(row["vmag_pu"])

    csv_path = out_dir / "fig_monitored_node.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("time_s,node,truth_vmag_pu,emitted_vmag_pu\n")
        series = defaultdict(list)
        for row in truth_rows:
            node = int(row["node"])
            if node not in monitored:
                continue
            key = f"{float(row['time_s']):.6f}"
            sent = emitted[node].get(key, "")
            fh.write(f"{key},{node},{row['vmag_pu']},{sent}\n")
            series[node].append((float(key), float(row["vmag_pu"]),
                                 None if sent == "" else float(sent)))

    fig, axes = plt.subplots(len(monitored), 1, figsize=(9, 3 * len(monitored)),
                             sharex=True, squeeze=False)
    for ax, node in zip(axes[:, 0], monitored):
        rows = series[node]
        ax.plot([r[0] for r in rows], [r[1] for r in rows], lw=0.8,
                label="PMU measurements (50 fps)")
        sent = [(r[0], r[2]) for r in rows if r[2] is not None]
        ax.plot([s[0] for s in sent], [s[1] for s in sent], "o", ms=3,
                label="forwarded by VO")
        ax.set_ylabel(f"node {node} |V| (pu)")
        ax.legend(loc="best", fontsize=8)
    axes[-1, 0].set_xlabel("time (s)")
    fig.tight_layout()
    png_path = out_dir / "fig_monitored_node.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def export_estimated_node(runs: dict[str, Path], out_dir: Path,
                          node: int = 33) -> list[Path]:
    series: dict[str, list[tuple[float, float]]] = {}
    truth_dir = next(iter(runs.values()))
    truth_rows = [
        (float(r["time_s"]), float(r["vmag_pu"]))
        for r in _read_csv(truth_dir / "truth.csv")
        if int(r["node"]) == node
    ]
    series["truth"] = truth_rows
    for label, run_dir in runs.items():
        rows = _read_csv(run_dir / "records.csv")
        series[label] = [
            (float(r["trigger_s"]), float(r["vmag_pu"]))
            for r in rows if int(r["node"]) == node
        ]

    csv_path = out_dir / f"fig_node{node}_estimate.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("time_s,series,vmag_pu\n")
        for label, rows in series.items():
            for t, v in rows:
                fh.write(f"{t:.6f},{label},{v:.15g}\n")

    fig, ax = plt.subplots(figsize=(9, 4))
    for label, rows in series.items():
        style = {"truth": dict(lw=0.8, color="0.4")}.get(label, dict(lw=1.0))
        if label != "truth" and len(rows) < 200:
            ax.plot([r[0] for r in rows], [r[1] for r in rows], ".-",
                    ms=3, label=label, **style)
        else:
            ax.plot([r[0] for r in rows], [r[1] for r in rows],
                    label=label, **style)
    ax.set_xlabel("time (s)")
    ax.set_ylabel(f"node {node} |V| (pu)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    png_path = out_dir / f"fig_node{node}_estimate.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def export_network_load(runs: dict[str, Path], out_dir: Path) -> list[Path]:
    per_mode: dict[str, dict[int, int]] = {}
    for label, run_dir in runs.items():
        meta = _run_meta(run_dir)
        n_pmus = max(1, len(meta["pmu_nodes"]))
        buckets: dict[int, int] = defaultdict(int)
        for row in _read_csv(run_dir / "ledger.csv"):
            if row["link"].startswith("vo->cloud"):
                buckets[int(row["second"])] += int(row["frames"])
        per_mode[label] = {sec: frames // n_pmus if frames % n_pmus == 0
                           else frames / n_pmus
                           for sec, frames in sorted(buckets.items())}

    csv_path = out_dir / "fig_network_load.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("second,mode,frames_per_pmu\n")
        for label, buckets in per_mode.items():
            for sec, fps in buckets.items():
                fh.write(f"{sec},{label},{fps}\n")

    fig, ax = plt.subplots(figsize=(9, 4))
    for label, buckets in per_mode.items():
        seconds = sorted(buckets)
        ax.step(seconds, [buckets[s] for s in seconds], where="post",
                label=label)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frames/s per PMU")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    png_path = out_dir / "fig_network_load.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def export_figures(runs: dict[str, Path], out_dir: Path,
                   node: int = 33) -> list[Path]:
    """All three figure exports from one or more completed run directories.

    ``runs`` maps a display label (usually the mode name) to its artifacts
    directory. The monitored-node figure uses the first adaptive run if
    present, otherwise the first run given.
    """
    if not runs:
        raise FigureError("no run directories given")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = {label: Path(p) for label, p in runs.items()}

    monitored_source = next(
        (p for label, p in runs.items() if label.startswith("adaptive")),
        next(iter(runs.values())),
    )
    paths = export_monitored_node(monitored_source, out_dir)
    paths += export_estimated_node(runs, out_dir, node=node)
    paths += export_network_load(runs, out_dir)
    return paths
