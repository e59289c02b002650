import csv
import os
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from evaluation import POSE_HEADER, SYNTHESIS_HEADER, PoseReport, SynthesisReport
from trainer import LOG_NAME, TrainLog


# Fixed metadata keeps repeated renders byte-identical
PNG_METADATA = {"Software": None}


def resolve_log_path(path):
    return os.path.join(path, LOG_NAME) if os.path.isdir(path) else path


def curve_band(logs, metric):
    """
    Mean and 95% band of a metric across runs on a shared step axis

    Returns:
        (steps, mean, half_width)
    """
    series = []
    for name, log in logs:
        steps, values = log.series(metric)
        if len(steps) == 0:
            raise ValueError(f"{name}: no '{metric}' rows")
        series.append((steps, values))

    axis = np.unique(np.concatenate([s for s, _ in series]))
    stacked = np.stack([np.interp(axis, s, v) for s, v in series])
    mean = stacked.mean(axis=0)
    if len(series) > 1:
        half = 1.96 * stacked.std(axis=0, ddof=1) / np.sqrt(len(series))
    else:
        half = np.zeros_like(mean)
    return axis, mean, half


def plot_curves(logs, metric, out_path, label=None):
    steps, mean, half = curve_band(logs, metric)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    ax.plot(steps, mean, color="tab:blue", label=label or f"mean of {len(logs)} runs")
    ax.fill_between(steps, mean - half, mean + half, color="tab:blue", alpha=0.25, linewidth=0)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out_path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return out_path


def plot_report_bars(path, out_path):
    with open(path, "r", newline="") as f:
        header = next(csv.reader(f), None)
    if header is None:
        raise ValueError(f"{path}: empty report file")
    header = [c.strip() for c in header]

    if header == SYNTHESIS_HEADER:
        report = SynthesisReport.load_from_file(path)
        labels = [f"lft={r['lambda_ft']:g}\nphi_d={r['phi_d']:g}" for r in report.rows]
        values = [r["ssim_mean"] for r in report.rows]
        ylabel = "mean SSIM"
    elif header == POSE_HEADER:
        report = PoseReport.load_from_file(path)
        labels = [f"{r['variant']}\n{r['phi_d'] if r['phi_d'] == 'avg' else format(r['phi_d'], 'g')}"
                  for r in report.rows]
        values = [r["rmse"] for r in report.rows]
        ylabel = "aligned RMSE"
    else:
        raise ValueError(f"{path} line 1: unrecognized report header")
    if not values:
        raise ValueError(f"{path}: report has no rows")

    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(values)), 4), dpi=100)
    ax.bar(np.arange(len(values)), values, color="tab:orange")
    ax.set_xticks(np.arange(len(values)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(out_path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return out_path


class PlotCommand:
    """Learning curves from TrainLog CSVs and bar charts from report CSVs"""

    name = "plot"
    help = "render learning curves or report bar charts"

    def setup_parser(self, parser):
        parser.add_argument("--logs", nargs="+", default=[], help="train_log.csv files or run directories")
        parser.add_argument("--report", default=None, help="synthesis or pose report CSV")
        parser.add_argument("--metric", default="success_rate", help="metric plotted from the logs")
        parser.add_argument("--out", required=True, help="output PNG path")

    def run(self, args):
        if not args.logs and not args.report:
            print("ERROR [cli] nothing to plot; pass --logs or --report", file=sys.stderr)
            return 2
        if args.logs:
            logs = []
            for path in args.logs:
                path = resolve_log_path(path)
                logs.append((path, TrainLog.load_from_file(path)))
            target = args.out if not args.report else os.path.splitext(args.out)[0] + "_curve.png"
            plot_curves(logs, args.metric, target)
            print(f"[plot] Wrote {target}")
        if args.report:
            target = args.out if not args.logs else os.path.splitext(args.out)[0] + "_bars.png"
            plot_report_bars(args.report, target)
            print(f"[plot] Wrote {target}")
        return 0
