#!/usr/bin/env python3
"""Plots the CSV output of an mftd command directory.

usage: plot.py OUTPUT_DIR [--save FILE]
"""
import argparse
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd


def plot_records(df, ax):
    ax.semilogy(df["t"], df["optimality_gap"], label="optimality gap")
    ax.semilogy(df["t"], df["bellman_residual"], label="Bellman residual")
    ax.set_xlabel("t")
    ax.legend()


def plot_coupling(df, ax):
    for (pair, param), g in df.groupby(["pair", "grid_param"]):
        mean = g.groupby("grid_value")["distance"].mean()
        ax.loglog(mean.index, mean.values, "o-", label=f"{pair} vs {param}")
    ax.set_ylabel("sup distance")
    ax.legend()


def plot_summary(df, ax):
    ax.loglog(df["value"], df["mean_plateau_gap"], "o-", label="plateau gap")
    ax.loglog(df["value"], df["mean_terminal_kernel_drift"], "s--", label="kernel drift")
    ax.set_xlabel(df["param"].iloc[0])
    ax.legend()


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("dir", type=Path)
    parser.add_argument("--save", type=Path)
    args = parser.parse_args()

    panels = []
    if (args.dir / "records.csv").exists():
        panels.append((plot_records, pd.read_csv(args.dir / "records.csv")))
    if (args.dir / "coupling.csv").exists():
        panels.append((plot_coupling, pd.read_csv(args.dir / "coupling.csv")))
    for f in sorted(args.dir.glob("*_summary.csv")):
        if "kappa" not in f.name:
            panels.append((plot_summary, pd.read_csv(f)))
    if not panels:
        raise SystemExit(f"no plottable CSV in {args.dir}")

    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 4), squeeze=False)
    for (fn, df), ax in zip(panels, axes[0]):
        fn(df, ax)
    fig.tight_layout()
    if args.save:
        fig.savefig(args.save, dpi=120)
    else:
        plt.show()


if __name__ == "__main__":
    main()
