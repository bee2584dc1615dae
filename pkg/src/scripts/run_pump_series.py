#!/usr/bin/env python3
"""
Run the two-pump-level experiment: simulate and fit at 13 uW and 6.5 uW,
then compare the C1 and C2 ratios with the measured ones
"""

import argparse
import os
import subprocess
import sys

from rich.console import Console
from rich.table import Table

from src.core.constants import REFERENCE_FITS
from src.utils.histogram_io import read_report

console = Console()

# pump scale relative to 13 uW for each level
PUMP_LEVELS = {"13uW": 1.0, "6.5uW": 0.5}
MEASURED_RATIOS = {"c1": 2.3, "c2": 2.7}


def run_step(cmd, name):
    """Run one CLI step, echoing its stderr on failure"""
    console.print(f"[bold cyan]{name}[/bold cyan]: {' '.join(cmd[3:])}")
    process = subprocess.run(cmd, capture_output=True, text=True)
    if process.returncode != 0:
        console.print(f"[red]{name} failed with exit code {process.returncode}[/red]")
        console.print(process.stderr)
    return process.returncode


def cli(*args):
    return [sys.executable, "-m", "src.ui.pairs_cli", *args]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--outdir", default="runs/pump_series")
    parser.add_argument("--config", help="base run config")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--workers", type=int, default=0)
    args = parser.parse_args(argv)

    os.makedirs(args.outdir, exist_ok=True)
    common = ["--workers", str(args.workers)]
    if args.config:
        common += ["--config", args.config]

    reports = {}
    for i, (level, scale) in enumerate(PUMP_LEVELS.items()):
        histogram = os.path.join(args.outdir, f"histogram_{level}.txt")
        fit_out = os.path.join(args.outdir, f"fit_{level}")
        resolving_time = REFERENCE_FITS[level]["resolving_time_ps"]
        simulate_cmd = cli("simulate", *common, "--seed", str(args.seed + i), "--pump-scale", str(scale),
                           "--resolving-time", str(resolving_time), "--out", histogram)
        if run_step(simulate_cmd, f"simulate {level}") != 0:
            return 1
        fit_cmd = cli("fit", histogram, *common, "--out", fit_out)
        if run_step(fit_cmd, f"fit {level}") != 0:
            return 1
        reports[level] = read_report(fit_out + ".report")

    high, low = (reports[level] for level in PUMP_LEVELS)
    table = Table(title="Pump-level comparison (13 uW / 6.5 uW)")
    table.add_column("Quantity")
    table.add_column("13 uW", justify="right")
    table.add_column("6.5 uW", justify="right")
    table.add_column("Ratio", justify="right")
    table.add_column("Measured", justify="right")
    for key in ("c1", "c2"):
        ratio = float(high[key]) / float(low[key])
        table.add_row(key.upper(), f"{float(high[key]):.4g}", f"{float(low[key]):.4g}",
                      f"{ratio:.2f}", f"{MEASURED_RATIOS[key]:.1f}")
    for key in ("tau_f_ns", "resolving_time_ps", "omega_c_mhz"):
        table.add_row(key, f"{float(high[key]):.4g}", f"{float(low[key]):.4g}", "", "")
    console.print(table)
    console.print("ideal ratio for pair rate proportional to pump power: 2")
    return 0


if __name__ == "__main__":
    sys.exit(main())
