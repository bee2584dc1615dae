#!/usr/bin/env python3
"""
Pairs CLI - command-line surface for the OPO photon-pair model, simulator and fitter

    opo-pairs eval     --model eq7 --from 0 --to 50 --step 0.01 --out curve.txt
    opo-pairs simulate --seed 1 --out histogram.txt
    opo-pairs fit      histogram.txt --out fit
    opo-pairs loss     --omega-c 11 --tau-f 2.07 --output-coupler 0.10
"""

import argparse
import logging
import os
import sys
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from src.core.constants import (
    EXIT_ERROR,
    EXIT_FIT,
    EXIT_INCONSISTENT,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_PARSE,
    EXIT_VALIDATION,
    TWO_PI,
)
from src.core.correlation_model import (
    CoincidenceModelParams,
    coincidence_model,
    gamma_bar_numeric,
    gamma_exact,
    loss_report,
    round_trip_time_from_length,
)
from src.core.errors import InvalidParamsError, OpoPairsError
from src.core.histogram_fitter import (
    FitProblem,
    FitResult,
    GoodnessOfFit,
    fit,
    fitted_curve,
    goodness_of_fit,
    initial_guess,
    standard_errors,
)
from src.core.pair_simulator import generate_sliced_events, simulate
from src.utils.histogram_io import (
    HistogramFile,
    config_header,
    read_events,
    write_curve,
    write_events,
    write_report,
)
from src.utils.logging_setup import setup_logging
from src.utils.run_config import RunConfig
from src.utils.run_ledger import RunLedger

console = Console()
logger = logging.getLogger(__name__)

EXIT_CODES_HELP = f"""exit codes:
  {EXIT_OK}  success
  {EXIT_ERROR}  unexpected error (I/O)
  {EXIT_PARSE}  config, histogram or event file could not be parsed
  {EXIT_VALIDATION}  invalid parameters or range
  {EXIT_FIT}  fit failed or did not converge
  {EXIT_INCONSISTENT}  inconsistent inputs (e.g. negative loss)
  {EXIT_NUMERIC}  numerical failure (quadrature, sampler tabulation)
"""

CommandResult = Tuple[int, Dict[str, Any]]


def boundary_units(params: CoincidenceModelParams) -> Dict[str, float]:
    """Model parameters in reporting units: ns, ps, MHz"""
    return {
        "tau_f_ns": params.tau_F * 1e9,
        "resolving_time_ps": params.t_r * 1e12,
        "omega_c_mhz": params.omega_c / TWO_PI / 1e6,
        "c1": params.c1,
        "c2": params.c2,
        "tau0_ns": params.tau0 * 1e9,
    }


UNIT_SCALES = {
    "tau_F": ("tau_f_ns", 1e9, "ns"),
    "t_r": ("resolving_time_ps", 1e12, "ps"),
    "omega_c": ("omega_c_mhz", 1.0 / TWO_PI / 1e6, "MHz"),
    "c1": ("c1", 1.0, "counts"),
    "c2": ("c2", 1.0, ""),
    "tau0": ("tau0_ns", 1e9, "ns"),
}


def _model_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model parameters (override the config file)")
    group.add_argument("--tau-f", dest="tau_f_ns", type=float, help="round-trip time tau_F (ns)")
    group.add_argument("--resolving-time", dest="resolving_time_ps", type=float, help="resolving time T_R (ps)")
    group.add_argument("--omega-c", dest="omega_c_mhz", type=float, help="cavity bandwidth omega_c / 2pi (MHz)")
    group.add_argument("--n-modes", dest="n_modes_half", type=int, help="modes either side of degeneracy, N")
    group.add_argument("--escape-efficiency", dest="escape_efficiency", type=float, help="F/F0")
    group.add_argument("--threshold-ratio", dest="threshold_ratio", type=float, help="2 epsilon / omega_c")
    group.add_argument("--tau0", dest="tau0_ns", type=float, help="electronic delay tau0 (ns)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="key = value run config file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--workers", type=int, help="worker threads (0 = one per physical core)")
    common.add_argument("--out", type=str, help="output path")
    common.add_argument("--log-file", type=str, help="append log output to this file")
    common.add_argument("--ledger", type=str, help="sqlite run ledger")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="opo-pairs",
        description="Multimode photon pairs from a degenerate OPO below threshold",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EXIT_CODES_HELP,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", parents=[common], help="sample a correlation model on a delay grid",
                            formatter_class=argparse.RawDescriptionHelpFormatter, epilog=EXIT_CODES_HELP)
    p_eval.add_argument("--model", choices=["eq5", "eq6", "eq7"], default="eq7",
                        help="eq5 exact correlation, eq6 jitter-averaged by quadrature, eq7 coincidence model")
    p_eval.add_argument("--from", dest="start_ns", type=float, help="first delay (ns)")
    p_eval.add_argument("--to", dest="stop_ns", type=float, help="last delay (ns)")
    p_eval.add_argument("--step", dest="step_ns", type=float, default=0.01, help="grid step (ns)")
    p_eval.add_argument("--rtol", type=float, default=1e-6, help="quadrature tolerance for eq6")
    p_eval.add_argument("--c1", dest="c1", type=float, help="peak amplitude C1 (counts)")
    p_eval.add_argument("--c2", dest="c2", type=float, help="accidental floor ratio C2")
    _model_options(p_eval)

    p_sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo coincidence histogram",
                           formatter_class=argparse.RawDescriptionHelpFormatter, epilog=EXIT_CODES_HELP)
    p_sim.add_argument("--pair-rate", dest="pair_rate", type=float, help="pairs/s at unit pump scale")
    p_sim.add_argument("--pump-scale", dest="pump_scale", type=float, help="pump power relative to the reference")
    p_sim.add_argument("--duration", dest="duration_s", type=float, help="acquisition time (s)")
    p_sim.add_argument("--efficiency", dest="efficiency", type=float, help="detector efficiency (both arms)")
    p_sim.add_argument("--bin-width", dest="bin_width_ps", type=float, help="MCA bin width (ps)")
    p_sim.add_argument("--slices", dest="n_slices", type=int, help="fixed number of time slices")
    p_sim.add_argument("--events-out", type=str, help="also write the raw event dump here")
    p_sim.add_argument("--replay", type=str, help="histogram a previously written event dump")
    _model_options(p_sim)

    p_fit = sub.add_parser("fit", parents=[common], help="fit the coincidence model to a histogram file",
                           formatter_class=argparse.RawDescriptionHelpFormatter, epilog=EXIT_CODES_HELP)
    p_fit.add_argument("histogram", type=str, help="histogram file written by 'simulate'")
    p_fit.add_argument("--weights", dest="weights", choices=["poisson", "uniform"])
    p_fit.add_argument("--freeze", dest="frozen", type=str,
                       help="comma-separated parameters to hold fixed (tau_F,t_r,omega_c,c1,c2,tau0)")
    p_fit.add_argument("--max-iter", dest="max_iter", type=int)
    p_fit.add_argument("--n-window", dest="n_window", type=int, help="comb peaks summed either side")
    p_fit.add_argument("--guess", choices=["auto", "config"], default="auto",
                       help="start from the histogram shape or from the config parameters")

    p_loss = sub.add_parser("loss", parents=[common], help="finesse and intracavity loss",
                            formatter_class=argparse.RawDescriptionHelpFormatter, epilog=EXIT_CODES_HELP)
    p_loss.add_argument("--omega-c", dest="omega_c_mhz", type=float, help="cavity bandwidth omega_c / 2pi (MHz)")
    p_loss.add_argument("--tau-f", dest="tau_f_ns", type=float, help="round-trip time tau_F (ns)")
    p_loss.add_argument("--output-coupler", dest="output_coupler", type=float, help="coupler transmittance")
    p_loss.add_argument("--round-trip-length-mm", type=float,
                        help="geometric round-trip length; sets tau_F when --tau-f is not given")
    p_loss.add_argument("--crystal-mm", dest="crystal_mm", type=float, help="crystal length inside the path")
    p_loss.add_argument("--crystal-index", dest="crystal_index", type=float, help="crystal refractive index")

    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def build_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {name: getattr(args, name) for name in RunConfig.field_types() if hasattr(args, name)}
    config = config.with_overrides(**overrides)
    config.validate()
    return config


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> CommandResult:
    start = config.window_start_ns if args.start_ns is None else args.start_ns
    stop = config.window_stop_ns if args.stop_ns is None else args.stop_ns
    step = args.step_ns
    if not step > 0 or not stop > start or step > stop - start:
        raise InvalidParamsError(f"bad range: from {start} to {stop} ns in steps of {step} ns", field="step",
                                 hint="use --from < --to and 0 < --step <= --to - --from")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    tau = (start + step * np.arange(n)) * 1e-9
    tau0 = config.tau0_ns * 1e-9

    if args.model == "eq7":
        values = coincidence_model(config.to_model_params(), tau, config.n_window)
        value_name = "counts"
    elif args.model == "eq5":
        values = gamma_exact(config.to_opo_params(), tau - tau0)
        value_name = "gamma_per_s2"
    else:
        opo, jitter = config.to_opo_params(), config.to_jitter()
        values = np.array([gamma_bar_numeric(opo, jitter, t - tau0, rtol=args.rtol) for t in tau])
        value_name = "gamma_bar_per_s2"

    header = config_header(config.dumps(), {"model": args.model, "tau_origin_ns": config.tau0_ns})
    if args.out:
        write_curve(args.out, tau, values, header=header, value_name=value_name)
    else:
        for t, v in zip((tau * 1e9).tolist(), np.asarray(values).tolist()):
            sys.stdout.write(f"{t!r}\t{v!r}\n")
    logger.info("evaluated %s on %d delays", args.model, n)
    return EXIT_OK, {"model": args.model, "n_samples": n, "max_value": float(np.max(values))}


def cmd_simulate(args: argparse.Namespace, config: RunConfig) -> CommandResult:
    emission = config.to_emission()
    detector = config.to_detector()
    detectors = (detector, detector)
    tac = config.to_tac()
    workers = config.resolved_workers()

    if not emission.opo.is_far_below_threshold():
        logger.warning("2 epsilon / omega_c = %.3g is not far below threshold", emission.opo.threshold_ratio)
    if not config.to_model_params().is_resolvable:
        logger.warning("T_R >= tau_F: comb peaks will not be resolved")

    events = None
    if args.replay:
        events = read_events(args.replay)
        logger.info("replaying %d events from %s", len(events), args.replay)
    elif args.events_out:
        events = generate_sliced_events(emission, detectors, n_slices=config.n_slices, workers=workers)

    histogram = simulate(emission, detectors, tac, workers=workers, n_slices=config.n_slices, events=events)

    fields = RunConfig.field_types()
    extra = {k: v for k, v in histogram.meta.items() if k not in fields}
    header = config_header(config.dumps(), extra)
    if args.events_out and events is not None:
        write_events(args.events_out, events, config_header(config.dumps()))
    out = args.out or "histogram.txt"
    HistogramFile(histogram, header).write(out)

    console.print(f"[green]{histogram.total} coincidences in {len(histogram.counts)} bins -> {out}[/green]")
    return EXIT_OK, {
        "out": out,
        "total_counts": histogram.total,
        "n_starts": histogram.meta.get("n_starts"),
        "n_start_events": histogram.meta.get("n_start_events"),
        "n_stop_events": histogram.meta.get("n_stop_events"),
    }


def fit_report(result: FitResult, gof: GoodnessOfFit) -> Dict[str, Any]:
    """Flat report in reporting units"""
    report: Dict[str, Any] = {}
    errors = standard_errors(result)
    for name, value in zip(CoincidenceModelParams.NAMES, result.params.as_array()):
        key, scale, _ = UNIT_SCALES[name]
        report[key] = float(value * scale)
        report[f"{key}_err"] = float(errors[name] * scale)
    report.update({
        "reduced_chi2": float(result.reduced_chi2),
        "dof": result.dof,
        "n_iterations": result.n_iterations,
        "converged": result.converged,
        "stalled": result.stalled,
        "runs_z": gof.runs_z,
        "runs_p_value": gof.runs_p_value,
        "max_abs_residual": gof.max_abs_residual,
        "max_residual_bin": gof.max_residual_bin,
        "max_residual_tau_ns": gof.max_residual_center * 1e9,
    })
    return report


def _print_fit_table(result: FitResult, report: Dict[str, Any]) -> None:
    table = Table(title="Coincidence model fit")
    table.add_column("Parameter")
    table.add_column("Value", justify="right")
    table.add_column("1 sigma", justify="right")
    table.add_column("Unit")
    for name, is_free in zip(CoincidenceModelParams.NAMES, result.free):
        key, _, unit = UNIT_SCALES[name]
        error = f"{report[key + '_err']:.4g}" if is_free else "frozen"
        table.add_row(key, f"{report[key]:.6g}", error, unit)
    console.print(table)
    console.print(f"reduced chi2 = {report['reduced_chi2']:.4f} ({report['dof']} dof), "
                  f"runs-test p = {report['runs_p_value']:.3g}, iterations = {report['n_iterations']}")


def cmd_fit(args: argparse.Namespace, config: RunConfig) -> CommandResult:
    source = HistogramFile.read(args.histogram)
    problem = FitProblem(
        histogram=source.histogram,
        weights=config.weights,
        frozen=config.frozen_names(),
        n_window=config.n_window,
        max_iter=config.max_iter,
    )
    guess = config.to_model_params() if args.guess == "config" else initial_guess(source.histogram)
    result = fit(problem, guess)
    gof = goodness_of_fit(result)
    report = fit_report(result, gof)

    out = args.out or os.path.splitext(args.histogram)[0] + "_fit"
    write_report(out + ".report", report)
    curve_header = {"source": args.histogram, **{k: repr(v) for k, v in boundary_units(result.params).items()}}
    write_curve(out + ".curve", result.centers, fitted_curve(result, result.centers),
                header=curve_header, value_name="fitted_counts")
    _print_fit_table(result, report)

    if not result.converged:
        reason = "stalled" if result.stalled else "did not converge"
        console.print(f"[red]fit {reason} after {result.n_iterations} iterations; "
                      f"best-so-far written to {out}.report[/red]")
        return EXIT_FIT, report
    return EXIT_OK, report


def cmd_loss(args: argparse.Namespace, config: RunConfig) -> CommandResult:
    omega_c = TWO_PI * config.omega_c_mhz * 1e6
    report: Dict[str, Any] = {}
    if args.round_trip_length_mm is not None and args.tau_f_ns is None:
        segments = [(config.crystal_mm * 1e-3, config.crystal_index)] if config.crystal_mm > 0 else []
        tau_F = round_trip_time_from_length(args.round_trip_length_mm * 1e-3, segments)
        report["round_trip_time_ns"] = tau_F * 1e9
    else:
        tau_F = config.tau_f_ns * 1e-9

    loss = loss_report(omega_c, tau_F, config.output_coupler)
    report.update({
        "finesse": loss.finesse,
        "total_loss": loss.total_loss,
        "output_coupler": loss.output_coupler,
        "other_loss": loss.other_loss,
    })

    table = Table(title="Cavity loss")
    table.add_column("Quantity")
    table.add_column("Value", justify="right")
    if "round_trip_time_ns" in report:
        table.add_row("round-trip time", f"{report['round_trip_time_ns']:.4f} ns")
    table.add_row("finesse", f"{loss.finesse:.1f}")
    table.add_row("total round-trip loss", f"{100 * loss.total_loss:.2f} %")
    table.add_row("output coupler", f"{100 * loss.output_coupler:.2f} %")
    table.add_row("other losses", f"{100 * loss.other_loss:.2f} %")
    console.print(table)
    console.print(f"other losses ≈ {100 * loss.other_loss:.0f}%")

    if args.out:
        write_report(args.out, report)
    return EXIT_OK, report


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], CommandResult]] = {
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "loss": cmd_loss,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    args = parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO, args.log_file)
    ledger = RunLedger(args.ledger) if args.ledger else None
    run_id = None
    code = EXIT_ERROR
    try:
        config = build_config(args)
        if ledger:
            run_id = ledger.start_run(args.command, config.seed, config.dumps())
        code, results = COMMANDS[args.command](args, config)
        if ledger and results:
            ledger.log_results(run_id, results)
    except OpoPairsError as e:
        console.print(f"[red]Error: {escape(str(e))}[/red]")
        if e.hint:
            console.print(f"[yellow]Hint: {escape(e.hint)}[/yellow]")
        code = e.exit_code
    except OSError as e:
        console.print(f"[red]Error: {escape(str(e))}[/red]")
        code = EXIT_ERROR
    except KeyboardInterrupt:
        console.print("\n[bold red]Interrupted[/bold red]")
        code = EXIT_ERROR
    finally:
        if ledger and run_id:
            ledger.end_run(run_id, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
