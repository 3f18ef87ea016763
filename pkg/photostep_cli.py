#!/usr/bin/env python3

"""
photostep (CLI) - Photobleach step counting with compound reversible-jump MCMC

Command-line interface for simulating fluorophore traces, estimating pooled
intensity hyperparameters, analysing traces with parallel chains and scoring
the results against ground truth, using the photostep_core library.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Any, Optional

try:
    import photostep_core
    from photostep_core import exceptions as core_exc
except ImportError as e:
    print(f"Error: Failed to import the photostep_core library: {e}", file=sys.stderr)
    print("Ensure photostep_core is installed or available in your Python path.", file=sys.stderr)
    sys.exit(1)

# --- Global Variables ---
ENV_PREFIX = "PHOTOSTEP_"

log = logging.getLogger("photostep_cli")

# --- ANSI Color Codes for Terminal Output ---
IS_TTY = sys.stdout.isatty()


class AnsiColors:
    GREEN = "\033[92m" if IS_TTY else ""
    RED = "\033[91m" if IS_TTY else ""
    YELLOW = "\033[93m" if IS_TTY else ""
    RESET = "\033[0m" if IS_TTY else ""


# --- CLI Logging Setup ---
def setup_cli_logging(verbose: bool):
    """Configures logging for the CLI based on verbosity."""
    cli_log_level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(name)s: %(message)s")

    log.setLevel(cli_log_level)
    if log.hasHandlers():
        log.handlers.clear()

    core_log_level = logging.DEBUG if verbose else logging.WARNING
    core_logger = logging.getLogger("photostep_core")
    core_logger.setLevel(core_log_level)
    if not core_logger.hasHandlers():
        core_handler = logging.StreamHandler(sys.stderr)
        core_formatter = logging.Formatter("%(levelname)s: %(name)s: %(message)s")
        core_handler.setFormatter(core_formatter)
        core_logger.addHandler(core_handler)
        core_logger.propagate = False

    if cli_log_level <= logging.INFO:
        info_handler = logging.StreamHandler(sys.stdout)
        info_handler.setFormatter(logging.Formatter("%(message)s"))
        info_handler.setLevel(logging.INFO)
        info_handler.addFilter(lambda record: record.levelno == logging.INFO)
        log.addHandler(info_handler)

    error_handler = logging.StreamHandler(sys.stderr)
    error_handler.setFormatter(logging.Formatter("%(levelname)s: %(name)s: %(message)s"))
    error_handler.setLevel(logging.DEBUG if verbose else logging.WARNING)
    log.addHandler(error_handler)

    log.propagate = False
    if verbose:
        log.debug("Verbose logging enabled for photostep_cli.")
        core_logger.debug("Verbose logging enabled for photostep_core (via CLI).")


# --- Environment Defaults ---
def env_default(name: str, cast=str) -> Optional[Any]:
    """Value of PHOTOSTEP_<name>, converted with `cast`, or None when unset."""
    raw = os.environ.get(f"{ENV_PREFIX}{name}")
    if raw is None or raw.strip() == "":
        return None
    try:
        return cast(raw)
    except ValueError:
        raise SystemExit(f"Error: {ENV_PREFIX}{name}='{raw}' is not a valid {cast.__name__}.")


# --- Output Formatting ---
def describe(result: dict[str, Any]):
    """Prints what a command produced."""
    for key in ("n_traces", "n_converged", "output", "manifest"):
        if key in result:
            log.info(f"  {key.replace('_', ' ').capitalize() + ':':<14} {result[key]}")
    if "groups" in result:
        groups = result["groups"]
        names = groups if isinstance(groups, list) else [f"{g} ({n})" for g, n in groups.items()]
        log.info(f"  {'Groups:':<14} {', '.join(names)}")
    for entry in result.get("traces", []):
        mark = f"{AnsiColors.GREEN}[OK]{AnsiColors.RESET}" if entry["converged"] else f"{AnsiColors.YELLOW}[NOT CONVERGED]{AnsiColors.RESET}"
        log.info(f"  {entry['trace_id']}: k={entry['modal_k']} after {entry['n_iterations']} iterations {mark}")
    if "mean" in result:
        for name, mean in result["mean"].items():
            if mean is None:
                continue
            ci = result["ci95"].get(name)
            ci_str = f" (± {ci:.3g})" if ci is not None else ""
            log.info(f"  {name:<22} {mean:.4g}{ci_str}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="photostep (CLI): Count photobleaching steps in fluorescence traces.",
        formatter_class=argparse.RawTextHelpFormatter,
        epilog="""
Examples:
  photostep simulate --out sim --grid grid.json      # Simulate a trace pool with ground truth
  photostep hyperparams "sim/*.csv" --out hyper.json # Estimate and pool hyperparameters per group
  photostep analyze "sim/*.csv" --hyper hyper.json --out results --workers 8
  photostep metrics results sim --out metrics.csv    # Score summaries against ground truth

Environment:
  PHOTOSTEP_SEED, PHOTOSTEP_WORKERS, PHOTOSTEP_OUT, PHOTOSTEP_CONFIG,
  PHOTOSTEP_MAX_ITER and PHOTOSTEP_PSRF_THRESHOLD set flag defaults;
  PHOTOSTEP_<SECTION>_<KEY> overrides any config.ini value.
""",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable detailed logging output.")
    parser.add_argument("--config", default=env_default("CONFIG"), help="Path to a config.ini file.")
    parser.add_argument("--seed", type=int, default=env_default("SEED", int), help="Base random seed.")
    parser.add_argument(
        "--workers", type=int, default=env_default("WORKERS", int), help="Worker processes (default: CPU count)."
    )
    parser.add_argument("--out", default=env_default("OUT"), help="Output directory or file.")
    subparsers = parser.add_subparsers(dest="command", title="Commands", required=True)

    p_sim = subparsers.add_parser("simulate", help="Simulate traces and ground truth over a parameter grid.")
    p_sim.add_argument("--grid", help="JSON simulation grid (default: the built-in intensity/SNR grid).")

    p_hyp = subparsers.add_parser("hyperparams", help="Estimate and pool intensity hyperparameters per group.")
    p_hyp.add_argument("traces", help="Trace CSV path or glob.")
    p_hyp.add_argument("--tag", help="Pool every trace into one group with this name.")

    p_an = subparsers.add_parser("analyze", help="Run the sampler on traces and write posterior summaries.")
    p_an.add_argument("traces", help="Trace CSV path or glob.")
    p_an.add_argument("--hyper", help="Pooled hyperparameters JSON (default: estimate per trace).")
    p_an.add_argument(
        "--max-iter", type=int, default=env_default("MAX_ITER", int), help="Iteration cap per chain."
    )
    p_an.add_argument(
        "--psrf-threshold",
        type=float,
        default=env_default("PSRF_THRESHOLD", float),
        help="PSRF below which chains count as converged.",
    )
    p_an.add_argument("--samples", action="store_true", help="Also write every chain iteration to CSV.")

    p_met = subparsers.add_parser("metrics", help="Score posterior summaries against ground truth.")
    p_met.add_argument("estimates", help="Directory with *.summary.json (or *.truth.json) files.")
    p_met.add_argument("truth", help="Directory with *.truth.json files.")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Parses command-line arguments and dispatches to the photostep_core API."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_cli_logging(args.verbose)
    exit_code = 0
    arguments = {k: v for k, v in vars(args).items() if k != "verbose"}

    try:
        log.debug(f"Running command: {args.command}")

        if args.command == "simulate":
            out = args.out or "simulated"
            log.info(f"Simulating traces into '{out}'...")
            result = photostep_core.simulate_pool(
                out, grid_path=args.grid, seed=args.seed or 0, arguments=arguments
            )
            describe(result)

        elif args.command == "hyperparams":
            out = args.out or "hyperparams.json"
            settings = photostep_core.load_settings(args.config, seed=args.seed)
            log.info(f"Estimating hyperparameters for '{args.traces}'...")
            result = photostep_core.estimate_hyperparams(
                args.traces, out, settings, tag=args.tag, arguments=arguments
            )
            describe(result)

        elif args.command == "analyze":
            out = args.out or "results"
            settings = photostep_core.load_settings(
                args.config, seed=args.seed, max_iter=args.max_iter, psrf_threshold=args.psrf_threshold
            )
            log.info(f"Analysing '{args.traces}' into '{out}'...")
            result = photostep_core.analyze_traces(
                args.traces,
                out,
                settings,
                hyper_path=args.hyper,
                workers=args.workers,
                write_samples=args.samples,
                arguments=arguments,
            )
            describe(result)
            if result["n_converged"] < result["n_traces"]:
                log.info(f"{AnsiColors.YELLOW}Some traces did not converge; see their summaries.{AnsiColors.RESET}")

        elif args.command == "metrics":
            out = args.out or "metrics.csv"
            log.info(f"Scoring '{args.estimates}' against '{args.truth}'...")
            result = photostep_core.compute_metrics(args.estimates, args.truth, out, arguments=arguments)
            describe(result)

        else:
            log.error(f"Unknown command: {args.command}")
            parser.print_help(sys.stderr)
            exit_code = 1

    except core_exc.PhotostepError as e:
        log.error(f"{AnsiColors.RED}photostep Error: {e}{AnsiColors.RESET}", exc_info=args.verbose)
        exit_code = 1
    except Exception as e_main:
        log.error(f"{AnsiColors.RED}An unexpected error occurred in CLI: {e_main}{AnsiColors.RESET}", exc_info=True)
        exit_code = 1

    return exit_code


if __name__ == "__main__":
    sys.exit(main())
