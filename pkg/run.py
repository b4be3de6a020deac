import argparse
import logging
import sys
from typing import List, Optional

from colorama import Fore, Style, init
from tabulate import tabulate

from config import ARTIFACT_VERSION, EXIT_IO, EXIT_OK, LOG_LEVEL
from errors import LabError
from experiments import PLOT_KINDS, emit_plot_data, run_experiment

logger = logging.getLogger(__name__)


def report_error(code: str, message: str):
    """One machine-parsable line on stderr."""
    flat = " ".join(str(message).split())
    print(f"error={code} message={flat}", file=sys.stderr)


def _summary_rows(summary: dict) -> List[List[str]]:
    rows = []
    for key, value in sorted(summary.items()):
        if isinstance(value, float):
            value = f"{value:.6g}"
        elif isinstance(value, bool):
            value = (Fore.GREEN if value else Fore.RED) + str(value) + Style.RESET_ALL
        rows.append([key, value])
    return rows


def cmd_run(args: argparse.Namespace) -> int:
    manifest, result = run_experiment(args.config)
    print(f"{Fore.GREEN}{manifest.config['experiment']} finished{Style.RESET_ALL} -> {manifest.config['output_dir']}")
    print(tabulate(_summary_rows(result.summary), headers=["summary", "value"], tablefmt="github"))
    print(tabulate(sorted(manifest.checksums.items()), headers=["file", "sha256"], tablefmt="github"))
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    target = emit_plot_data(args.results, args.kind)
    print(f"{Fore.GREEN}Plot data written{Style.RESET_ALL} -> {target}")
    return EXIT_OK


def cmd_version(args: argparse.Namespace) -> int:
    print(ARTIFACT_VERSION)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="run.py",
        description="Random deep network laboratory: angle dynamics, correlation decay and learnability experiments.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="Run the experiment described by a JSON config")
    run_parser.add_argument("config", help="Path to the experiment config (JSON)")
    run_parser.set_defaults(handler=cmd_run)

    plot_parser = commands.add_parser("plot", help="Derive plot-ready CSV data from a results CSV")
    plot_parser.add_argument("results", help="Results CSV of a completed run")
    plot_parser.add_argument("--kind", required=True, choices=PLOT_KINDS)
    plot_parser.set_defaults(handler=cmd_plot)

    version_parser = commands.add_parser("version", help="Print the artifact version")
    version_parser.set_defaults(handler=cmd_version)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    init()
    logging.basicConfig(level=getattr(logging, LOG_LEVEL), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except LabError as e:
        logger.debug("Run failed", exc_info=True)
        report_error(e.code, e)
        return e.exit_status
    except OSError as e:
        report_error("E_IO", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
