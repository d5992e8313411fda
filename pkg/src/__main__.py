from __future__ import annotations
import argparse
import logging
import os
import sys
from src.harness import *

LOGGER = logging.getLogger(__name__)

EXIT_OK: int = 0
EXIT_FAILED: int = 1
EXIT_INVALID: int = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='python -m src', description='Poly-fractional operator laboratory')
    parser.add_argument('-v', '--verbose', action='store_true', help='log at DEBUG level')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='run one scenario')
    run.add_argument('scenario', help='scenario YAML file')
    run.add_argument('--out', default=None, help='run directory (default: <output root>/<scenario name>)')
    run.add_argument('--seed', type=int, default=None, help='override the scenario seed')
    run.add_argument('--timings', action='store_true', help='persist wall-clock timings in run_record.json')

    validate = commands.add_parser('validate', help='parse and validate a scenario without running it')
    validate.add_argument('scenario', help='scenario YAML file')

    plot = commands.add_parser('plot-data', help='write plot CSV series of a finished run')
    plot.add_argument('run_dir', help='directory holding run_record.json')

    suite = commands.add_parser('suite', help='run every scenario of a directory')
    suite.add_argument('directory', help='directory of scenario YAML files')
    suite.add_argument('--out', default=None, help='output root (default: $POLYFRAC_OUTPUT_ROOT or runs/)')
    suite.add_argument('--timings', action='store_true', help='persist wall-clock timings in run records')

    for command in (run, validate, suite):
        command.add_argument('--tol-override', action='append', default=[], metavar='KEY=VALUE',
                             help='dotted scenario override, e.g. solver.tol=1e-12 (repeatable)')
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        if args.command == 'plot-data':
            for path in emit_plot_data(args.run_dir):
                print(path)
            return EXIT_OK
        if args.command == 'suite':
            summary = run_suite(args.directory, args.out or default_output_root(), args.tol_override, args.timings)
            for name, result in summary.items():
                print(f"{name}: {'pass' if result['passed'] else 'FAIL'}")
            return EXIT_OK if summary and all(r['passed'] for r in summary.values()) else EXIT_FAILED
        scenario = parse_scenario(args.scenario, args.tol_override)
        if args.command == 'validate':
            print(f'{scenario.name}: valid ({scenario.task.value.lower()})')
            return EXIT_OK
        out_dir = args.out or os.path.join(default_output_root(), scenario.name)
        record = run_scenario(scenario, out_dir, args.seed, args.timings)
        print(f"{scenario.name}: {'pass' if record.passed else 'FAIL'} ({out_dir})")
        if record.error is not None:
            print(record.error, file=sys.stderr)
        return EXIT_OK if record.passed else EXIT_FAILED
    except (ScenarioError, ScenarioValidationError, ExpressionError) as error:
        print(f'invalid scenario: {error}', file=sys.stderr)
        return EXIT_INVALID
    except (MissingOutputError, FileNotFoundError) as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_FAILED


if __name__ == '__main__':
    sys.exit(main())
