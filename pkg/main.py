# main.py
import argparse
import platform
import sys
import traceback

from PyQt5.QtCore import QCoreApplication

from commands import COMMANDS
from run_config import ConfigError


EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting so main() owns exit codes"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = CliParser(prog="voxrep", description="Self-supervised 3D representations for visual RL")
    parser.add_argument("--debug", action="store_true", help="print tracebacks on failure")
    subparsers = parser.add_subparsers(dest="command", parser_class=CliParser)
    subparsers.required = True
    for command_class in COMMANDS:
        command = command_class()
        sub = subparsers.add_parser(command.name, help=command.help, description=command.__doc__)
        command.setup_parser(sub)
        sub.set_defaults(handler=command)
    return parser


def _run(command, args):
    try:
        return command.run(args)
    except ConfigError as e:
        print(f"ERROR [cli] config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"ERROR [cli] {type(e).__name__}: {e}", file=sys.stderr)
        if getattr(args, "debug", False):
            traceback.print_exc()
        return EXIT_RUNTIME


def main(argv=None):
    """
    Parse argv and run one subcommand

    Returns:
        0 on success, 1 on runtime failure, 2 on usage or config errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"ERROR [cli] {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_OK

    # Signals and thread pools need a core application; no GUI is created
    app = QCoreApplication.instance() or QCoreApplication(sys.argv[:1])
    if args.debug:
        print(f"DEBUG [cli] Running on: {platform.system()} {platform.release()}")
    return _run(args.handler, args)


if __name__ == "__main__":
    sys.exit(main())
