"""
kiln command-line interface.

Run with: python app.py <subcommand> [options]

Subcommands:
    download <name> [--dir D]                 raw files of a registered dataset
    convert <name> --raw D --out F            raw files -> container
    info <file>                               container metadata
    validate <file>                           integrity report (exit 1 on failure)
    serve --spec pipeline.json [--port P]     serve a pipeline over TCP
    train --spec train.json [--resume S]      run (or resume) the demo experiment
    inspect-snapshot <file>                   status counters and channels

Exit codes: 0 success, 1 domain failure, 2 usage error.
"""

import logging
import sys
from typing import List, Optional, Sequence

from absl import app as absl_app
from absl.flags import argparse_flags

from config.settings import TOOL_NAME, __version__, get_settings
from core.errors import KilnError
from core.structured_logging import get_logger, setup_logging
from handlers import HANDLERS
from handlers.base import EXIT_FAILURE, EXIT_USAGE, HandlerContext

logger = get_logger("app")


def build_parser(inherit_absl_flags: bool = False) -> argparse_flags.ArgumentParser:
    """Argument parser for all subcommands."""
    options = {} if inherit_absl_flags else {"inherited_absl_flags": None}
    parser = argparse_flags.ArgumentParser(
        prog=TOOL_NAME,
        description="Dataset containers, data pipelines and checkpointed training.",
        **options,
    )
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {__version__}")
    parser.add_argument("--debug", action="store_true", help="print handler debug lines to stderr")
    commands = parser.add_subparsers(dest="command", metavar="<command>")
    commands.required = True

    download = commands.add_parser("download", help="download or generate raw dataset files")
    download.add_argument("name")
    download.add_argument("--dir", default=None, help="destination directory (default: BF_DATA_DIR)")

    convert = commands.add_parser("convert", help="convert raw files into a container")
    convert.add_argument("name")
    convert.add_argument("--raw", default=None, help="download directory (default: BF_DATA_DIR)")
    convert.add_argument("--out", required=True)

    info = commands.add_parser("info", help="print container metadata")
    info.add_argument("file")

    validate = commands.add_parser("validate", help="check container integrity")
    validate.add_argument("file")

    serve = commands.add_parser("serve", help="serve a pipeline over TCP until the client stops")
    serve.add_argument("--spec", required=True)
    serve.add_argument("--port", type=int, default=0)
    serve.add_argument("--host", default="127.0.0.1")

    train = commands.add_parser("train", help="train the demo model")
    train.add_argument("--spec", required=True)
    train.add_argument("--resume", default=None, help="snapshot to resume from")

    inspect = commands.add_parser("inspect-snapshot", help="summarize a snapshot")
    inspect.add_argument("file")
    return parser


def _dispatch(args, argv: Sequence[str]) -> int:
    settings = get_settings()
    setup_logging(
        log_dir=str(settings.log_dir),
        console_level=getattr(logging, settings.log_level, logging.INFO),
        enable_console=True,
        enable_file=True,
        enable_error_log=True,
        force=True,
    )
    ctx = HandlerContext(args=args, settings=settings, argv=list(argv), debug_mode=args.debug)
    handler = HANDLERS[args.command]
    try:
        result = handler.handle(ctx)
    except KilnError as e:
        print(f"{TOOL_NAME} {args.command}: error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"{TOOL_NAME} {args.command}: error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        for line in ctx.debug_lines:
            print(line, file=sys.stderr)

    if result.output:
        print(result.output)
    return result.exit_code


def run_cli(argv: Optional[List[str]] = None) -> int:
    """
    Parse argv (argv[0] is the program name) and run the subcommand.

    Returns:
        Process exit code
    """
    argv = list(sys.argv if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv[1:])
    except SystemExit as e:
        code = e.code if isinstance(e.code, int) else EXIT_USAGE
        return code
    return _dispatch(args, [TOOL_NAME, *argv[1:]])


def _parse_flags(argv: List[str]):
    return build_parser(inherit_absl_flags=True).parse_args(argv[1:])


def _main(args) -> int:
    return _dispatch(args, [TOOL_NAME, *sys.argv[1:]])


def main() -> None:
    absl_app.run(_main, flags_parser=_parse_flags)


if __name__ == "__main__":
    main()
