"""
Dataset subcommands: download, convert, info, validate.
"""

import shlex
from pathlib import Path

from core.container import info, validate
from core.downloads import convert, download
from core.structured_logging import get_logger
from handlers.base import EXIT_FAILURE, BaseHandler, HandlerContext, HandlerResult

logger = get_logger(__name__)


class DownloadHandler(BaseHandler):
    """Fetch (or generate) the raw files of a registered dataset."""

    command = "download"

    def handle(self, ctx: HandlerContext) -> HandlerResult:
        dest = Path(ctx.args.dir) if ctx.args.dir else ctx.settings.data_dir
        paths = download(ctx.args.name, dest)
        ctx.add_debug(f"download: {len(paths)} files in {dest}")
        return HandlerResult(output="\n".join(str(p) for p in paths))


class ConvertHandler(BaseHandler):
    """Convert raw files into a container; the invocation goes into its provenance."""

    command = "convert"

    def handle(self, ctx: HandlerContext) -> HandlerResult:
        raw = Path(ctx.args.raw) if ctx.args.raw else ctx.settings.data_dir
        command_line = shlex.join(ctx.argv) if ctx.argv else None
        written = convert(ctx.args.name, raw, ctx.args.out, command_line=command_line)
        return HandlerResult(output=f"wrote {written.path}")


class InfoHandler(BaseHandler):
    command = "info"

    def handle(self, ctx: HandlerContext) -> HandlerResult:
        return HandlerResult(output=info(ctx.args.file).rstrip("\n"))


class ValidateHandler(BaseHandler):
    """Check magic, header invariants and every digest; exit 1 if anything fails."""

    command = "validate"

    def handle(self, ctx: HandlerContext) -> HandlerResult:
        report = validate(ctx.args.file)
        if not report.passed:
            logger.warning(
                f"Validation failed for {ctx.args.file}",
                extra={"event": "validation_failed", "path": str(ctx.args.file)},
            )
        return HandlerResult(
            output=report.format().rstrip("\n"),
            exit_code=0 if report.passed else EXIT_FAILURE,
        )
