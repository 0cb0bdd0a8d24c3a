"""
Serve subcommand: run a pipeline in a separate process behind a TCP port.
"""

import sys

from core.pipeline import load_pipeline_spec
from core.server import serve
from handlers.base import BaseHandler, HandlerContext, HandlerResult


class ServeHandler(BaseHandler):
    """Start the server and block until its client sends STOP (or the stream ends)."""

    command = "serve"

    def handle(self, ctx: HandlerContext) -> HandlerResult:
        spec = load_pipeline_spec(ctx.args.spec)
        server = serve(spec, port=ctx.args.port, host=ctx.args.host)
        # The chosen port must reach the caller before we block.
        print(f"listening on {server.host}:{server.port}", flush=True)
        try:
            exit_code = server.join()
        except KeyboardInterrupt:
            server.terminate()
            print("server stopped", file=sys.stderr)
            return HandlerResult(exit_code=1)
        return HandlerResult(exit_code=0 if exit_code == 0 else 1)
