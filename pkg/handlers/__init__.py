"""
Subcommand handlers for the kiln CLI.

Each handler runs one subcommand and returns the text to print.
"""

from handlers.base import BaseHandler, HandlerContext, HandlerResult
from handlers.datasets import ConvertHandler, DownloadHandler, InfoHandler, ValidateHandler
from handlers.serving import ServeHandler
from handlers.training import InspectSnapshotHandler, TrainHandler

HANDLERS = {
    handler.command: handler
    for handler in (
        DownloadHandler(),
        ConvertHandler(),
        InfoHandler(),
        ValidateHandler(),
        ServeHandler(),
        TrainHandler(),
        InspectSnapshotHandler(),
    )
}

__all__ = [
    # Base classes
    'BaseHandler',
    'HandlerContext',
    'HandlerResult',
    # Handlers
    'DownloadHandler',
    'ConvertHandler',
    'InfoHandler',
    'ValidateHandler',
    'ServeHandler',
    'TrainHandler',
    'InspectSnapshotHandler',
    'HANDLERS',
]
