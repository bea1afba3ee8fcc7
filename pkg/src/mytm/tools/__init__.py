"""Tool classes exposed by the ``mytm-mcp`` server."""

from .dataset import DatasetApi
from .evaluation import EvaluationApi
from .reage import ReageApi
from .video import VideoApi

__all__ = [
    "DatasetApi",
    "EvaluationApi",
    "ReageApi",
    "VideoApi",
]
