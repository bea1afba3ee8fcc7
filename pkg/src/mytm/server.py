"""FastMCP server exposing the re-aging toolkit as tools."""
from __future__ import annotations

import functools
import inspect
import logging
import os
from contextlib import asynccontextmanager
from typing import Any, Callable, Optional, Tuple

import anyio
import fastmcp
import mcp.types as mcp_types
from fastmcp import FastMCP
from starlette.requests import Request
from starlette.responses import JSONResponse

from . import __version__ as package_version
from .session import ToolSession, build_session
from .tools import DatasetApi, EvaluationApi, ReageApi, VideoApi

__all__ = [
    "mcp",
    "get_session",
    "main",
]

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

_session: Optional[ToolSession] = None


def get_session() -> ToolSession:
    if _session is None:
        raise RuntimeError("ToolSession not initialised. Tools must be called through the running MCP server.")
    return _session


@asynccontextmanager
async def lifespan(server: FastMCP):
    global _session

    _session = await anyio.to_thread.run_sync(build_session)
    logger.info(
        "Starting mytm MCP server backend=%s seed=%s config_hash=%s",
        _session.config.backend,
        _session.config.seed,
        _session.config_hash,
    )
    try:
        yield
    finally:
        _session = None
        logger.info("mytm MCP server shut down cleanly")


mcp = FastMCP(
    name="mytm-mcp",
    version=package_version,
    lifespan=lifespan,
)

_dataset_api = DatasetApi()
_reage_api = ReageApi()
_evaluation_api = EvaluationApi()
_video_api = VideoApi()


def _make_tool_wrapper(method: Callable[..., Any]) -> Callable[..., Any]:
    @functools.wraps(method)
    async def wrapper(*args: Any, **kwargs: Any) -> Any:
        return await method(get_session(), *args, **kwargs)

    signature = inspect.signature(method)
    params = list(signature.parameters.values())[1:]
    wrapper.__signature__ = signature.replace(parameters=params)  # type: ignore[attr-defined]
    return wrapper


def register_all_api_methods() -> None:
    api_instances: Tuple[Any, ...] = (_dataset_api, _reage_api, _evaluation_api, _video_api)
    registered_tools: set[str] = set()

    for api in api_instances:
        for name in dir(api):
            if name.startswith("_"):
                continue
            method = getattr(api, name)
            if not inspect.iscoroutinefunction(method):
                continue
            if name in registered_tools:
                logger.debug("Tool already registered: %s", name)
                continue
            mcp.tool(name=name)(_make_tool_wrapper(method))
            registered_tools.add(name)
            logger.debug("Registered tool: %s", name)


register_all_api_methods()


@mcp.custom_route("/.well-known/mcp.json", methods=["GET"], include_in_schema=False)
async def discovery_endpoint(request: Request) -> JSONResponse:
    base_url = str(request.base_url).rstrip("/")
    http_path = fastmcp.settings.streamable_http_path.lstrip("/")
    return JSONResponse(
        {
            "protocolVersion": mcp_types.LATEST_PROTOCOL_VERSION,
            "server": {"name": mcp.name, "version": mcp.version},
            "transports": {"http": {"url": f"{base_url}/{http_path}"}},
        }
    )


@mcp.custom_route("/", methods=["GET"], include_in_schema=False)
async def root_health(_: Request) -> JSONResponse:
    return JSONResponse({"status": "ok"})


def main() -> None:
    import argparse

    parser = argparse.ArgumentParser(
        description="mytm MCP Server",
        epilog="Environment: MYTM_CONFIG, MYTM_BACKEND, MYTM_BACKEND_DIR, MCP_TRANSPORT",
    )
    parser.add_argument(
        "--transport",
        choices=["stdio", "http"],
        default=os.getenv("MCP_TRANSPORT", "stdio"),
        help="Transport protocol to expose (stdio or http)",
    )
    parser.add_argument("--host", default=os.getenv("FASTMCP_SERVER_HOST", "127.0.0.1"))
    parser.add_argument("--port", type=int, default=int(os.getenv("FASTMCP_SERVER_PORT", "8000")))
    parser.add_argument("--verbose", action="store_true", help="Enable verbose (DEBUG level) logging")
    args = parser.parse_args()

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    if args.transport == "http":
        fastmcp.settings.host = args.host
        fastmcp.settings.port = args.port

    logger.info("Starting mytm MCP server (transport=%s, host=%s, port=%s)", args.transport, args.host, args.port)

    try:
        if args.transport == "http":
            async def run_http() -> None:
                await mcp.run_http_async(host=args.host, port=args.port)

            anyio.run(run_http)
        else:
            mcp.run(transport="stdio")
    except KeyboardInterrupt:  # pragma: no cover - user interaction
        logger.info("Server interrupted by user")


if __name__ == "__main__":  # pragma: no cover
    main()
