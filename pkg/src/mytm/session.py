"""Shared state the tool server hands to every tool call."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .adapter import AdapterNetwork
from .backends import BackendBundle, load_bundle
from .config import RunConfig, config_hash, load_config
from .trainer import load_adapter

logger = logging.getLogger(__name__)


@dataclass
class ToolSession:
    """Config, backend and a small cache of loaded adapters."""

    config: RunConfig
    bundle: BackendBundle
    _adapters: Dict[str, Tuple[AdapterNetwork, Dict[str, Any]]] = field(default_factory=dict, repr=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def adapter(self, checkpoint: Optional[str]) -> Optional[AdapterNetwork]:
        """Load (once) the adapter stored at ``checkpoint``; ``None`` means the global model."""
        if not checkpoint:
            return None
        key = str(Path(checkpoint).resolve())
        if key not in self._adapters:
            self._adapters[key] = load_adapter(Path(checkpoint), dtype=self.bundle.dtype)
            logger.info("Loaded adapter checkpoint=%s", key)
        return self._adapters[key][0]


def _load_session_config() -> RunConfig:
    path = os.environ.get("MYTM_CONFIG")
    return load_config(Path(path) if path else None)


def build_session(config: Optional[RunConfig] = None) -> ToolSession:
    config = config or _load_session_config()
    return ToolSession(config=config, bundle=load_bundle(config))
