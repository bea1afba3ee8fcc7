"""Photo-collection inspection tools."""

from pathlib import Path
from typing import Any, Dict

import anyio

from ..data import coverage_summary, load_manifest, uncovered_ages
from ..errors import ManifestError
from ..evaluator import EvalProtocol
from ..session import ToolSession


class DatasetApi:
    """Tools for validating age-annotated photo collections."""

    async def validate_manifest(
        self,
        session: ToolSession,
        manifest: str,
        task: str = "regression",
    ) -> Dict[str, Any]:
        """Validate a JSON-Lines manifest and report per-decade coverage.

        Args:
            manifest: Path to the manifest file
            task: Evaluation grid to check reference coverage against (regression or progression)
        """
        try:
            collection = await anyio.to_thread.run_sync(load_manifest, Path(manifest))
        except ManifestError as exc:
            return {"success": False, "error": str(exc)}

        protocol = EvalProtocol.for_task(task)
        return {
            "success": True,
            "records": len(collection),
            "age_min": collection.age_min,
            "age_max": collection.age_max,
            "histogram": coverage_summary(collection),
            "uncovered_ages": uncovered_ages(collection, protocol.target_ages, window=protocol.window),
        }
