"""Evaluation protocol tool."""

from pathlib import Path
from typing import Any, Dict, Optional

import anyio

from ..data import load_manifest
from ..evaluator import EvalProtocol, emit_plots, run_protocol, write_report
from ..session import ToolSession


class EvaluationApi:
    """Tools for scoring checkpoints with Age_MAE and ID_sim."""

    async def evaluate_checkpoint(
        self,
        session: ToolSession,
        manifest: str,
        task: str,
        out_dir: str,
        checkpoint: Optional[str] = None,
    ) -> Dict[str, Any]:
        """Run the regression or progression protocol and write report files.

        Args:
            manifest: Manifest with test and reference splits
            task: regression (ages 0-70) or progression (ages 40-100)
            out_dir: Directory for report.json, report.csv and plots
            checkpoint: Adapter checkpoint directory; omit to score the global model
        """
        protocol = EvalProtocol.for_task(task)

        def run() -> Dict[str, Any]:
            collection = load_manifest(Path(manifest))
            net = session.adapter(checkpoint)
            report = run_protocol(
                session.bundle,
                net,
                collection,
                protocol,
                use_adapter=net is not None,
                label="personalized" if net is not None else "global",
                config_hash=session.config_hash,
                seed=session.config.seed,
            )
            files = write_report(report, Path(out_dir)) + emit_plots(report, Path(out_dir))
            return {"report": report.to_dict(), "files": [str(f) for f in files]}

        result = await anyio.to_thread.run_sync(run)
        return {"success": True, **result}
