"""Frame-directory re-aging tool."""

from pathlib import Path
from typing import Any, Dict, Optional

import anyio

from ..session import ToolSession
from ..video import VideoJob, reage_video


class VideoApi:
    """Tools for keyframe-swap video re-aging."""

    async def reage_frames(
        self,
        session: ToolSession,
        frames_dir: str,
        keyframe: int,
        target_age: float,
        out_dir: str,
        checkpoint: Optional[str] = None,
    ) -> Dict[str, Any]:
        """Re-age a keyframe and swap it into every frame_%06d.png in a directory.

        Args:
            frames_dir: Directory of zero-padded numbered PNG frames
            keyframe: Index of the near-frontal keyframe
            target_age: Target age in years, 0-100
            out_dir: Output directory for frames and summary.json
            checkpoint: Adapter checkpoint directory; omit for the global model
        """
        config = session.config
        job = VideoJob(
            frames_dir=Path(frames_dir),
            keyframe=keyframe,
            target_age=target_age,
            out_dir=Path(out_dir),
            checkpoint=Path(checkpoint) if checkpoint else None,
            paste_alpha=config.paste_alpha,
            workers=config.workers,
        )

        def run() -> Dict[str, Any]:
            net = session.adapter(checkpoint)
            result = reage_video(
                session.bundle,
                net,
                job,
                use_adapter=net is not None,
                config_hash=session.config_hash,
                seed=config.seed,
            )
            return result.summary

        summary = await anyio.to_thread.run_sync(run)
        return {"success": True, "summary": summary}
