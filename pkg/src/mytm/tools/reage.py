"""Single-photo re-aging tool."""

from pathlib import Path
from typing import Any, Dict, Optional

import anyio
import torch

from ..adapter import personalized_reage
from ..images import load_image, save_image
from ..latent import validate_age
from ..session import ToolSession


class ReageApi:
    """Tools for re-aging individual photos."""

    async def reage_image(
        self,
        session: ToolSession,
        image_path: str,
        target_age: float,
        output_path: str,
        checkpoint: Optional[str] = None,
        use_adapter: bool = True,
    ) -> Dict[str, Any]:
        """Re-age one photo to a target age and write the result as PNG.

        Args:
            image_path: Input photo (PNG or JPEG)
            target_age: Target age in years, 0-100
            output_path: Where to write the PNG
            checkpoint: Adapter checkpoint directory; omit for the global model
            use_adapter: Set false to bypass the adapter even when a checkpoint is given
        """
        age = validate_age(target_age, "target_age")
        bundle = session.bundle

        def run() -> float:
            net = session.adapter(checkpoint)
            image = bundle.align_face(load_image(image_path, dtype=bundle.dtype))
            with torch.no_grad():
                output, _ = personalized_reage(bundle, net, image, age, use_adapter=use_adapter)
            save_image(output, output_path)
            return float(bundle.estimate_age(output, "eval"))

        estimate = await anyio.to_thread.run_sync(run)
        return {
            "success": True,
            "output": str(Path(output_path)),
            "target_age": age,
            "estimated_age": estimate,
            "adapter": bool(checkpoint) and use_adapter,
        }
