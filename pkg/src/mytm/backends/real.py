"""TorchScript-exported pre-trained components loaded from configured paths.

Each module is called with a leading batch dimension of one:

- encoder(image[1,3,R,R], age01[1]) -> code[1,18,512]
- decoder(code[1,18,512]) -> image[1,3,R,R]
- identity(image) -> embedding[1,D]
- age_train / age_eval(image) -> years[1]
- perceptual(a, b) -> scalar
- swapper(source, target) -> (frame[1,3,R,R], found[1])
- aligner(raw[1,3,H,W]) -> (aligned[1,3,R,R], box[3], found[1])

``real_mean_latent`` is a ``torch.save``'d 18x512 tensor.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Optional, Tuple

import torch

from ..errors import BackendError, BackendUnavailableError, NoFaceDetectedError
from . import BackendBundle, CropBox

if TYPE_CHECKING:
    from ..config import RunConfig

logger = logging.getLogger(__name__)

COMPONENT_KEYS = (
    "real_encoder",
    "real_decoder",
    "real_identity",
    "real_age_train",
    "real_age_eval",
    "real_perceptual",
    "real_swapper",
    "real_aligner",
    "real_mean_latent",
)


def resolve_paths(config: "RunConfig") -> Dict[str, Path]:
    """Resolve every component path against ``MYTM_BACKEND_DIR``; list all missing ones at once."""
    root = Path(os.environ.get("MYTM_BACKEND_DIR", "."))
    resolved: Dict[str, Path] = {}
    missing = []
    for key in COMPONENT_KEYS:
        value: Optional[str] = getattr(config, key)
        if not value:
            missing.append(f"{key} (not configured)")
            continue
        path = Path(value)
        if not path.is_absolute():
            path = root / path
        if not path.is_file():
            missing.append(f"{key} ({path})")
            continue
        resolved[key] = path
    if missing:
        raise BackendUnavailableError("real backend unavailable; missing: " + ", ".join(missing))
    return resolved


class _Scripted:
    def __init__(self, path: Path, dtype: torch.dtype):
        try:
            self.module = torch.jit.load(str(path), map_location="cpu").to(dtype).eval()
        except (RuntimeError, ValueError) as exc:
            raise BackendUnavailableError(f"cannot load TorchScript module {path}: {exc}") from exc
        self.path = path
        self.dtype = dtype

    def call(self, *args):
        try:
            return self.module(*args)
        except RuntimeError as exc:
            raise BackendError(f"{self.path.name} failed: {exc}") from exc


class ScriptedEncoder(_Scripted):
    def __call__(self, image: torch.Tensor, age01: float) -> torch.Tensor:
        age = torch.tensor([age01], dtype=image.dtype)
        return self.call(image.unsqueeze(0), age)[0]


class ScriptedImageToImage(_Scripted):
    def __call__(self, tensor: torch.Tensor) -> torch.Tensor:
        return self.call(tensor.unsqueeze(0))[0].clamp(-1.0, 1.0)


class ScriptedReadout(_Scripted):
    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        return self.call(image.unsqueeze(0))[0]


class ScriptedAgeEstimator(_Scripted):
    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        return self.call(image.unsqueeze(0)).reshape(()).clamp(0.0, 100.0)


class ScriptedPerceptual(_Scripted):
    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return self.call(a.unsqueeze(0), b.unsqueeze(0)).reshape(())


class ScriptedSwapper(_Scripted):
    def __call__(self, source_face: torch.Tensor, target_frame: torch.Tensor) -> torch.Tensor:
        frame, found = self.call(source_face.unsqueeze(0), target_frame.unsqueeze(0))
        if not bool(found.reshape(-1)[0]):
            raise NoFaceDetectedError("swapper found no face in target frame")
        return frame[0]


class ScriptedAligner(_Scripted):
    def __call__(self, raw_image: torch.Tensor) -> Tuple[torch.Tensor, CropBox]:
        aligned, box, found = self.call(raw_image.unsqueeze(0))
        if not bool(found.reshape(-1)[0]):
            raise NoFaceDetectedError("aligner found no facial landmarks")
        top, left, size = (int(v) for v in box.reshape(-1)[:3])
        return aligned[0], (top, left, size)


def build_real_bundle(config: "RunConfig", dtype: torch.dtype = torch.float32) -> BackendBundle:
    paths = resolve_paths(config)
    try:
        mean_latent = torch.load(paths["real_mean_latent"], map_location="cpu", weights_only=True).to(dtype)
    except (RuntimeError, OSError) as exc:
        raise BackendUnavailableError(f"cannot load mean latent: {exc}") from exc
    logger.info("Loaded real backend components=%s resolution=%s", len(paths), config.real_resolution)
    return BackendBundle(
        name="real",
        encoder=ScriptedEncoder(paths["real_encoder"], dtype),
        decoder=ScriptedImageToImage(paths["real_decoder"], dtype),
        identity_embedder=ScriptedReadout(paths["real_identity"], dtype),
        age_estimator_train=ScriptedAgeEstimator(paths["real_age_train"], dtype),
        age_estimator_eval=ScriptedAgeEstimator(paths["real_age_eval"], dtype),
        perceptual_metric=ScriptedPerceptual(paths["real_perceptual"], dtype),
        mean_latent=mean_latent.reshape(18, 512),
        face_swapper=ScriptedSwapper(paths["real_swapper"], dtype),
        aligner=ScriptedAligner(paths["real_aligner"], dtype),
        resolution=config.real_resolution,
        seed=config.seed,
        dtype=dtype,
    )
