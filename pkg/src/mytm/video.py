"""Keyframe re-aging propagated to every frame by face swapping."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F

from .adapter import AdapterNetwork, personalized_reage
from .backends import BackendBundle, CropBox
from .errors import NoFaceDetectedError, VideoJobError
from .images import load_image, save_image
from .latent import validate_age

logger = logging.getLogger(__name__)

FRAME_PATTERN = re.compile(r"^frame_(\d{6})\.png$")


def list_frames(frames_dir: Path) -> List[Path]:
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise VideoJobError(f"frame directory not found: {frames_dir}")
    frames = sorted(p for p in frames_dir.iterdir() if FRAME_PATTERN.match(p.name))
    if not frames:
        raise VideoJobError(f"no frame_%06d.png files in {frames_dir}")
    return frames


@dataclass
class VideoJob:
    frames_dir: Path
    keyframe: int
    target_age: float
    out_dir: Path
    checkpoint: Optional[Path] = None
    paste_alpha: float = 1.0
    workers: int = 1
    frames: List[Path] = field(default_factory=list, init=False)

    def __post_init__(self) -> None:
        self.target_age = validate_age(self.target_age, "target age")
        self.frames = list_frames(self.frames_dir)
        if not 0 <= self.keyframe < len(self.frames):
            raise VideoJobError(f"keyframe {self.keyframe} outside frame range 0..{len(self.frames) - 1}")


def reage_keyframe(
    bundle: BackendBundle,
    net: Optional[AdapterNetwork],
    job: VideoJob,
    use_adapter: bool = True,
) -> torch.Tensor:
    """Aligned, re-aged face of the keyframe at decoder resolution."""
    raw = load_image(job.frames[job.keyframe], dtype=bundle.dtype)
    try:
        aligned = bundle.align_face(raw)
    except NoFaceDetectedError as exc:
        raise VideoJobError(f"cannot align keyframe {job.keyframe}: {exc}") from exc
    with torch.no_grad():
        face, _ = personalized_reage(bundle, net, aligned, job.target_age, use_adapter=use_adapter)
    return face


def paste_back(frame: torch.Tensor, face: torch.Tensor, box: CropBox, alpha: float = 1.0) -> torch.Tensor:
    """Alpha-blend ``face`` into ``frame`` at the aligner's crop box."""
    top, left, size = box
    if face.shape[-1] != size:
        mode = "area" if face.shape[-1] > size else "bilinear"
        kwargs = {} if mode == "area" else {"align_corners": False}
        face = F.interpolate(face.unsqueeze(0), size=(size, size), mode=mode, **kwargs).squeeze(0)
    out = frame.clone()
    region = out[:, top : top + size, left : left + size]
    out[:, top : top + size, left : left + size] = region + alpha * (face - region)
    return out


def identity_jitter(bundle: BackendBundle, faces: Sequence[torch.Tensor]) -> float:
    """Mean squared distance of identity embeddings to their mean.

    A variance proxy for temporal identity stability, not a perceptual measure.
    """
    with torch.no_grad():
        embeddings = torch.stack([bundle.embed_identity(face) for face in faces])
    return float(((embeddings - embeddings.mean(dim=0)) ** 2).sum(dim=1).mean())


@dataclass
class FrameResult:
    index: int
    name: str
    status: str
    frame: torch.Tensor
    swapped_face: Optional[torch.Tensor] = None
    input_face: Optional[torch.Tensor] = None


@dataclass
class VideoResult:
    frames: List[FrameResult]
    keyframe_face: torch.Tensor
    summary: Dict[str, object]

    @property
    def skipped(self) -> int:
        return sum(1 for f in self.frames if f.status == "passthrough")


def _process_frame(bundle: BackendBundle, face: torch.Tensor, path: Path, index: int, alpha: float) -> FrameResult:
    frame = load_image(path, dtype=bundle.dtype)
    try:
        aligned, box = bundle.align_face_with_box(frame)
        swapped = bundle.swap_face(face, aligned)
    except NoFaceDetectedError as exc:
        logger.warning("No face in frame=%s; passing it through (%s)", path.name, exc)
        return FrameResult(index, path.name, "passthrough", frame)
    return FrameResult(index, path.name, "swapped", paste_back(frame, swapped, box, alpha), swapped, aligned)


def reage_video(
    bundle: BackendBundle,
    net: Optional[AdapterNetwork],
    job: VideoJob,
    use_adapter: bool = True,
    config_hash: str = "",
    seed: int = 0,
) -> VideoResult:
    """Swap the re-aged keyframe face into every frame and write the results in order."""
    face = reage_keyframe(bundle, net, job, use_adapter=use_adapter)
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(item):
        index, path = item
        return _process_frame(bundle, face, path, index, job.paste_alpha)

    with ThreadPoolExecutor(max_workers=job.workers) as pool:
        results = list(pool.map(work, enumerate(job.frames)))

    for result in results:
        save_image(result.frame, out_dir / result.name)

    swapped = [r for r in results if r.status == "swapped"]
    summary: Dict[str, object] = {
        "config_hash": config_hash,
        "seed": seed,
        "target_age": job.target_age,
        "keyframe": job.keyframe,
        "frame_count": len(results),
        "swapped": len(swapped),
        "passthrough": len(results) - len(swapped),
        "frames": [{"index": r.index, "name": r.name, "status": r.status} for r in results],
    }
    if swapped:
        summary["identity_jitter_proxy"] = {
            "input": identity_jitter(bundle, [r.input_face for r in swapped]),
            "output": identity_jitter(bundle, [r.swapped_face for r in swapped]),
        }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    logger.info(
        "Re-aged video frames=%s swapped=%s passthrough=%s out=%s",
        len(results),
        len(swapped),
        summary["passthrough"],
        out_dir,
    )
    return VideoResult(results, face, summary)
