"""PNG/JPEG decoding and PNG encoding for image tensors in [-1, 1]."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DomainError

PathLike = Union[str, Path]


def load_image(path: PathLike, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Decode an image file into a 3xHxW tensor with values in [-1, 1]."""
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise DomainError(f"cannot decode image {path}: {exc}") from exc
    tensor = torch.from_numpy(array).permute(2, 0, 1) / 127.5 - 1.0
    return tensor.to(dtype).contiguous()


def to_uint8(image: torch.Tensor) -> np.ndarray:
    pixels = ((image.detach().to(torch.float64).clamp(-1.0, 1.0) + 1.0) * 127.5).round()
    return pixels.to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def save_image(image: torch.Tensor, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def verify_image(path: PathLike) -> None:
    """Raise ``DomainError`` if the file is not a decodable image."""
    try:
        with Image.open(path) as img:
            img.verify()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DomainError(f"cannot decode image {path}: {exc}") from exc
