"""Interfaces for the pre-trained components and the bundle that groups them."""

from __future__ import annotations

import hashlib
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Protocol, Tuple

import torch

from ..errors import DomainError, StructuralError
from ..latent import LATENT_SHAPE, check_latent, normalize_age, normalize_embedding

if TYPE_CHECKING:
    from ..config import RunConfig

__all__ = [
    "Aligner",
    "AgeEstimator",
    "BackendBundle",
    "CropBox",
    "Decoder",
    "Encoder",
    "FaceSwapper",
    "IdentityEmbedder",
    "PerceptualMetric",
    "check_image",
    "load_bundle",
]

logger = logging.getLogger(__name__)

# (top, left, size) of the square crop in raw-frame pixels.
CropBox = Tuple[int, int, int]


class Encoder(Protocol):
    def __call__(self, image: torch.Tensor, age01: float) -> torch.Tensor: ...


class Decoder(Protocol):
    def __call__(self, code: torch.Tensor) -> torch.Tensor: ...


class IdentityEmbedder(Protocol):
    def __call__(self, image: torch.Tensor) -> torch.Tensor: ...


class AgeEstimator(Protocol):
    def __call__(self, image: torch.Tensor) -> torch.Tensor: ...


class PerceptualMetric(Protocol):
    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor: ...


class FaceSwapper(Protocol):
    def __call__(self, source_face: torch.Tensor, target_frame: torch.Tensor) -> torch.Tensor: ...


class Aligner(Protocol):
    def __call__(self, raw_image: torch.Tensor) -> Tuple[torch.Tensor, CropBox]: ...


def check_image(image: torch.Tensor, resolution: Optional[int] = None, name: str = "image") -> torch.Tensor:
    if image.dim() != 3 or image.shape[0] != 3:
        raise StructuralError(f"{name} must be a 3xHxW tensor, got {tuple(image.shape)}")
    if resolution is not None and tuple(image.shape[1:]) != (resolution, resolution):
        raise StructuralError(
            f"{name} must be {resolution}x{resolution}, got {image.shape[1]}x{image.shape[2]}"
        )
    return image


@dataclass(frozen=True)
class BackendBundle:
    """One handle per pre-trained component, sharing resolution and latent conventions."""

    name: str
    encoder: Encoder
    decoder: Decoder
    identity_embedder: IdentityEmbedder
    age_estimator_train: AgeEstimator
    age_estimator_eval: AgeEstimator
    perceptual_metric: PerceptualMetric
    mean_latent: torch.Tensor
    face_swapper: FaceSwapper
    aligner: Aligner
    resolution: int
    seed: int = 0
    dtype: torch.dtype = torch.float32
    cache_max_entries: int = 4096
    _cache: "OrderedDict[str, torch.Tensor]" = field(
        default_factory=OrderedDict, init=False, repr=False, compare=False
    )
    _cache_lock: threading.Lock = field(
        default_factory=threading.Lock, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        if tuple(self.mean_latent.shape) != LATENT_SHAPE:
            raise StructuralError(f"mean latent must have shape {LATENT_SHAPE}")

    def encode(self, image: torch.Tensor, target_age: float) -> torch.Tensor:
        age01 = normalize_age(target_age)
        check_image(image, self.resolution)
        return check_latent(self.encoder(image, age01), "encoded latent")

    def decode(self, code: torch.Tensor) -> torch.Tensor:
        check_latent(code, "code")
        return self.decoder(code)

    def embed_identity(self, image: torch.Tensor) -> torch.Tensor:
        check_image(image, self.resolution)
        return normalize_embedding(self.identity_embedder(image))

    def _get_cache_key(self, image: torch.Tensor) -> str:
        """Key a fixed photo by its shape, dtype and raw bytes."""
        data = image.detach().cpu().contiguous()
        digest = hashlib.md5(f"{tuple(data.shape)}|{data.dtype}".encode())
        digest.update(data.numpy().tobytes())
        return digest.hexdigest()

    def embed_reference(self, image: torch.Tensor) -> torch.Tensor:
        """Gradient-free embedding of a fixed photo, memoised in an LRU cache."""
        key = self._get_cache_key(image)
        with self._cache_lock:
            cached = self._cache.get(key)
            if cached is not None:
                self._cache.move_to_end(key)
                return cached
        with torch.no_grad():
            embedding = self.embed_identity(image.detach())
        with self._cache_lock:
            self._cache[key] = embedding
            if len(self._cache) > self.cache_max_entries:
                self._cache.popitem(last=False)
        return embedding

    def estimate_age(self, image: torch.Tensor, mode: str = "train") -> torch.Tensor:
        check_image(image, self.resolution)
        if mode == "train":
            return self.age_estimator_train(image)
        if mode == "eval":
            with torch.no_grad():
                return self.age_estimator_eval(image)
        raise DomainError(f"unknown age-estimator mode {mode!r}; expected 'train' or 'eval'")

    def perceptual_distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise StructuralError(f"perceptual pair shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        check_image(a, name="a")
        return self.perceptual_metric(a, b)

    def swap_face(self, source_face: torch.Tensor, target_frame: torch.Tensor) -> torch.Tensor:
        check_image(source_face, self.resolution, "source face")
        check_image(target_frame, self.resolution, "target frame")
        return self.face_swapper(source_face, target_frame)

    def align_face_with_box(self, raw_image: torch.Tensor) -> Tuple[torch.Tensor, CropBox]:
        check_image(raw_image, name="raw image")
        return self.aligner(raw_image)

    def align_face(self, raw_image: torch.Tensor) -> torch.Tensor:
        aligned, _ = self.align_face_with_box(raw_image)
        return aligned


def resolve_dtype(name: str) -> torch.dtype:
    dtype = getattr(torch, name, None)
    if not isinstance(dtype, torch.dtype) or not dtype.is_floating_point:
        raise DomainError(f"unsupported dtype {name!r}")
    return dtype


def load_bundle(config: "RunConfig") -> BackendBundle:
    """Build the backend named by ``config.backend``.

    A missing real backend raises ``BackendUnavailableError``; the toy backend is
    never substituted for it.
    """
    dtype = resolve_dtype(config.dtype)
    logger.info("Loading backend name=%s seed=%s dtype=%s", config.backend, config.seed, config.dtype)
    if config.backend == "toy":
        from .toy import build_toy_bundle

        return build_toy_bundle(seed=config.seed, dtype=dtype)
    if config.backend == "real":
        from .real import build_real_bundle

        return build_real_bundle(config, dtype=dtype)
    raise DomainError(f"unknown backend {config.backend!r}")
