"""Deterministic desk-scale backend.

Images are 3x32x32. The first ``AGE_ROWS`` rows of every channel hold the age
band, the remaining rows hold the identity band. The generator is
``tanh(base + C @ code @ M)`` with an orthogonal ``M`` and a rank-6 ``C``;
the encoder inverts it exactly and adds a fixed offset in the null space of
``C``. The mean latent is the code of the neutral face (base logits at age 50),
which carries the same offset, so ``W - mean`` only holds image content.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from ..errors import DomainError, NoFaceDetectedError
from ..images import save_image
from ..latent import N_STYLES, STYLE_DIM
from . import BackendBundle, CropBox

logger = logging.getLogger(__name__)

TOY_RESOLUTION = 32
AGE_ROWS = 2
AGE_SCALE = 0.9
EMBED_DIM = 512
SWAP_ALPHA = 0.9
DECODER_GAIN = 8.0
NULL_OFFSET_NORM = 48.0
ATANH_LIMIT = 0.995
NO_FACE_STD = 1e-6

_IMAGE_ROWS = 3 * TOY_RESOLUTION * TOY_RESOLUTION // STYLE_DIM  # 6
_IDENTITY_PIXELS = 3 * (TOY_RESOLUTION - AGE_ROWS) * TOY_RESOLUTION


def age_band_value(age_years: float) -> float:
    """Pixel value the toy generator uses to render ``age_years``."""
    return AGE_SCALE * (age_years / 50.0 - 1.0)


def identity_band(image: torch.Tensor) -> torch.Tensor:
    return image[..., AGE_ROWS:, :]


def _age_band_mask() -> torch.Tensor:
    mask = torch.zeros(3, TOY_RESOLUTION, TOY_RESOLUTION, dtype=torch.bool)
    mask[:, :AGE_ROWS, :] = True
    return mask


class ToyParameters:
    """Fixed-seed tensors shared by every toy component."""

    def __init__(self, seed: int = 0, dtype: torch.dtype = torch.float32):
        gen = torch.Generator().manual_seed(seed)
        f64 = torch.float64

        q, _ = torch.linalg.qr(torch.randn(N_STYLES, N_STYLES, generator=gen, dtype=f64))
        basis = q[:, :_IMAGE_ROWS]
        null = q[:, _IMAGE_ROWS:]
        mixer, _ = torch.linalg.qr(torch.randn(STYLE_DIM, STYLE_DIM, generator=gen, dtype=f64))

        offset = null @ torch.randn(N_STYLES - _IMAGE_ROWS, STYLE_DIM, generator=gen, dtype=f64)
        offset = offset * (NULL_OFFSET_NORM / torch.linalg.vector_norm(offset))

        base = 0.2 * torch.randn(3, TOY_RESOLUTION, TOY_RESOLUTION, generator=gen, dtype=f64)
        base[:, :AGE_ROWS, :] = 0.0

        projection = torch.randn(EMBED_DIM, _IDENTITY_PIXELS, generator=gen, dtype=f64)
        projection = projection / math.sqrt(_IDENTITY_PIXELS)
        kernel = torch.randn(8, 3, 3, 3, generator=gen, dtype=f64) / 3.0

        self.seed = seed
        self.dtype = dtype
        self.synthesis = (DECODER_GAIN * basis.T).to(dtype)  # 6 x 18
        self.analysis = (basis / DECODER_GAIN).to(dtype)  # 18 x 6
        self.mixer = mixer.to(dtype)
        self.null_offset = offset.to(dtype)
        self.base_logits = base.to(dtype)
        self.projection = projection.to(dtype)
        self.kernel = kernel.to(dtype)
        self.age_mask = _age_band_mask()

    def neutral_code(self) -> torch.Tensor:
        """Encoding of the base logits with a zero age logit, i.e. age 50."""
        return self.null_offset.clone()


class ToyEncoder:
    def __init__(self, params: ToyParameters):
        self.p = params

    def __call__(self, image: torch.Tensor, age01: float) -> torch.Tensor:
        p = self.p
        logits = torch.atanh(image.clamp(-ATANH_LIMIT, ATANH_LIMIT))
        age_logit = math.atanh(AGE_SCALE * (2.0 * age01 - 1.0))
        logits = torch.where(p.age_mask, torch.full_like(logits, age_logit), logits)
        rows = (logits - p.base_logits).reshape(_IMAGE_ROWS, STYLE_DIM)
        return p.analysis @ (rows @ p.mixer.T) + p.null_offset


class ToyDecoder:
    def __init__(self, params: ToyParameters):
        self.p = params

    def __call__(self, code: torch.Tensor) -> torch.Tensor:
        p = self.p
        rows = p.synthesis @ code @ p.mixer
        return torch.tanh(p.base_logits + rows.reshape(3, TOY_RESOLUTION, TOY_RESOLUTION))


class ToyIdentityEmbedder:
    """Fixed linear projection of the identity band."""

    def __init__(self, params: ToyParameters):
        self.p = params

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        return self.p.projection @ identity_band(image).reshape(-1)


class ToyTrainAgeEstimator:
    """Differentiable read-out of the mean age band."""

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        band = image[:, :AGE_ROWS, :].mean()
        return (50.0 * (band / AGE_SCALE + 1.0)).clamp(0.0, 100.0)


class ToyEvalAgeEstimator:
    """Median of the age band, quantised to 0.1 years like a classifier read-out."""

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        band = image[:, :AGE_ROWS, :].reshape(-1).median()
        years = (50.0 * (band / AGE_SCALE + 1.0)).clamp(0.0, 100.0)
        return torch.round(years * 10.0) / 10.0


class ToyPerceptualMetric:
    def __init__(self, params: ToyParameters):
        self.p = params

    def features(self, image: torch.Tensor) -> torch.Tensor:
        return torch.tanh(F.conv2d(image.unsqueeze(0), self.p.kernel, padding=1))

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return ((self.features(a) - self.features(b)) ** 2).mean()


class ToyFaceSwapper:
    """Blends the source identity band into the target frame."""

    def __init__(self, alpha: float = SWAP_ALPHA):
        self.alpha = alpha

    def __call__(self, source_face: torch.Tensor, target_frame: torch.Tensor) -> torch.Tensor:
        target_band = identity_band(target_frame)
        if float(target_band.std()) < NO_FACE_STD:
            raise NoFaceDetectedError("no face found in target frame")
        out = target_frame.clone()
        out[:, AGE_ROWS:, :] = target_band + self.alpha * (identity_band(source_face) - target_band)
        return out


def crop_box(height: int, width: int) -> CropBox:
    size = min(height, width)
    return (height - size) // 2, (width - size) // 2, size


def resize_square(image: torch.Tensor, size: int) -> torch.Tensor:
    current = image.shape[-1]
    if current == size:
        return image
    mode = "area" if current > size else "bilinear"
    kwargs = {} if mode == "area" else {"align_corners": False}
    return F.interpolate(image.unsqueeze(0), size=(size, size), mode=mode, **kwargs).squeeze(0)


class ToyAligner:
    """Center crop to a square, then resize to the toy resolution."""

    def __call__(self, raw_image: torch.Tensor) -> Tuple[torch.Tensor, CropBox]:
        top, left, size = crop_box(raw_image.shape[1], raw_image.shape[2])
        crop = raw_image[:, top : top + size, left : left + size]
        return resize_square(crop, TOY_RESOLUTION), (top, left, size)


def build_toy_bundle(seed: int = 0, dtype: torch.dtype = torch.float32) -> BackendBundle:
    params = ToyParameters(seed=seed, dtype=dtype)
    return BackendBundle(
        name="toy",
        encoder=ToyEncoder(params),
        decoder=ToyDecoder(params),
        identity_embedder=ToyIdentityEmbedder(params),
        age_estimator_train=ToyTrainAgeEstimator(),
        age_estimator_eval=ToyEvalAgeEstimator(),
        perceptual_metric=ToyPerceptualMetric(params),
        mean_latent=params.neutral_code(),
        face_swapper=ToyFaceSwapper(),
        aligner=ToyAligner(),
        resolution=TOY_RESOLUTION,
        seed=seed,
        dtype=dtype,
    )


class SyntheticPerson:
    """One synthetic identity whose identity band drifts linearly with age.

    ``render`` is a pure function of ``(seed, age_years, sample)``; different
    ``sample`` values give independent photo noise at the same age.
    """

    def __init__(self, seed: int = 0, drift: float = 1.0, noise: float = 0.05):
        gen = torch.Generator().manual_seed(seed)
        shape = (3, TOY_RESOLUTION - AGE_ROWS, TOY_RESOLUTION)
        self.identity = 0.5 * torch.randn(shape, generator=gen, dtype=torch.float64)
        self.drift_direction = 0.5 * torch.randn(shape, generator=gen, dtype=torch.float64)
        self.seed = seed
        self.drift = drift
        self.noise = noise

    def _noise_seed(self, age_years: float, sample: int) -> int:
        return (self.seed * 1_000_003 + round(age_years * 1000) * 7_919 + sample) % (2**63)

    def render(self, age_years: float, sample: int = 0) -> torch.Tensor:
        if not 0.0 <= age_years <= 100.0:
            raise DomainError(f"age must be within [0, 100], got {age_years:g}")
        gen = torch.Generator().manual_seed(self._noise_seed(age_years, sample))
        jitter = self.noise * torch.randn(self.identity.shape, generator=gen, dtype=torch.float64)
        logits = self.identity + self.drift * ((age_years - 50.0) / 20.0) * self.drift_direction + jitter
        image = torch.empty(3, TOY_RESOLUTION, TOY_RESOLUTION, dtype=torch.float64)
        image[:, :AGE_ROWS, :] = age_band_value(age_years)
        image[:, AGE_ROWS:, :] = torch.tanh(logits)
        return image


def make_synthetic_collection(
    out_dir: Path,
    train_ages: Sequence[float],
    reference_ages: Sequence[float] = (),
    test_ages: Sequence[float] = (),
    seed: int = 0,
    drift: float = 1.0,
) -> Path:
    """Write PNGs of one synthetic person plus a JSON-Lines manifest; return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    person = SyntheticPerson(seed=seed, drift=drift)
    lines: List[str] = []
    sample = 0
    for split, ages in (("train", train_ages), ("reference", reference_ages), ("test", test_ages)):
        for index, age in enumerate(ages):
            rel = Path("images") / f"{split}_{index:03d}.png"
            save_image(person.render(float(age), sample=sample), out_dir / rel)
            sample += 1
            lines.append(json.dumps({"path": rel.as_posix(), "age_years": float(age), "split": split}))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("Wrote synthetic collection records=%s manifest=%s", len(lines), manifest)
    return manifest


def make_synthetic_frames(
    out_dir: Path,
    n_frames: int,
    age_years: float = 60.0,
    seed: int = 0,
    blank: Iterable[int] = (),
    size: Optional[int] = None,
) -> List[Path]:
    """Write ``frame_%06d.png`` files of one jittering synthetic face.

    Frames listed in ``blank`` get a flat identity band, which the toy swapper
    reports as containing no face.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    person = SyntheticPerson(seed=seed, noise=0.15)
    blank = set(blank)
    paths = []
    for index in range(n_frames):
        frame = person.render(age_years, sample=index)
        if index in blank:
            frame[:, AGE_ROWS:, :] = 0.0
        if size is not None:
            frame = resize_square(frame, size)
        path = out_dir / f"frame_{index:06d}.png"
        save_image(frame, path)
        paths.append(path)
    return paths
