"""Latent-code and identity-embedding value types and their arithmetic."""

from __future__ import annotations

import torch

from .errors import DomainError, StructuralError

N_STYLES = 18
STYLE_DIM = 512
LATENT_SHAPE = (N_STYLES, STYLE_DIM)

AGE_MIN = 0.0
AGE_MAX = 100.0

# An 18x512 tensor. Offsets produced by the adapter share this type.
LatentCode = torch.Tensor
MeanLatent = torch.Tensor
IdentityEmbedding = torch.Tensor
AgeYears = float

_NORM_EPS = 1e-12


def check_latent(code: torch.Tensor, name: str = "latent") -> torch.Tensor:
    """Validate shape and finiteness of a latent code."""
    if tuple(code.shape) != LATENT_SHAPE:
        raise StructuralError(f"{name} must have shape {LATENT_SHAPE}, got {tuple(code.shape)}")
    if not bool(torch.isfinite(code).all()):
        raise DomainError(f"{name} contains non-finite entries")
    return code


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise StructuralError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def latent_add(a: LatentCode, b: LatentCode) -> LatentCode:
    check_latent(a, "a")
    check_latent(b, "b")
    return a + b


def latent_wnorm_distance(w: LatentCode, mean: MeanLatent) -> torch.Tensor:
    """Frobenius norm of ``w - mean``."""
    _check_pair(w, mean)
    if w.shape[-2:] != LATENT_SHAPE:
        raise StructuralError(f"latent must have trailing shape {LATENT_SHAPE}, got {tuple(w.shape)}")
    return torch.linalg.vector_norm(w - mean)


def normalize_embedding(vector: torch.Tensor) -> IdentityEmbedding:
    norm = torch.linalg.vector_norm(vector)
    if float(norm) <= _NORM_EPS:
        raise DomainError("identity embedding has zero norm")
    return vector / norm


def cosine_similarity(a: IdentityEmbedding, b: IdentityEmbedding) -> torch.Tensor:
    """Cosine similarity clamped to [-1, 1].

    The expression is symmetric term by term, so swapping the arguments gives
    a bit-identical result.
    """
    _check_pair(a, b)
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if float(na) <= _NORM_EPS or float(nb) <= _NORM_EPS:
        raise DomainError("cosine similarity is undefined for zero-norm embeddings")
    return ((a * b).sum() / (na * nb)).clamp(-1.0, 1.0)


def validate_age(age: float, name: str = "age") -> float:
    value = float(age)
    if not (AGE_MIN <= value <= AGE_MAX):
        raise DomainError(f"{name} must be within [{AGE_MIN:g}, {AGE_MAX:g}] years, got {value:g}")
    return value


def clamp_age(age: float) -> float:
    return min(max(float(age), AGE_MIN), AGE_MAX)


def normalize_age(age: float) -> float:
    """Map years onto the [0, 1] conditioning scale used at model boundaries."""
    return validate_age(age) / AGE_MAX
