"""Training losses: SAM composite, personalized aging, extrapolation replay and adaptive w-norm."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .adapter import AdapterNetwork, personalized_reage
from .backends import BackendBundle
from .config import AblationFlags, LossWeights
from .errors import ContractError, StructuralError
from .latent import clamp_age, cosine_similarity, latent_wnorm_distance

if TYPE_CHECKING:
    from .data import AgedPhotoCollection, PhotoRecord

logger = logging.getLogger(__name__)


@dataclass
class LossTerm:
    name: str
    value: Optional[torch.Tensor]
    weight: float
    reason: str = ""

    @property
    def skipped(self) -> bool:
        return self.value is None

    @property
    def contribution(self) -> torch.Tensor:
        if self.value is None:
            return torch.zeros(())
        return self.weight * self.value


@dataclass
class LossReport:
    """Itemized loss terms; ``total`` is the weighted sum of the non-skipped terms."""

    terms: List[LossTerm] = field(default_factory=list)

    @property
    def total(self) -> torch.Tensor:
        active = [term.weight * term.value for term in self.terms if term.value is not None]
        if not active:
            return torch.zeros(())
        total = active[0]
        for contribution in active[1:]:
            total = total + contribution
        return total

    def add(self, name: str, value: Optional[torch.Tensor], weight: float, reason: str = "") -> None:
        self.terms.append(LossTerm(name=name, value=value, weight=float(weight), reason=reason))

    def skip(self, name: str, weight: float, reason: str) -> None:
        self.add(name, None, weight, reason)

    def extend(self, other: "LossReport") -> "LossReport":
        self.terms.extend(other.terms)
        return self

    def term(self, name: str) -> LossTerm:
        for term in self.terms:
            if term.name == name:
                return term
        raise KeyError(name)

    def as_dict(self) -> Dict[str, Optional[float]]:
        values: Dict[str, Optional[float]] = {
            term.name: None if term.value is None else float(term.value) for term in self.terms
        }
        values["total"] = float(self.total)
        return values


def sam_forward_loss(
    bundle: BackendBundle,
    y: torch.Tensor,
    x: torch.Tensor,
    target_age: float,
    w: LossWeights,
    prefix: str = "forward",
) -> LossReport:
    """Pixel MSE, perceptual, identity and age terms of ``y`` against the source ``x``."""
    if y.shape != x.shape:
        raise StructuralError(f"output and source shapes differ: {tuple(y.shape)} vs {tuple(x.shape)}")
    report = LossReport()
    report.add(f"{prefix}_l2", F.mse_loss(y, x), w.lambda_l2)
    report.add(f"{prefix}_lpips", bundle.perceptual_distance(y, x), w.lambda_lpips)
    identity = 1.0 - cosine_similarity(bundle.embed_identity(y), bundle.embed_reference(x))
    report.add(f"{prefix}_id", identity, w.lambda_id)
    report.add(f"{prefix}_age", (target_age - bundle.estimate_age(y, "train")).abs(), w.lambda_age)
    return report


def sam_cycle_loss(
    bundle: BackendBundle,
    net: Optional[AdapterNetwork],
    y_tgt: torch.Tensor,
    x: torch.Tensor,
    input_age: float,
    w: LossWeights,
    use_adapter: bool = True,
) -> LossReport:
    """Re-age ``y_tgt`` back to ``input_age`` through the same path and compare with ``x``."""
    y_cycle, _ = personalized_reage(bundle, net, y_tgt, input_age, use_adapter=use_adapter)
    return sam_forward_loss(bundle, y_cycle, x, input_age, w, prefix="cycle")


@dataclass
class ReferenceSet:
    """Photos near a target age. ``flagged_empty`` marks a failed widening."""

    target_age: float
    window: int
    records: List["PhotoRecord"] = field(default_factory=list)
    images: List[torch.Tensor] = field(default_factory=list)
    flagged_empty: bool = False

    def __len__(self) -> int:
        return len(self.images)

    def __bool__(self) -> bool:
        return bool(self.images)


def build_reference_set(
    collection: "AgedPhotoCollection",
    target_age: float,
    window_years: int = 3,
    split: str = "train",
    max_window: int = 10,
    dtype: Optional[torch.dtype] = None,
) -> ReferenceSet:
    """Records of ``split`` within ``window_years`` of ``target_age``.

    An empty window widens one year at a time up to ``max_window``; if still
    empty the set comes back empty with ``flagged_empty`` set.
    """
    pool = collection.split(split)
    window = window_years
    while True:
        chosen = [record for record in pool if abs(record.age_years - target_age) <= window]
        if chosen or window >= max_window:
            break
        window += 1
    if not chosen:
        logger.warning(
            "No %s photos within %s years of age %.1f; reference set is empty", split, window, target_age
        )
        return ReferenceSet(target_age=target_age, window=window, flagged_empty=True)
    if window != window_years:
        logger.info("Widened reference window age=%.1f window=%s", target_age, window)
    images = [collection.load_image(record, dtype=dtype) for record in chosen]
    return ReferenceSet(target_age=target_age, window=window, records=chosen, images=images)


ReferenceImages = Union[ReferenceSet, Sequence[torch.Tensor]]


def _reference_images(reference: ReferenceImages) -> Sequence[torch.Tensor]:
    return reference.images if isinstance(reference, ReferenceSet) else reference


def reference_similarities(bundle: BackendBundle, image: torch.Tensor, reference: ReferenceImages) -> torch.Tensor:
    """Cosine similarity of ``image`` to every reference photo."""
    images = _reference_images(reference)
    embedding = bundle.embed_identity(image)
    return torch.stack([cosine_similarity(embedding, bundle.embed_reference(ref)) for ref in images])


def personalized_aging_loss(bundle: BackendBundle, y_p: torch.Tensor, reference: ReferenceImages) -> torch.Tensor:
    """One minus the best identity match against the reference photos."""
    if len(_reference_images(reference)) == 0:
        raise ContractError("personalized aging loss needs a non-empty reference set; skip the term instead")
    return 1.0 - reference_similarities(bundle, y_p, reference).max()


def extrapolation_regularization(
    bundle: BackendBundle,
    y_p: torch.Tensor,
    y_global: torch.Tensor,
    w: LossWeights,
) -> torch.Tensor:
    if y_p.shape != y_global.shape:
        raise StructuralError(f"shape mismatch: {tuple(y_p.shape)} vs {tuple(y_global.shape)}")
    anchor = y_global.detach()
    identity = 1.0 - cosine_similarity(bundle.embed_identity(y_p), bundle.embed_reference(anchor))
    return (
        w.lambda_l2 * F.mse_loss(y_p, anchor)
        + w.lambda_lpips * bundle.perceptual_distance(y_p, anchor)
        + w.lambda_id * identity
    )


def adaptive_reg_weight(delta_age: float) -> float:
    """Cosine ramp ``1 - cos(pi * delta / 100)``.

    Evaluated as ``1 + sin(pi * (delta - 50) / 100)`` so 0, 50 and 100 map to
    exactly 0, 1 and 2.
    """
    delta = clamp_age(delta_age)
    return 1.0 + math.sin(math.pi * (delta - 50.0) / 100.0)


def adaptive_wnorm_loss(
    combined: torch.Tensor,
    mean: torch.Tensor,
    input_age: float,
    target_age: float,
) -> torch.Tensor:
    weight = adaptive_reg_weight(abs(input_age - target_age))
    return weight * latent_wnorm_distance(combined, mean)


def global_reage(bundle: BackendBundle, image: torch.Tensor, target_age: float) -> torch.Tensor:
    """Adapter-bypassed output, used as the frozen replay anchor."""
    with torch.no_grad():
        return bundle.decode(bundle.encode(image.detach(), target_age))


def total_personalization_loss(
    bundle: BackendBundle,
    net: Optional[AdapterNetwork],
    x: torch.Tensor,
    input_age: float,
    target_age: float,
    reference: Optional[ReferenceImages],
    weights: LossWeights,
    flags: AblationFlags,
    extrapolation_age: Optional[float] = None,
) -> Tuple[LossReport, torch.Tensor]:
    """Every loss term for one photo; returns the itemized report and the re-aged output."""
    use_adapter = flags.use_adapter
    y_p, combined = personalized_reage(bundle, net, x, target_age, use_adapter=use_adapter)

    report = sam_forward_loss(bundle, y_p, x, target_age, weights)
    report.extend(sam_cycle_loss(bundle, net, y_p, x, input_age, weights, use_adapter=use_adapter))

    if not flags.use_personalized_aging_loss:
        report.skip("pers_age", weights.lambda_pers_age, "disabled")
    elif reference is None or len(_reference_images(reference)) == 0:
        report.skip("pers_age", weights.lambda_pers_age, "empty reference set")
    else:
        report.add("pers_age", personalized_aging_loss(bundle, y_p, reference), weights.lambda_pers_age)

    if flags.use_adaptive_wnorm:
        wnorm = adaptive_wnorm_loss(combined, bundle.mean_latent, input_age, target_age)
        report.add("wnorm", wnorm, weights.lambda_reg)
    else:
        report.skip("wnorm", weights.lambda_reg, "disabled")

    if not flags.use_extrapolation_reg:
        report.skip("reg_extra", weights.lambda_reg_extra, "disabled")
    elif extrapolation_age is None:
        report.skip("reg_extra", weights.lambda_reg_extra, "no extrapolation draw")
    else:
        y_ext, _ = personalized_reage(bundle, net, x, extrapolation_age, use_adapter=use_adapter)
        y_global = global_reage(bundle, x, extrapolation_age)
        report.add("reg_extra", extrapolation_regularization(bundle, y_ext, y_global, weights), weights.lambda_reg_extra)

    return report, y_p
