"""Age_MAE / ID_sim evaluation over fixed target-age grids, with report and plot output."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .adapter import AdapterNetwork, personalized_reage
from .backends import BackendBundle
from .data import AgedPhotoCollection
from .errors import DomainError, ManifestError
from .losses import ReferenceImages, ReferenceSet, build_reference_set, reference_similarities

logger = logging.getLogger(__name__)

# Sub-range columns per task, as (label, low, high) inclusive.
TASK_GRIDS = {
    "regression": (list(range(0, 71, 10)), (("50-70", 50, 70), ("30-70", 30, 70))),
    "progression": (list(range(40, 101, 10)), (("40-60", 40, 60),)),
}


@dataclass(frozen=True)
class EvalProtocol:
    task: str
    target_ages: Tuple[int, ...]
    sub_ranges: Tuple[Tuple[str, int, int], ...] = ()
    window: int = 3
    input_split: str = "test"
    reference_split: str = "reference"

    def __post_init__(self) -> None:
        for age in self.target_ages:
            if age % 10 != 0 or not 0 <= age <= 100:
                raise DomainError(f"target ages must be multiples of 10 within [0, 100], got {age}")

    @classmethod
    def for_task(cls, task: str, **kwargs) -> "EvalProtocol":
        if task not in TASK_GRIDS:
            raise DomainError(f"unknown task {task!r}; expected one of {', '.join(TASK_GRIDS)}")
        ages, sub_ranges = TASK_GRIDS[task]
        return cls(task=task, target_ages=tuple(ages), sub_ranges=tuple(sub_ranges), **kwargs)


def age_mae(predicted: float, target: float) -> float:
    return abs(float(predicted) - float(target))


def id_sim(bundle: BackendBundle, reaged: torch.Tensor, reference: ReferenceImages) -> Optional[float]:
    """Best cosine match against the reference photos; ``None`` when there are none."""
    images = reference.images if isinstance(reference, ReferenceSet) else reference
    if len(images) == 0:
        return None
    with torch.no_grad():
        return float(reference_similarities(bundle, reaged, images).max())


@dataclass
class AgeResult:
    target_age: int
    age_mae: float
    id_sim: Optional[float]
    reference_count: int


@dataclass
class EvalReport:
    task: str
    label: str
    ages: List[AgeResult]
    in_range: Tuple[float, float]
    sub_ranges: Tuple[Tuple[str, int, int], ...]
    config_hash: str = ""
    seed: int = 0
    aggregates: Dict[str, Optional[float]] = field(default_factory=dict)
    undefined_ages: List[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.aggregates:
            self.aggregates = self._aggregate()
        self.undefined_ages = [r.target_age for r in self.ages if r.id_sim is None]

    def _mean_id(self, low: float, high: float) -> Optional[float]:
        values = [r.id_sim for r in self.ages if r.id_sim is not None and low <= r.target_age <= high]
        return fmean(values) if values else None

    def _mean_mae(self, low: float, high: float) -> Optional[float]:
        values = [r.age_mae for r in self.ages if low <= r.target_age <= high]
        return fmean(values) if values else None

    def _aggregate(self) -> Dict[str, Optional[float]]:
        aggregates: Dict[str, Optional[float]] = {
            "age_mae": fmean(r.age_mae for r in self.ages) if self.ages else None,
            "id_sim": self._mean_id(0, 100),
            "id_sim_in_range": self._mean_id(*self.in_range),
            "age_mae_in_range": self._mean_mae(*self.in_range),
        }
        for label, low, high in self.sub_ranges:
            aggregates[f"id_sim_{label}"] = self._mean_id(low, high)
        return aggregates

    def per_age(self, metric: str) -> Dict[int, Optional[float]]:
        return {r.target_age: getattr(r, metric) for r in self.ages}

    def to_dict(self) -> Dict[str, object]:
        return {
            "task": self.task,
            "label": self.label,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "in_range": list(self.in_range),
            "ages": [asdict(r) for r in self.ages],
            "aggregates": self.aggregates,
            "undefined_ages": self.undefined_ages,
        }


def run_protocol(
    bundle: BackendBundle,
    net: Optional[AdapterNetwork],
    collection: AgedPhotoCollection,
    protocol: EvalProtocol,
    use_adapter: bool = True,
    label: str = "model",
    config_hash: str = "",
    seed: int = 0,
) -> EvalReport:
    """Re-age every test photo to every grid age and score it.

    Per-age values are means over test photos; the eval-mode estimator scores
    age and reference photos come only from the reference split.
    """
    inputs = collection.split(protocol.input_split)
    if not inputs:
        raise ManifestError(f"no {protocol.input_split} photos to evaluate")
    images = [collection.load_image(record, dtype=bundle.dtype) for record in inputs]
    results: List[AgeResult] = []
    for target in protocol.target_ages:
        reference = build_reference_set(
            collection,
            target,
            window_years=protocol.window,
            split=protocol.reference_split,
            max_window=protocol.window,
            dtype=bundle.dtype,
        )
        errors: List[float] = []
        sims: List[float] = []
        for image in images:
            with torch.no_grad():
                reaged, _ = personalized_reage(bundle, net, image, target, use_adapter=use_adapter)
                errors.append(age_mae(float(bundle.estimate_age(reaged, "eval")), target))
            sim = id_sim(bundle, reaged, reference)
            if sim is not None:
                sims.append(sim)
        if not sims:
            logger.warning("ID_sim undefined at age=%s: no reference photos within %s years", target, protocol.window)
        results.append(
            AgeResult(
                target_age=target,
                age_mae=fmean(errors),
                id_sim=fmean(sims) if sims else None,
                reference_count=len(reference),
            )
        )
    return EvalReport(
        task=protocol.task,
        label=label,
        ages=results,
        in_range=(collection.age_min, collection.age_max),
        sub_ranges=protocol.sub_ranges,
        config_hash=config_hash,
        seed=seed,
    )


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_report(report: EvalReport, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    csv_path = out_dir / "report.csv"
    write_summary_csv([report], csv_path)
    return [json_path, csv_path]


def write_summary_csv(reports: Sequence[EvalReport], path: Path) -> Path:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["label", "target_age", "age_mae", "id_sim", "reference_count", "config_hash", "seed"])
        for report in reports:
            for r in report.ages:
                writer.writerow(
                    [report.label, r.target_age, _fmt(r.age_mae), _fmt(r.id_sim), r.reference_count,
                     report.config_hash, report.seed]
                )
    return Path(path)


def read_summary_csv(path: Path) -> Dict[str, Dict[int, Tuple[float, Optional[float]]]]:
    """Inverse of ``write_summary_csv``: label -> age -> (age_mae, id_sim)."""
    table: Dict[str, Dict[int, Tuple[float, Optional[float]]]] = {}
    with Path(path).open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            sim = float(row["id_sim"]) if row["id_sim"] else None
            table.setdefault(row["label"], {})[int(row["target_age"])] = (float(row["age_mae"]), sim)
    return table


_METRIC_TITLES = {"age_mae": "Age MAE (years)", "id_sim": "ID similarity"}


def emit_plots(
    reports: EvalReport | Sequence[EvalReport],
    out_dir: Path,
) -> List[Path]:
    """One SVG curve per metric (all reports overlaid) plus ``summary.csv``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(reports, EvalReport):
        reports = [reports]
    out_dir = Path(out_dir)
    plot_dir = out_dir / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    with matplotlib.rc_context({"svg.fonttype": "none", "svg.hashsalt": "mytm"}):
        for metric, title in _METRIC_TITLES.items():
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for report in reports:
                points = [(age, value) for age, value in report.per_age(metric).items() if value is not None]
                if points:
                    xs, ys = zip(*points)
                    ax.plot(xs, ys, marker="o", label=report.label)
            ax.set_xlabel("target age (years)")
            ax.set_ylabel(title)
            if len(reports) > 1:
                ax.legend()
            path = plot_dir / f"{metric}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    written.append(write_summary_csv(reports, out_dir / "summary.csv"))
    return written
