"""Component ladder and dataset-size sweeps over the trainer and evaluator."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backends import BackendBundle
from .config import AblationFlags, RunConfig, config_hash
from .data import AgedPhotoCollection, subsample_collection
from .errors import MyTMError
from .evaluator import EvalProtocol, EvalReport, run_protocol
from .trainer import load_adapter, train

logger = logging.getLogger(__name__)

_OFF = AblationFlags.all_off()

# (row name, slug, flags); ``None`` flags means evaluate the untouched global model.
COMPONENT_LADDER: Tuple[Tuple[str, str, Optional[AblationFlags]], ...] = (
    ("SAM", "sam", None),
    ("SAM pers. f.t.", "sam_ft", _OFF),
    ("+wnorm", "wnorm", _OFF.model_copy(update={"use_adaptive_wnorm": True})),
    ("+persage", "persage", _OFF.model_copy(update={"use_adaptive_wnorm": True, "use_personalized_aging_loss": True})),
    (
        "+extra",
        "extra",
        _OFF.model_copy(
            update={"use_adaptive_wnorm": True, "use_personalized_aging_loss": True, "use_extrapolation_reg": True}
        ),
    ),
    ("+adapter (full)", "full", AblationFlags()),
)

ADAPTER_LADDER: Tuple[Tuple[str, str, Optional[AblationFlags]], ...] = (
    ("SAM", "sam", None),
    ("adapter + SAM loss", "adapter_sam", _OFF.model_copy(update={"use_adapter": True})),
    ("+wnorm", "adapter_wnorm", _OFF.model_copy(update={"use_adapter": True, "use_adaptive_wnorm": True})),
    (
        "+persage",
        "adapter_persage",
        AblationFlags(use_extrapolation_reg=False),
    ),
    ("+extra (full)", "adapter_full", AblationFlags()),
)

LADDERS = {"component": COMPONENT_LADDER, "adapter": ADAPTER_LADDER}


@dataclass
class AblationRow:
    name: str
    status: str
    flags: Dict[str, bool] = field(default_factory=dict)
    train_size: Optional[int] = None
    age_mae: Optional[float] = None
    id_sim: Optional[float] = None
    id_sim_in_range: Optional[float] = None
    checkpoint: Optional[str] = None
    config_hash: str = ""
    seed: int = 0


def _row_from_report(name: str, report: EvalReport, **kwargs) -> AblationRow:
    return AblationRow(
        name=name,
        status="ok",
        age_mae=report.aggregates["age_mae"],
        id_sim=report.aggregates["id_sim"],
        id_sim_in_range=report.aggregates["id_sim_in_range"],
        config_hash=report.config_hash,
        seed=report.seed,
        **kwargs,
    )


def _baseline_row(
    bundle: BackendBundle,
    collection: AgedPhotoCollection,
    config: RunConfig,
    protocol: EvalProtocol,
    name: str = "SAM",
) -> AblationRow:
    report = run_protocol(
        bundle, None, collection, protocol, use_adapter=False, label=name,
        config_hash=config_hash(config), seed=config.seed,
    )
    return _row_from_report(name, report, flags=_OFF.model_dump(), train_size=len(collection.split("train")))


def _frozen_row(
    name: str,
    bundle: BackendBundle,
    collection: AgedPhotoCollection,
    config: RunConfig,
    protocol: EvalProtocol,
) -> AblationRow:
    # Without the adapter nothing is trainable, so the row scores the global model.
    logger.info("Ablation row %s has no trainable parameters; evaluating without training", name)
    report = run_protocol(
        bundle, None, collection, protocol, use_adapter=False, label=name,
        config_hash=config_hash(config), seed=config.seed,
    )
    return _row_from_report(name, report, flags=config.flags.model_dump(), train_size=len(collection.split("train")))


def _train_and_evaluate(
    name: str,
    slug: str,
    collection: AgedPhotoCollection,
    bundle: BackendBundle,
    config: RunConfig,
    protocol: EvalProtocol,
    out_dir: Path,
) -> AblationRow:
    flags = config.flags
    try:
        checkpoint = train(collection, bundle, config, out_dir / slug)
        net, _ = load_adapter(checkpoint, dtype=bundle.dtype)
        report = run_protocol(
            bundle, net, collection, protocol, use_adapter=flags.use_adapter, label=name,
            config_hash=config_hash(config), seed=config.seed,
        )
    except MyTMError as exc:
        logger.error("Ablation run %s failed: %s", name, exc)
        return AblationRow(
            name=name, status=f"failed: {exc}", flags=flags.model_dump(),
            config_hash=config_hash(config), seed=config.seed,
        )
    return _row_from_report(
        name, report, flags=flags.model_dump(), train_size=len(collection.split("train")), checkpoint=str(checkpoint)
    )


def run_ablation_ladder(
    collection: AgedPhotoCollection,
    bundle: BackendBundle,
    config: RunConfig,
    out_dir: Path,
    protocol: EvalProtocol,
    order: str = "component",
) -> List[AblationRow]:
    """Evaluate one row per ladder step, components added one at a time.

    Only rows with the adapter switched on are trained; the others have no
    trainable parameters and are scored directly.
    """
    rows: List[AblationRow] = []
    for name, slug, flags in LADDERS[order]:
        logger.info("Ablation ladder=%s row=%s", order, name)
        if flags is None:
            rows.append(_baseline_row(bundle, collection, config, protocol, name))
        elif not flags.use_adapter:
            rows.append(_frozen_row(name, bundle, collection, config.with_flags(flags), protocol))
        else:
            rows.append(
                _train_and_evaluate(name, slug, collection, bundle, config.with_flags(flags), protocol, Path(out_dir))
            )
    return rows


def run_dataset_size_ablation(
    collection: AgedPhotoCollection,
    bundle: BackendBundle,
    config: RunConfig,
    out_dir: Path,
    protocol: EvalProtocol,
    sizes: Sequence[int] = (10, 50, 100),
) -> List[AblationRow]:
    """Full method trained on stratified subsets; oversized requests are marked unavailable."""
    available = len(collection.split("train"))
    rows = [_baseline_row(bundle, collection, config, protocol)]
    for n in sizes:
        name = f"n={n}"
        if n > available:
            logger.warning("Dataset size %s unavailable: only %s train photos", n, available)
            rows.append(
                AblationRow(name=name, status="unavailable", train_size=n, config_hash=config_hash(config), seed=config.seed)
            )
            continue
        subset = subsample_collection(collection, n, np.random.default_rng(config.seed))
        if config.flags.use_adapter:
            row = _train_and_evaluate(name, f"size_{n}", subset, bundle, config, protocol, Path(out_dir))
        else:
            row = _frozen_row(name, bundle, subset, config, protocol)
        row.train_size = n
        rows.append(row)
    return rows


_COLUMNS = ("name", "status", "train_size", "age_mae", "id_sim", "id_sim_in_range", "checkpoint", "config_hash", "seed")


def write_table(rows: Sequence[AblationRow], out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ablation.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(_COLUMNS)
        for row in rows:
            values = asdict(row)
            writer.writerow(
                ["" if values[c] is None else (repr(values[c]) if isinstance(values[c], float) else values[c])
                 for c in _COLUMNS]
            )
    json_path = out_dir / "ablation.json"
    json_path.write_text(json.dumps([asdict(row) for row in rows], indent=2), encoding="utf-8")
    return [csv_path, json_path]
