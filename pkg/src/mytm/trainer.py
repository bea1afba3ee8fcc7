"""Adapter personalization loop with resumable checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .adapter import AdapterNetwork, build_adapter
from .backends import BackendBundle
from .config import AdapterConfig, TrainingConfig, config_hash
from .data import AgedPhotoCollection, sample_extrapolation_age, sample_target_age
from .errors import BackendError, CheckpointError, NoExtrapolationRangeError
from .losses import LossReport, build_reference_set, total_personalization_loss

logger = logging.getLogger(__name__)

LOSS_CSV_HEADER = "iteration,term,value,weight,contribution"
CHECKPOINT_FILES = ("adapter.pt", "optimizer.pt", "losses.csv")


@dataclass
class TrainingState:
    iteration: int
    net: AdapterNetwork
    optimizer: Optional[torch.optim.Optimizer]
    rng: np.random.Generator
    loss_rows: List[str] = field(default_factory=list)
    # (iteration, "target" | "extrapolation", age)
    age_log: List[Tuple[int, str, float]] = field(default_factory=list)


def make_optimizer(net: AdapterNetwork, config: TrainingConfig) -> torch.optim.Optimizer:
    params = [p for p in net.parameters() if p.requires_grad]
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    if config.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=config.learning_rate)
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=0.9)


def init_state(bundle: BackendBundle, config: TrainingConfig) -> TrainingState:
    net = build_adapter(config.adapter, seed=config.seed, dtype=bundle.dtype)
    optimizer = None
    if config.use_adapter:
        optimizer = make_optimizer(net, config)
    else:
        net.requires_grad_(False)
    return TrainingState(iteration=0, net=net, optimizer=optimizer, rng=np.random.default_rng(config.seed))


def _mean_report(reports: List[LossReport]) -> LossReport:
    if len(reports) == 1:
        return reports[0]
    merged = LossReport()
    for group in zip(*(report.terms for report in reports)):
        values = [term.value for term in group if term.value is not None]
        head = group[0]
        if not values:
            merged.skip(head.name, head.weight, head.reason)
        else:
            merged.add(head.name, torch.stack(values).mean(), head.weight)
    return merged


def format_loss_rows(iteration: int, report: LossReport) -> List[str]:
    """CSV rows with ``repr`` floats so reruns and resumes write identical bytes."""
    rows = []
    for term in report.terms:
        if term.value is None:
            rows.append(f"{iteration},{term.name},skipped,{term.weight!r},0.0")
        else:
            value = float(term.value)
            rows.append(f"{iteration},{term.name},{value!r},{term.weight!r},{term.weight * value!r}")
    total = float(report.total)
    rows.append(f"{iteration},total,{total!r},1.0,{total!r}")
    return rows


def train_step(
    state: TrainingState,
    collection: AgedPhotoCollection,
    bundle: BackendBundle,
    config: TrainingConfig,
) -> Tuple[TrainingState, LossReport]:
    """One optimization step. A backend failure leaves ``state`` untouched."""
    train = collection.split("train")
    snapshot = state.rng.bit_generator.state
    iteration = state.iteration + 1
    ages: List[Tuple[int, str, float]] = []
    try:
        reports = []
        for _ in range(config.batch_size):
            record = train[int(state.rng.integers(len(train)))]
            x = collection.load_image(record, dtype=bundle.dtype)
            target_age = sample_target_age(collection, state.rng)
            ages.append((iteration, "target", target_age))
            extrapolation_age = None
            if config.use_extrapolation_reg and state.rng.random() < config.p_extrapolate:
                try:
                    extrapolation_age = sample_extrapolation_age(collection, state.rng)
                    ages.append((iteration, "extrapolation", extrapolation_age))
                except NoExtrapolationRangeError:
                    logger.debug("No extrapolation range; skipping replay branch")
            reference = None
            if config.use_personalized_aging_loss:
                reference = build_reference_set(
                    collection,
                    target_age,
                    window_years=config.reference_window,
                    split="train",
                    max_window=config.reference_max_window,
                    dtype=bundle.dtype,
                )
            report, _ = total_personalization_loss(
                bundle,
                state.net,
                x,
                record.age_years,
                target_age,
                reference,
                config.weights,
                config.flags,
                extrapolation_age=extrapolation_age,
            )
            reports.append(report)
        report = _mean_report(reports)
        if state.optimizer is not None:
            state.optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            state.optimizer.step()
    except BackendError:
        state.rng.bit_generator.state = snapshot
        raise
    state.iteration = iteration
    state.age_log.extend(ages)
    state.loss_rows.extend(format_loss_rows(iteration, report))
    logger.debug("iteration=%s terms=%s", iteration, report.as_dict())
    return state, report


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def loss_csv_text(rows: List[str]) -> str:
    return "\n".join([LOSS_CSV_HEADER, *rows]) + "\n"


def save_checkpoint(
    state: TrainingState,
    path: Path,
    collection: AgedPhotoCollection,
    config: TrainingConfig,
    backend_name: str,
) -> Path:
    """Write ``adapter.pt``, ``optimizer.pt``, ``losses.csv`` and ``metadata.json``.

    Files go to a sibling temp directory that replaces ``path`` only once complete.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    torch.save(state.net.state_dict(), tmp / "adapter.pt")
    torch.save(state.optimizer.state_dict() if state.optimizer is not None else {}, tmp / "optimizer.pt")
    (tmp / "losses.csv").write_text(loss_csv_text(state.loss_rows), encoding="utf-8")
    metadata: Dict[str, Any] = {
        "age_min": collection.age_min,
        "age_max": collection.age_max,
        "iteration": state.iteration,
        "config_hash": config_hash(config),
        "backend_name": backend_name,
        "seed": config.seed,
        "adapter_config": state.net.config.model_dump(),
        "training_config": config.model_dump(mode="json"),
        "rng_state": state.rng.bit_generator.state,
        "age_log": [list(entry) for entry in state.age_log],
        "files": {name: _sha256(tmp / name) for name in CHECKPOINT_FILES},
    }
    (tmp / "metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True), encoding="utf-8")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    logger.info("Saved checkpoint iteration=%s path=%s", state.iteration, path)
    return path


@dataclass
class Checkpoint:
    path: Path
    metadata: Dict[str, Any]
    net: AdapterNetwork
    optimizer_state: Dict[str, Any]
    loss_rows: List[str]


def read_metadata(path: Path) -> Dict[str, Any]:
    meta_path = Path(path) / "metadata.json"
    try:
        return json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint metadata not found: {meta_path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint metadata is not valid JSON: {meta_path}") from exc


def load_checkpoint(path: Path, dtype: Optional[torch.dtype] = None) -> Checkpoint:
    """Verify file hashes against metadata and rebuild the adapter."""
    path = Path(path)
    metadata = read_metadata(path)
    hashes = metadata.get("files")
    if not isinstance(hashes, dict):
        raise CheckpointError(f"checkpoint metadata in {path} has no file hashes")
    unlisted = [name for name in CHECKPOINT_FILES if name not in hashes]
    if unlisted:
        raise CheckpointError(f"checkpoint metadata in {path} has no hash for {', '.join(unlisted)}")
    for name, expected in hashes.items():
        file_path = path / name
        if not file_path.is_file():
            raise CheckpointError(f"checkpoint file missing: {file_path}")
        if _sha256(file_path) != expected:
            raise CheckpointError(f"checkpoint file {name} does not match its metadata hash")
    try:
        net = AdapterNetwork(AdapterConfig(**metadata["adapter_config"]))
        state_dict = torch.load(path / "adapter.pt", map_location="cpu", weights_only=True)
        saved_dtype = next(iter(state_dict.values())).dtype
        net = net.to(saved_dtype)
        net.load_state_dict(state_dict)
        optimizer_state = torch.load(path / "optimizer.pt", map_location="cpu", weights_only=True)
    except (KeyError, ValueError, RuntimeError, OSError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot restore checkpoint {path}: {exc}") from exc
    if dtype is not None:
        net = net.to(dtype)
    rows = (path / "losses.csv").read_text(encoding="utf-8").splitlines()[1:]
    return Checkpoint(path, metadata, net, optimizer_state, rows)


def load_adapter(path: Path, dtype: Optional[torch.dtype] = None) -> Tuple[AdapterNetwork, Dict[str, Any]]:
    """Frozen adapter for inference plus its metadata."""
    checkpoint = load_checkpoint(path, dtype=dtype)
    net = checkpoint.net.eval()
    net.requires_grad_(False)
    return net, checkpoint.metadata


def restore_state(checkpoint: Checkpoint, config: TrainingConfig) -> TrainingState:
    net = checkpoint.net
    optimizer = None
    if config.use_adapter:
        optimizer = make_optimizer(net, config)
        if checkpoint.optimizer_state:
            optimizer.load_state_dict(checkpoint.optimizer_state)
    else:
        net.requires_grad_(False)
    rng = np.random.default_rng()
    rng.bit_generator.state = checkpoint.metadata["rng_state"]
    if checkpoint.metadata.get("config_hash") != config_hash(config):
        logger.warning("Resuming with a different config than checkpoint %s was written with", checkpoint.path)
    return TrainingState(
        iteration=int(checkpoint.metadata["iteration"]),
        net=net,
        optimizer=optimizer,
        rng=rng,
        loss_rows=list(checkpoint.loss_rows),
        age_log=[(int(i), str(kind), float(age)) for i, kind, age in checkpoint.metadata.get("age_log", [])],
    )


def train(
    collection: AgedPhotoCollection,
    bundle: BackendBundle,
    config: TrainingConfig,
    out_dir: Path,
    resume_from: Optional[Path] = None,
    progress: bool = False,
) -> Path:
    """Run to ``config.iterations`` and return the final checkpoint directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state = restore_state(load_checkpoint(resume_from, dtype=bundle.dtype), config)
        logger.info("Resuming from %s at iteration=%s", resume_from, state.iteration)
    else:
        state = init_state(bundle, config)
    logger.info(
        "Training iterations=%s backend=%s seed=%s config_hash=%s",
        config.iterations,
        bundle.name,
        config.seed,
        config_hash(config),
    )

    final = out_dir / f"ckpt_{config.iterations}"
    steps = range(state.iteration, config.iterations)
    for _ in tqdm(steps, disable=not progress, desc="train"):
        _, report = train_step(state, collection, bundle, config)
        if state.iteration % config.log_every == 0:
            logger.info("iteration=%s total=%.6f", state.iteration, float(report.total))
        if state.iteration % config.checkpoint_every == 0 or state.iteration == config.iterations:
            save_checkpoint(state, out_dir / f"ckpt_{state.iteration}", collection, config, bundle.name)
            write_text_atomic(out_dir / "losses.csv", loss_csv_text(state.loss_rows))
    if not final.exists():
        save_checkpoint(state, final, collection, config, bundle.name)
        write_text_atomic(out_dir / "losses.csv", loss_csv_text(state.loss_rows))
    return final
