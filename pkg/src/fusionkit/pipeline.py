"""The fusion pipeline: pool -> validate -> merge -> save -> evaluate -> report."""

from __future__ import annotations

import contextlib
import fcntl
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint_io import atomic_write_bytes, save_map
from .config import RunConfig
from .errors import IoError
from .ensemble_eval import EvalReport, evaluate, load_dataset
from .merge_algorithms import MaskSet, MergeReport, merge
from .model_pool import task_vector_cosine_matrix
from .tensor_core import TensorMap

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    model: TensorMap
    merge_report: MergeReport
    eval_report: EvalReport | None = None
    masks: MaskSet | None = None


def masks_path(model_path: Path) -> Path:
    return model_path.with_name(model_path.name.removesuffix(".safetensors") + ".masks.safetensors")


def _checkpoint_metadata(report: MergeReport) -> dict[str, str]:
    return {
        "algorithm": report.algorithm,
        "parameters": json.dumps(report.to_dict()["parameters"], sort_keys=True),
    }


@contextlib.contextmanager
def output_lock(path: Path | None):
    """Advisory lock so two runs cannot target the same output at once.

    Uses ``flock`` on a sidecar file, so a crashed run never leaves it held.
    """
    if path is None:
        yield
        return
    lock = path.with_name(path.name + ".lock")
    try:
        lock.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(lock, os.O_CREAT | os.O_RDWR, 0o644)
    except OSError as exc:
        raise IoError(f"cannot create lock {lock}: {exc}") from None
    try:
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise IoError(f"another run is writing {path}") from None
        try:
            yield
        finally:
            with contextlib.suppress(OSError):
                os.unlink(lock)
    finally:
        os.close(fd)


def evaluate_tasks(model: TensorMap, cfg: RunConfig, algorithm=None, spec=None) -> EvalReport:
    tasks = [(t.name, load_dataset(t.path)) for t in cfg.taskpool or []]
    return evaluate(model, tasks, algorithm=algorithm, spec=spec)


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    """Run one configured fusion end to end.

    The pool is validated before anything is written. If evaluation fails
    after a successful merge, the saved checkpoint is kept and the error
    propagates.
    """
    pool = cfg.modelpool.build()
    pool.require_mergeable()
    with output_lock(cfg.merged_model_save_path):
        return _run_locked(cfg, pool)


def _run_locked(cfg: RunConfig, pool) -> PipelineResult:
    result = merge(pool, cfg.method)
    log.info("merged with %s in %.3fs", result.report.algorithm, result.report.seconds)
    if result.report.fallbacks:
        log.info("averaged without statistics: %s", ", ".join(result.report.fallbacks))

    if cfg.merged_model_save_path is not None:
        save_map(result.model, cfg.merged_model_save_path, _checkpoint_metadata(result.report))
        log.info("saved merged model to %s", cfg.merged_model_save_path)
        if result.masks is not None:
            flat = {f"{name}::{key}": m for name, masks in result.masks.items() for key, m in masks.items()}
            save_map(flat, masks_path(cfg.merged_model_save_path))

    out = PipelineResult(result.model, result.report, masks=result.masks)
    if cfg.taskpool:
        out.eval_report = evaluate_tasks(
            result.model, cfg, algorithm=result.report.algorithm, spec=result.report.parameters
        )
        if cfg.report_save_path is not None:
            out.eval_report.save(cfg.report_save_path)
            log.info("saved report to %s", cfg.report_save_path)
    return out


def inspect_taskvectors(cfg: RunConfig, json_path=None) -> tuple[list[str], np.ndarray]:
    names, matrix = task_vector_cosine_matrix(cfg.modelpool.build())
    if json_path is not None:
        doc = {"matrix": matrix.tolist(), "models": names}
        atomic_write_bytes(json_path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return names, matrix


def format_matrix(names: list[str], matrix: np.ndarray) -> str:
    width = max([len(n) for n in names] + [6])
    lines = [" " * width + " " + " ".join(n.rjust(width) for n in names)]
    for name, row in zip(names, matrix):
        lines.append(name.rjust(width) + " " + " ".join(f"{v:.2f}".rjust(width) for v in row))
    return "\n".join(lines)
