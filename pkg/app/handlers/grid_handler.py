# app/handlers/grid_handler.py
"""
The ablation grid: postprocess variants x target-set sizes, every cell trained
from the same quantizer checkpoint and, per variant and repeat, the same
TTS-pretrain checkpoint.
"""
import os
import logging
from dataclasses import dataclass
from typing import List

from app import crud
from app.config import RunPaths
from app.dataset import load_indices
from app.db import get_session
from app.errors import DataError
from app.featio import entries_for, read_manifest
from app.handlers.context import CommandContext
from app.handlers.eval_handler import Evaluator, summary
from app.handlers.extract_handler import DEFAULT_SPLITS, ensure_extracted
from app.handlers.quantizer_handler import quantizer_path
from app.handlers.seq2seq_handler import run_phase
from app.report_generator import render_grid
from app.scheduler import run_tasks
from app.schemas import GridCellOut, PostprocessFlags, RunConfig
from app.seq2seq import load_seq2seq
from app.tensor import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class GridJob:
    cfg: RunConfig
    out: str
    variant: str
    repeat: int


def _failed_cells(job: GridJob, error: str) -> List[GridCellOut]:
    return [GridCellOut(variant=job.variant, target_size=size, repeat=job.repeat, status="failed", error=error)
            for size in job.cfg.corpus.target_sizes]


def evaluate_checkpoint(paths: RunPaths, checkpoint: str, flags: PostprocessFlags, n_eval: int,
                        evaluator: Evaluator) -> dict:
    """Convert the first `n_eval` test utterances from their index dumps and score them."""
    model, _ = load_seq2seq(checkpoint)
    entries = entries_for(read_manifest(paths.manifest), "test")[:n_eval]
    indices = load_indices(paths, entries, flags.combine)
    converted = {}
    for entry in entries:
        result = model.convert(indices[entry.utt_id])
        converted[entry.utt_id] = (result.frames, result.truncated)
    reports, _ = evaluator.score_all(converted)
    return summary(reports)


def run_cell_group(job: GridJob) -> List[GridCellOut]:
    """One variant and repeat: TTS-pretrain once, then finetune and evaluate every target size."""
    cfg, paths = job.cfg, RunPaths(job.out)
    flags = PostprocessFlags.from_variant(job.variant)
    seed = derive_seed(cfg.seed, f"grid/repeat{job.repeat}")
    out_dir = paths.grid_cell_dir(job.variant, job.repeat)
    evaluator = Evaluator(paths, max(cfg.corpus.target_sizes))

    pretrain = run_phase(cfg, paths, flags, "pretrain", out_dir, seed=seed)
    smallest = min(cfg.corpus.target_sizes)
    cells = []
    for size in cfg.corpus.target_sizes:
        try:
            finetune = run_phase(cfg, paths, flags, "finetune", out_dir, size=size, init=pretrain.checkpoint, seed=seed)
            scores = evaluate_checkpoint(paths, finetune.checkpoint, flags, cfg.grid.n_eval, evaluator)
            scratch_l1 = None
            if cfg.grid.scratch_control and flags.combine and flags.separate and size == smallest:
                scratch_l1 = run_phase(cfg, paths, flags, "scratch", out_dir, size=size, seed=seed).curve.final_valid
            cells.append(GridCellOut(
                variant=job.variant, target_size=size, repeat=job.repeat, status="ok",
                mcd_conv=scores["mcd_conv"], mcd_copy=scores["mcd_copy"],
                symbol_error_rate=scores["symbol_error_rate"], success_rate=scores["success_rate"],
                valid_l1=finetune.curve.final_valid, scratch_valid_l1=scratch_l1, n_utts=scores["n_utts"],
            ))
            logger.info(f"✅ Cell {job.variant}/{size}/r{job.repeat}: mcd_conv={scores['mcd_conv']} "
                        f"mcd_copy={scores['mcd_copy']} ser={scores['symbol_error_rate']}")
        except Exception as e:
            logger.error(f"❌ Cell {job.variant}/{size}/r{job.repeat} failed: {e}", exc_info=True)
            cells.append(GridCellOut(variant=job.variant, target_size=size, repeat=job.repeat,
                                     status="failed", error=f"{type(e).__name__}: {e}"))
    return cells


def _render_from_registry(ctx: CommandContext) -> int:
    db = get_session(ctx.paths.registry)
    try:
        run = crud.get_latest_run(db, "run-grid", ctx.config_hash)
        if run is None:
            raise DataError(f"no finished grid run with config hash {ctx.config_hash[:12]} in {ctx.paths.registry}")
        cells = crud.get_grid_cells(db, run.id)
    finally:
        db.close()
    logger.info(f"🚀 Re-rendering grid report of run {run.id} ({len(cells)} cells) without retraining")
    render_grid(cells, ctx.cfg, ctx.paths)
    return 0


def handle_run_grid(ctx: CommandContext) -> int:
    if ctx.arg("render_only", False):
        return _render_from_registry(ctx)

    cfg, paths = ctx.cfg, ctx.paths
    checkpoint = quantizer_path(ctx)
    if not os.path.isfile(checkpoint):
        raise DataError(f"quantizer checkpoint {checkpoint} not found; run pretrain-quantizer first")
    variants = cfg.grid.variants
    for combined in sorted({PostprocessFlags.from_variant(v).combine for v in variants}):
        if ensure_extracted(ctx, checkpoint, DEFAULT_SPLITS, combined):
            logger.warning("⚠️ Some utterances could not be extracted; affected cells may fail")

    jobs = [GridJob(cfg, paths.out, variant, repeat) for variant in variants for repeat in range(cfg.grid.repeats)]
    logger.info(f"🚀 Grid: {len(variants)} variant(s) x {len(cfg.corpus.target_sizes)} size(s) "
                f"x {cfg.grid.repeats} repeat(s)")
    results = run_tasks(run_cell_group, jobs, workers=cfg.workers, threads=cfg.threads, label="grid cell groups")

    cells: List[GridCellOut] = []
    for result in results:
        cells.extend(result.value if result.ok else _failed_cells(result.item, result.error))

    if ctx.run_id is not None:
        db = get_session(paths.registry)
        try:
            for cell in cells:
                crud.save_grid_cell(db, ctx.run_id, cell)
        except Exception as e:
            logger.error(f"Could not store grid cells in the registry: {e}", exc_info=True)
        finally:
            db.close()

    render_grid(cells, cfg, paths)
    failed = sum(1 for c in cells if c.status != "ok")
    if failed:
        logger.error(f"❌ {failed} of {len(cells)} grid cell(s) failed")
        return 3
    logger.info(f"✅ Grid finished: {len(cells)} cells, report in {paths.reports_dir}")
    return 0
