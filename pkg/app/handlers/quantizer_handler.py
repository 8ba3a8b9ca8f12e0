# app/handlers/quantizer_handler.py
import os
import logging

from app.checkpoint import save_checkpoint
from app.config import prepare_output_dir
from app.dataset import split_entries
from app.errors import NumericError
from app.featio import read_signal
from app.handlers.context import CommandContext, register_checkpoint
from app.quantizer import QuantizerCurve, VQEncoder, pretrain_quantizer
from app.tensor import derive_seed

logger = logging.getLogger(__name__)


def _write_curve(path: str, curve: QuantizerCurve) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(curve.to_tsv())


def handle_pretrain_quantizer(ctx: CommandContext) -> int:
    cfg, paths = ctx.cfg, ctx.paths
    entries = split_entries(paths, "quantizer")
    signals = [read_signal(paths.resolve(e.signal_path)) for e in entries]
    prepare_output_dir(paths.quantizer_dir, cfg.force)

    model = VQEncoder(cfg.quantizer, cfg.contrastive, seed=derive_seed(cfg.seed, "quantizer/init"))
    meta = {**model.meta(), "config_hash": ctx.config_hash, "seed": cfg.seed}
    curve = QuantizerCurve([], [], [])
    steps = ctx.arg("steps", cfg.budgets.quantizer_steps)

    try:
        pretrain_quantizer(model, signals, steps, seed=cfg.seed, curve=curve)
    except NumericError as e:
        failed_path = f"{paths.quantizer_checkpoint}.failed"
        digest = save_checkpoint(failed_path, model.store, {**meta, "failed": True, "diagnostics": e.diagnostics})
        _write_curve(paths.quantizer_curve, curve)
        register_checkpoint(ctx, "quantizer", failed_path, digest, failed=True)
        logger.error(f"❌ Quantizer training diverged: {e} diagnostics={e.diagnostics}; partial checkpoint at {failed_path}")
        raise

    digest = save_checkpoint(paths.quantizer_checkpoint, model.store, meta)
    _write_curve(paths.quantizer_curve, curve)
    register_checkpoint(ctx, "quantizer", paths.quantizer_checkpoint, digest)
    logger.info(f"✅ Quantizer checkpoint: {paths.quantizer_checkpoint}; loss curve: {paths.quantizer_curve}")
    return 0


def quantizer_path(ctx: CommandContext) -> str:
    path = ctx.arg("quantizer", ctx.paths.quantizer_checkpoint)
    return os.path.abspath(path)
