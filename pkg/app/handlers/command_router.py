# app/handlers/command_router.py
import argparse
import logging
from typing import Callable, Dict, Optional

from app import crud
from app.config import RunPaths, canonical_json, config_hash
from app.db import get_session
from app.errors import VQVCError
from app.handlers.context import CommandContext
from app.handlers.convert_handler import handle_convert
from app.handlers.corpus_handler import handle_gen_corpus
from app.handlers.eval_handler import handle_eval
from app.handlers.extract_handler import handle_extract
from app.handlers.grid_handler import handle_run_grid
from app.handlers.quantizer_handler import handle_pretrain_quantizer
from app.handlers.seq2seq_handler import handle_train_seq2seq
from app.schemas import RunConfig
from app.tensor import set_detect_anomaly

logger = logging.getLogger(__name__)

ROUTES: Dict[str, Callable[[CommandContext], int]] = {
    "gen-corpus": handle_gen_corpus,
    "pretrain-quantizer": handle_pretrain_quantizer,
    "extract": handle_extract,
    "train-seq2seq": handle_train_seq2seq,
    "convert": handle_convert,
    "eval": handle_eval,
    "run-grid": handle_run_grid,
}


def _start_run(paths: RunPaths, command: str, cfg: RunConfig) -> Optional[int]:
    db = get_session(paths.registry)
    try:
        return crud.create_run(db, command, config_hash(cfg), canonical_json(cfg), cfg.seed, cfg.threads).id
    except Exception as e:
        logger.error(f"Could not register the run: {e}", exc_info=True)
        return None
    finally:
        db.close()


def _finish_run(paths: RunPaths, run_id: Optional[int], status: str) -> None:
    if run_id is None:
        return
    db = get_session(paths.registry)
    try:
        crud.finish_run(db, run_id, status)
    except Exception as e:
        logger.error(f"Could not close run {run_id} in the registry: {e}", exc_info=True)
    finally:
        db.close()


def route_command(command: str, cfg: RunConfig, args: Optional[argparse.Namespace] = None) -> int:
    """
    Dispatch one command to its handler and return the process exit code.
    Every invocation is recorded in the run registry.
    """
    handler = ROUTES.get(command)
    if handler is None:
        logger.error(f"❌ Unknown command '{command}'. Known commands: {', '.join(ROUTES)}")
        return 2

    set_detect_anomaly(cfg.detect_anomaly)
    paths = RunPaths(cfg.out)
    run_id = None
    status = "failed"
    try:
        run_id = _start_run(paths, command, cfg)
        ctx = CommandContext(cfg=cfg, paths=paths, args=args or argparse.Namespace(), run_id=run_id)
        logger.info(f"🚀 {command} (seed {cfg.seed}, config {config_hash(cfg)[:12]}, out {paths.out})")
        code = handler(ctx)
        status = "ok" if code == 0 else "partial"
        return code
    except VQVCError as e:
        logger.error(f"❌ {command} failed: {type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"❌ Unexpected error in {command}: {e}", exc_info=True)
        return 1
    finally:
        _finish_run(paths, run_id, status)
