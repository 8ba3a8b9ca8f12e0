# app/handlers/context.py
import argparse
import logging
from dataclasses import dataclass, field
from typing import Optional

from app import crud
from app.config import RunPaths, config_hash
from app.db import get_session
from app.schemas import RunConfig

logger = logging.getLogger(__name__)


@dataclass
class CommandContext:
    """Everything a command handler needs: validated config, run paths, raw CLI args and the registry run id."""
    cfg: RunConfig
    paths: RunPaths
    args: argparse.Namespace = field(default_factory=argparse.Namespace)
    run_id: Optional[int] = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg)

    def arg(self, name: str, default=None):
        value = getattr(self.args, name, None)
        return default if value is None else value


def register_checkpoint(ctx: CommandContext, kind: str, path: str, sha256: str, failed: bool = False) -> None:
    """Best-effort provenance entry; a registry failure never fails the command."""
    if ctx.run_id is None:
        return
    db = get_session(ctx.paths.registry)
    try:
        crud.record_checkpoint(db, ctx.run_id, kind, path, sha256, ctx.config_hash, failed=failed)
    except Exception as e:
        logger.error(f"Could not record checkpoint {path} in the registry: {e}", exc_info=True)
    finally:
        db.close()
