# app/crud.py
from datetime import datetime
from typing import Optional, List
from sqlalchemy.orm import Session
from app import models
from app.models import Run, GridCell, CheckpointRecord
from app.schemas import GridCellOut


def create_run(db: Session, command: str, config_hash: str, config_json: str, seed: int, threads: int) -> Run:
    db_run = Run(
        command=command,
        config_hash=config_hash,
        config_json=config_json,
        seed=str(seed),
        threads=threads,
        status="running",
    )
    db.add(db_run)
    db.commit()
    db.refresh(db_run)
    return db_run


def finish_run(db: Session, run_id: int, status: str) -> Optional[Run]:
    db_run = db.query(Run).filter(Run.id == run_id).first()
    if not db_run:
        return None
    db_run.status = status
    db_run.finished_at = datetime.utcnow()
    db.commit()
    db.refresh(db_run)
    return db_run


def get_latest_run(db: Session, command: str, config_hash: Optional[str] = None) -> Optional[Run]:
    query = db.query(Run).filter(Run.command == command, Run.status != "running")
    if config_hash:
        query = query.filter(Run.config_hash == config_hash)
    return query.order_by(Run.id.desc()).first()


def save_grid_cell(db: Session, run_id: int, cell: GridCellOut) -> GridCell:
    db_cell = GridCell(run_id=run_id, **cell.model_dump())
    db.add(db_cell)
    db.commit()
    db.refresh(db_cell)
    return db_cell


def get_grid_cells(db: Session, run_id: int) -> List[GridCellOut]:
    rows = (db.query(models.GridCell)
            .filter(models.GridCell.run_id == run_id)
            .order_by(models.GridCell.variant, models.GridCell.target_size.desc(), models.GridCell.repeat)
            .all())
    return [GridCellOut.model_validate(row) for row in rows]


def record_checkpoint(db: Session, run_id: int, kind: str, path: str, sha256: str, config_hash: str,
                      failed: bool = False) -> CheckpointRecord:
    db_ckpt = CheckpointRecord(run_id=run_id, kind=kind, path=path, sha256=sha256,
                               config_hash=config_hash, failed=failed)
    db.add(db_ckpt)
    db.commit()
    db.refresh(db_ckpt)
    return db_ckpt


def get_checkpoints(db: Session, run_id: int) -> List[CheckpointRecord]:
    return db.query(CheckpointRecord).filter(CheckpointRecord.run_id == run_id).order_by(CheckpointRecord.id).all()
