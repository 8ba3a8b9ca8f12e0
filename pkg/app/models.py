# app/models.py
from datetime import datetime
from sqlalchemy import Column, Integer, String, DateTime, ForeignKey, Text, Float, Boolean
from sqlalchemy.orm import relationship
from app.db import Base


class Run(Base):
    __tablename__ = "runs"
    id = Column(Integer, primary_key=True, index=True, autoincrement=True)
    command = Column(String(50), nullable=False)
    config_hash = Column(String(64), nullable=False, index=True)
    config_json = Column(Text, nullable=False)
    seed = Column(String(24), nullable=False)
    threads = Column(Integer, nullable=False, default=1)
    status = Column(String(20), nullable=False, default="running")
    created_at = Column(DateTime, nullable=False, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)
    cells = relationship("GridCell", back_populates="run", cascade="all, delete-orphan")
    checkpoints = relationship("CheckpointRecord", back_populates="run", cascade="all, delete-orphan")


class GridCell(Base):
    __tablename__ = "grid_cells"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    variant = Column(String(32), nullable=False)
    target_size = Column(Integer, nullable=False)
    repeat = Column(Integer, nullable=False, default=0)
    status = Column(String(20), nullable=False)
    mcd_conv = Column(Float, nullable=True)
    mcd_copy = Column(Float, nullable=True)
    symbol_error_rate = Column(Float, nullable=True)
    success_rate = Column(Float, nullable=True)
    valid_l1 = Column(Float, nullable=True)
    scratch_valid_l1 = Column(Float, nullable=True)
    n_utts = Column(Integer, nullable=False, default=0)
    error = Column(Text, nullable=True)
    run = relationship("Run", back_populates="cells")


class CheckpointRecord(Base):
    __tablename__ = "checkpoints"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    kind = Column(String(32), nullable=False)
    path = Column(Text, nullable=False)
    sha256 = Column(String(64), nullable=False)
    config_hash = Column(String(64), nullable=False)
    failed = Column(Boolean, nullable=False, default=False)
    created_at = Column(DateTime, nullable=False, default=datetime.utcnow)
    run = relationship("Run", back_populates="checkpoints")
