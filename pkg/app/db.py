# app/db.py
import os
import logging
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker, declarative_base
from sqlalchemy.orm import Session

from app.errors import DataError

logger = logging.getLogger(__name__)

# --- START: ENGINE MANAGEMENT PER REGISTRY FILE ---

# Engines are cached per registry path; every run directory has its own registry.
_engines = {}

# This is the central Base for all SQLAlchemy models.
Base = declarative_base()


def get_engine(registry_path: str):
    """
    Creates (once) and returns the engine for a SQLite registry file, creating
    the tables on first use.
    """
    key = os.path.abspath(registry_path)
    if key in _engines:
        return _engines[key]

    os.makedirs(os.path.dirname(key), exist_ok=True)
    try:
        engine = create_engine(f"sqlite:///{key}")
        # models must be imported so their tables are registered on Base
        from app import models  # noqa: F401
        Base.metadata.create_all(bind=engine)
    except Exception as e:
        raise DataError(f"Failed to open the run registry at '{key}': {e}") from e
    _engines[key] = engine
    logger.debug(f"Registry engine ready: {key}")
    return engine


def get_session(registry_path: str) -> Session:
    """
    Creates a new session on the registry. Callers close it in a try/finally block.
    """
    SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=get_engine(registry_path))
    return SessionLocal()


def dispose_engines() -> None:
    for engine in _engines.values():
        engine.dispose()
    _engines.clear()

# --- END: ENGINE MANAGEMENT PER REGISTRY FILE ---
