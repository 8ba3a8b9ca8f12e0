# app/webhook.py
import logging
import threading
from typing import List, Optional

from fastapi import APIRouter, FastAPI, File, HTTPException, Response, UploadFile

from app import crud
from app.db import get_session
from app.errors import ContractError, DataError
from app.featio import decode_frames, encode_frames
from app.handlers.convert_handler import check_quantizer, convert_signal
from app.quantizer import load_quantizer
from app.schemas import GridCellOut
from app.seq2seq import load_seq2seq

logger = logging.getLogger(__name__)

FEAT_MEDIA_TYPE = "application/octet-stream"


def create_app(quantizer_path: str, seq2seq_path: str, registry_path: Optional[str] = None) -> FastAPI:
    """
    Conversion service over a fixed pair of checkpoints. The request carries only
    the source signal; there is no field for a source speaker.
    """
    qmodel = load_quantizer(quantizer_path)
    smodel, meta = load_seq2seq(seq2seq_path)
    check_quantizer(meta, quantizer_path, seq2seq_path)
    # the autodiff engine keeps its no-grad flag in module state
    lock = threading.Lock()
    logger.info(f"🚀 Conversion service ready: quantizer={quantizer_path} seq2seq={seq2seq_path} "
                f"(front-end {smodel.mode}, combine={smodel.combined})")

    app = FastAPI(title="vqvc conversion service")
    router = APIRouter()

    @router.get("/ping")
    def ping():
        return {"status": "ok", "front_end": smodel.mode, "combine": smodel.combined}

    @router.post("/convert")
    def convert(file: UploadFile = File(...)):
        payload = file.file.read()
        try:
            frames = decode_frames(payload, source=file.filename or "<upload>")
            if frames.shape[1] != 1:
                raise DataError(f"expected a signal file with frame dim 1, got dim {frames.shape[1]}")
            with lock:
                result = convert_signal(qmodel, smodel, frames[:, 0], utt_id=file.filename or "")
        except (DataError, ContractError) as e:
            logger.warning(f"⚠️ Rejected upload {file.filename}: {e}")
            raise HTTPException(status_code=400, detail=str(e))
        except Exception as e:
            logger.error(f"❌ Conversion failed for {file.filename}: {e}", exc_info=True)
            raise HTTPException(status_code=500, detail="Conversion failed. Internal server error.")
        logger.info(f"✅ Converted {file.filename}: {len(result)} frames, truncated={result.truncated}")
        return Response(content=encode_frames(result.frames), media_type=FEAT_MEDIA_TYPE,
                        headers={"X-Truncated": "1" if result.truncated else "0"})

    @router.get("/grid", response_model=List[GridCellOut])
    def grid():
        if not registry_path:
            raise HTTPException(status_code=404, detail="No run registry configured")
        db = get_session(registry_path)
        try:
            run = crud.get_latest_run(db, "run-grid")
            if run is None:
                raise HTTPException(status_code=404, detail="No finished grid run in the registry")
            return crud.get_grid_cells(db, run.id)
        finally:
            db.close()

    app.include_router(router)
    return app
