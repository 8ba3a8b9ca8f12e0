# app/handlers/convert_handler.py
import os
import logging
from typing import List, Optional, Tuple

import numpy as np

from app.checkpoint import file_digest
from app.errors import ConfigError, ContractError, DataError
from app.featio import entries_for, read_manifest, read_signal, write_frames
from app.handlers.context import CommandContext
from app.handlers.quantizer_handler import quantizer_path
from app.postprocess import apply_flags
from app.quantizer import VQEncoder, load_quantizer
from app.schemas import PostprocessFlags
from app.seq2seq import AcousticSeq, Seq2SeqModel, load_seq2seq

logger = logging.getLogger(__name__)

CONVERTED_INDEX = "index.tsv"


def convert_signal(qmodel: VQEncoder, smodel: Seq2SeqModel, signal: np.ndarray, utt_id: str = "",
                   max_len: Optional[int] = None) -> AcousticSeq:
    """Raw samples in, target-speaker features out. Nothing about the source speaker is needed."""
    seq = apply_flags(qmodel.extract_indices(signal, utt_id=utt_id), smodel.combined)
    return smodel.convert(seq, max_len=max_len)


def check_flags(flags: PostprocessFlags, meta: dict, path: str) -> None:
    """Conversion must postprocess indices exactly as the model saw them in training."""
    trained = PostprocessFlags(combine=bool(meta.get("combine")), separate=bool(meta.get("separate")))
    if trained != flags:
        raise ConfigError(
            f"{path} was trained with postprocess variant '{trained.variant}' "
            f"(combine={trained.combine}, separate={trained.separate}) but the config asks for '{flags.variant}'. "
            f"Set [postprocess] to match the checkpoint or convert with a checkpoint of the requested variant."
        )


def check_quantizer(meta: dict, quantizer: str, path: str) -> None:
    recorded = meta.get("quantizer_sha256")
    if recorded and recorded != file_digest(quantizer):
        raise ContractError(f"{path} was trained on indices from a different quantizer than {quantizer}")


def default_seq2seq_path(ctx: CommandContext) -> str:
    size = max(ctx.cfg.corpus.target_sizes)
    return os.path.join(ctx.paths.seq2seq_dir(ctx.cfg.postprocess.variant), f"finetune-{size}.ckpt")


def _inputs(ctx: CommandContext) -> List[Tuple[str, str]]:
    """(utt_id, signal path) pairs from --input files or from a manifest split."""
    files = ctx.arg("input") or []
    if files:
        return [(os.path.splitext(os.path.basename(f))[0], f) for f in files]
    split = ctx.arg("split", "test")
    entries = entries_for(read_manifest(ctx.paths.manifest), split)
    if not entries:
        raise ConfigError(f"split '{split}' has no utterances to convert")
    return [(e.utt_id, ctx.paths.resolve(e.signal_path)) for e in entries]


def handle_convert(ctx: CommandContext) -> int:
    quantizer = quantizer_path(ctx)
    seq2seq_path = os.path.abspath(ctx.arg("seq2seq", default_seq2seq_path(ctx)))
    smodel, meta = load_seq2seq(seq2seq_path)
    check_flags(ctx.cfg.postprocess, meta, seq2seq_path)
    check_quantizer(meta, quantizer, seq2seq_path)
    qmodel = load_quantizer(quantizer)

    out_dir = ctx.arg("output", ctx.paths.converted_dir(ctx.cfg.postprocess.variant))
    os.makedirs(out_dir, exist_ok=True)
    inputs = _inputs(ctx)
    logger.info(f"🚀 Converting {len(inputs)} utterance(s) with {seq2seq_path} into {out_dir}")

    rows, failed, truncated = [], 0, 0
    for utt_id, signal_path in inputs:
        try:
            result = convert_signal(qmodel, smodel, read_signal(signal_path), utt_id=utt_id)
        except Exception as e:
            failed += 1
            logger.error(f"❌ Could not convert {utt_id} ({signal_path}): {e}", exc_info=True)
            continue
        write_frames(os.path.join(out_dir, f"{utt_id}.feat"), result.frames)
        if result.truncated:
            truncated += 1
            logger.warning(f"⚠️ {utt_id}: no stop predicted, output truncated at {len(result)} frames")
        rows.append(f"{utt_id}\t{len(result)}\t{int(result.truncated)}\n")

    with open(os.path.join(out_dir, CONVERTED_INDEX), "w", encoding="utf-8") as fh:
        fh.write("utt_id\tframes\ttruncated\n")
        fh.writelines(rows)

    if failed:
        logger.error(f"❌ {failed} of {len(inputs)} utterance(s) failed to convert")
        return 3
    logger.info(f"✅ Converted {len(rows)} utterance(s), {truncated} truncated")
    return 0


def read_converted_index(out_dir: str) -> List[Tuple[str, bool]]:
    path = os.path.join(out_dir, CONVERTED_INDEX)
    if not os.path.isfile(path):
        raise DataError(f"no converted outputs found: {path} is missing (run convert first)")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()[1:]
    rows = []
    for line in lines:
        utt_id, _, flag = line.split("\t")
        rows.append((utt_id, flag == "1"))
    return rows
