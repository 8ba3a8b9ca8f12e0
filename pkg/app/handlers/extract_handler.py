# app/handlers/extract_handler.py
import os
import logging
from functools import partial
from typing import Dict, List, Sequence

from app.checkpoint import file_digest
from app.dataset import INDEX_STATS, read_json, write_json
from app.featio import ManifestEntry, entries_for, read_manifest, read_signal
from app.handlers.context import CommandContext
from app.handlers.quantizer_handler import quantizer_path
from app.postprocess import combine, read_dump_dir, vocab_stats, write_dump
from app.quantizer import VQEncoder, load_quantizer
from app.scheduler import run_tasks

logger = logging.getLogger(__name__)

# Splits the seq2seq phases and the evaluation read indices from.
DEFAULT_SPLITS = ("tts-pretrain", "tts-valid", "target-train", "target-valid", "valid", "test")

# Per-process cache so workers load the quantizer once.
_models: Dict[tuple, VQEncoder] = {}


def _model(path: str) -> VQEncoder:
    key = (path, os.stat(path).st_mtime_ns) if os.path.exists(path) else (path, 0)
    if key not in _models:
        _models[key] = load_quantizer(path)
    return _models[key]


def extract_entry(checkpoint: str, corpus_dir: str, out_dir: str, combined: bool, entry: ManifestEntry) -> int:
    """Quantize one utterance and write its dump; returns the number of tuples written."""
    signal_path = entry.signal_path if os.path.isabs(entry.signal_path) else os.path.join(corpus_dir, entry.signal_path)
    seq = _model(checkpoint).extract_indices(read_signal(signal_path), utt_id=entry.utt_id)
    if combined:
        seq = combine(seq)
    write_dump(os.path.join(out_dir, f"{entry.utt_id}.idx"), seq)
    return len(seq)


def extract_split(ctx: CommandContext, checkpoint: str, split: str, entries: List[ManifestEntry], combined: bool) -> int:
    """Extract every utterance of a split; returns the number of failed utterances."""
    out_dir = ctx.paths.index_dir(combined, split)
    os.makedirs(out_dir, exist_ok=True)
    results = run_tasks(partial(extract_entry, checkpoint, ctx.paths.corpus_dir, out_dir, combined), entries,
                        workers=ctx.cfg.workers, threads=ctx.cfg.threads, label=f"{split} utterances")
    good = [r.item.utt_id for r in results if r.ok]
    failed = len(results) - len(good)
    if good:
        stats = vocab_stats(read_dump_dir(out_dir, good))
        write_json(os.path.join(out_dir, INDEX_STATS), {
            **stats.model_dump(mode="json"),
            "combined": combined,
            "split": split,
            "quantizer_sha256": file_digest(checkpoint),
            "failed": failed,
        })
        reduction = "n/a" if stats.reduction_ratio is None else f"{stats.reduction_ratio:.3f}"
        logger.info(f"   {split}: {stats.utterances} utterances, {stats.unique_combinations} unique combinations, "
                    f"perplexity {[round(p, 2) for p in stats.perplexities]}, reduction {reduction}")
    return failed


def ensure_extracted(ctx: CommandContext, checkpoint: str, splits: Sequence[str], combined: bool) -> int:
    """Extract the splits whose dumps are missing or stem from another quantizer checkpoint."""
    manifest = read_manifest(ctx.paths.manifest)
    digest = file_digest(checkpoint)
    failed = 0
    for split in splits:
        stats_path = os.path.join(ctx.paths.index_dir(combined, split), INDEX_STATS)
        if os.path.isfile(stats_path):
            stats = read_json(stats_path)
            if stats.get("quantizer_sha256") == digest and not stats.get("failed"):
                continue
        failed += extract_split(ctx, checkpoint, split, entries_for(manifest, split), combined)
    return failed


def handle_extract(ctx: CommandContext) -> int:
    checkpoint = quantizer_path(ctx)
    combined = ctx.cfg.postprocess.combine
    splits = ctx.arg("split") or list(DEFAULT_SPLITS)
    manifest = read_manifest(ctx.paths.manifest)
    logger.info(f"🚀 Extracting indices with {checkpoint} (combine={combined}) for splits {splits}")

    failed = 0
    for split in splits:
        entries = entries_for(manifest, split)
        if not entries:
            logger.warning(f"⚠️ Split '{split}' has no utterances in the manifest. Skipping.")
            continue
        failed += extract_split(ctx, checkpoint, split, entries, combined)

    if failed:
        logger.error(f"❌ {failed} utterance(s) could not be extracted")
        return 3
    logger.info("✅ Index extraction finished")
    return 0
