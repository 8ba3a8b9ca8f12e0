# app/handlers/eval_handler.py
import os
import json
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.config import RunPaths
from app.dataset import corpus_meta
from app.errors import DataError
from app.featio import ManifestEntry, read_frames, read_manifest
from app.handlers.context import CommandContext
from app.handlers.convert_handler import read_converted_index
from app.metrics import decode_symbols, error_rate, mcd_with_path, summarize, symbol_templates
from app.schemas import MetricReport
from app.synth import frame_labels, oracle_id, render_utterance, target_subset

logger = logging.getLogger(__name__)


def build_templates(corpus_seed: int, entries: Sequence[ManifestEntry]) -> np.ndarray:
    """Per-symbol mean features of the target speaker, using the alignment known from generation."""
    feats, labels = [], []
    for entry in entries:
        utt = render_utterance(corpus_seed, entry.utt_id, entry.speaker, entry.symbols)
        feats.append(utt.features)
        labels.append(frame_labels(utt))
    return symbol_templates(feats, labels)


def score_utterance(utt_id: str, converted: np.ndarray, truncated: bool, source_feats: np.ndarray,
                    oracle_feats: np.ndarray, symbols: str, templates: np.ndarray) -> MetricReport:
    conv = mcd_with_path(converted, oracle_feats, align=True)
    copy = mcd_with_path(source_feats, oracle_feats, align=True)
    return MetricReport(
        utt_id=utt_id,
        mcd=conv.mcd,
        mcd_copy=copy.mcd,
        path_length=conv.path_length,
        symbol_error_rate=error_rate(decode_symbols(converted, templates), symbols),
        truncated=truncated,
    )


class Evaluator:
    """Scores converted features against the oracle renders of the same symbols by the target speaker."""

    def __init__(self, paths: RunPaths, template_size: int):
        self.paths = paths
        self.manifest = {e.utt_id: e for e in read_manifest(paths.manifest)}
        seed = int(corpus_meta(paths)["seed"])
        self.templates = build_templates(seed, target_subset(list(self.manifest.values()), template_size))

    def score(self, utt_id: str, converted: np.ndarray, truncated: bool) -> MetricReport:
        source = self.manifest.get(utt_id)
        oracle = self.manifest.get(oracle_id(utt_id))
        if source is None or oracle is None:
            raise DataError(f"{utt_id}: no source utterance with an oracle render in the manifest")
        return score_utterance(utt_id, converted, truncated,
                               read_frames(self.paths.resolve(source.feat_path)),
                               read_frames(self.paths.resolve(oracle.feat_path)),
                               source.symbols, self.templates)

    def score_all(self, converted: Dict[str, Tuple[np.ndarray, bool]]) -> Tuple[List[MetricReport], int]:
        reports, failed = [], 0
        for utt_id in sorted(converted):
            frames, truncated = converted[utt_id]
            try:
                reports.append(self.score(utt_id, frames, truncated))
            except Exception as e:
                failed += 1
                logger.error(f"❌ Could not score {utt_id}: {e}", exc_info=True)
        return reports, failed


def summary(reports: Sequence[MetricReport]) -> dict:
    return {
        "n_utts": len(reports),
        "mcd_conv": summarize(r.mcd for r in reports),
        "mcd_copy": summarize(r.mcd_copy for r in reports),
        "symbol_error_rate": summarize(r.symbol_error_rate for r in reports),
        "success_rate": (sum(1 for r in reports if r.mcd < r.mcd_copy) / len(reports)) if reports else None,
        "truncated": sum(1 for r in reports if r.truncated),
    }


def write_reports(path: str, reports: Sequence[MetricReport]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(json.dumps(report.model_dump(mode="json"), sort_keys=True) + "\n")


def handle_eval(ctx: CommandContext) -> int:
    variant = ctx.cfg.postprocess.variant
    converted_dir = ctx.arg("converted", ctx.paths.converted_dir(variant))
    rows = read_converted_index(converted_dir)
    logger.info(f"🚀 Evaluating {len(rows)} converted utterance(s) from {converted_dir}")

    evaluator = Evaluator(ctx.paths, max(ctx.cfg.corpus.target_sizes))
    converted = {utt_id: (read_frames(os.path.join(converted_dir, f"{utt_id}.feat")), truncated)
                 for utt_id, truncated in rows}
    reports, failed = evaluator.score_all(converted)

    out_path = os.path.join(ctx.paths.reports_dir, f"eval-{variant.replace('+', '_')}.jsonl")
    write_reports(out_path, reports)
    stats = summary(reports)
    logger.info(f"   mcd_conv={stats['mcd_conv']} mcd_copy={stats['mcd_copy']} "
                f"ser={stats['symbol_error_rate']} success={stats['success_rate']} truncated={stats['truncated']}")
    if failed:
        logger.error(f"❌ {failed} utterance(s) could not be scored")
        return 3
    logger.info(f"✅ Evaluation written to {out_path}")
    return 0
