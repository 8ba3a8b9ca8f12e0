# app/handlers/corpus_handler.py
import os
import logging
from functools import partial

from app.config import prepare_output_dir
from app.dataset import CORPUS_META, write_json
from app.featio import ManifestEntry, write_frames, write_manifest
from app.handlers.context import CommandContext
from app.scheduler import run_tasks
from app.synth import PlannedUtterance, plan_corpus, render_utterance

logger = logging.getLogger(__name__)


def render_entry(seed: int, corpus_dir: str, planned: PlannedUtterance) -> ManifestEntry:
    """Render one planned utterance, write its signal and feature files, return its manifest line."""
    utt = render_utterance(seed, planned.utt_id, planned.speaker, planned.symbols)
    signal_rel = os.path.join("signals", f"{planned.utt_id}.sig")
    feat_rel = os.path.join("feats", f"{planned.utt_id}.feat")
    write_frames(os.path.join(corpus_dir, signal_rel), utt.signal[:, None])
    write_frames(os.path.join(corpus_dir, feat_rel), utt.features)
    return ManifestEntry(planned.utt_id, planned.speaker, planned.split, planned.symbols, signal_rel, feat_rel)


def handle_gen_corpus(ctx: CommandContext) -> int:
    cfg, paths = ctx.cfg, ctx.paths
    logger.info(f"🚀 Generating synthetic corpus in {paths.corpus_dir} (seed {cfg.seed})")
    prepare_output_dir(paths.corpus_dir, cfg.force)

    plan = plan_corpus(cfg.corpus, cfg.seed)
    results = run_tasks(partial(render_entry, cfg.seed, paths.corpus_dir), plan,
                        workers=cfg.workers, threads=cfg.threads, label="utterances")
    entries = [r.value for r in results if r.ok]
    failed = len(results) - len(entries)

    write_manifest(paths.manifest, entries)
    split_sizes = {}
    for entry in entries:
        split_sizes[entry.split] = split_sizes.get(entry.split, 0) + 1
    write_json(os.path.join(paths.corpus_dir, CORPUS_META), {
        "seed": cfg.seed,
        "config_hash": ctx.config_hash,
        "splits": split_sizes,
        "corpus": cfg.corpus.model_dump(mode="json"),
    })

    for split, count in sorted(split_sizes.items()):
        logger.info(f"   {split}: {count} utterances")
    if failed:
        logger.error(f"❌ {failed} utterance(s) could not be rendered")
        return 3
    logger.info(f"✅ Corpus written: {len(entries)} utterances, manifest {paths.manifest}")
    return 0
