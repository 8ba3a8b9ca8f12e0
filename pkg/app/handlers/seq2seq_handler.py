# app/handlers/seq2seq_handler.py
import os
import logging
from dataclasses import dataclass
from typing import Optional

from app.checkpoint import load_checkpoint, save_checkpoint
from app.dataset import index_stats, load_pairs, split_entries
from app.errors import ConfigError, ContractError, DataError
from app.featio import read_manifest
from app.handlers.context import CommandContext, register_checkpoint
from app.schemas import PostprocessFlags, RunConfig
from app.config import RunPaths, config_hash
from app.seq2seq import Seq2SeqCurve, Seq2SeqModel, train_seq2seq
from app.synth import target_subset
from app.tensor import derive_seed

logger = logging.getLogger(__name__)

PHASE_SPLITS = {
    "pretrain": ("tts-pretrain", "tts-valid"),
    "finetune": ("target-train", "target-valid"),
}


@dataclass
class PhaseResult:
    checkpoint: str
    sha256: str
    curve: Seq2SeqCurve


def checkpoint_name(phase: str, size: Optional[int]) -> str:
    if phase == "pretrain":
        return "pretrain.ckpt"
    if phase == "scratch":
        return f"scratch-{size}.ckpt"
    return f"finetune-{size}.ckpt"


def check_compatible(meta: dict, model: Seq2SeqModel, quantizer_sha: Optional[str]) -> None:
    """An init checkpoint must share vocabulary, postprocessing and architecture with the data and model."""
    expected = model.meta()
    problems = [f"{key}: checkpoint={meta.get(key)!r} data/model={expected[key]!r}"
                for key in ("groups", "codewords", "separate", "combine", "seq2seq") if meta.get(key) != expected[key]]
    if quantizer_sha and meta.get("quantizer_sha256") and meta["quantizer_sha256"] != quantizer_sha:
        problems.append("indices come from a different quantizer checkpoint than the init checkpoint saw")
    if problems:
        raise ContractError("init checkpoint does not match the training data: " + "; ".join(problems))


def run_phase(cfg: RunConfig, paths: RunPaths, flags: PostprocessFlags, phase: str, out_dir: str,
              size: Optional[int] = None, init: Optional[str] = None, seed: Optional[int] = None,
              steps: Optional[int] = None) -> PhaseResult:
    """
    Train one seq2seq phase. `pretrain` uses the TTS-pretrain speaker; `finetune`
    continues from `init` on the first `size` target utterances; `scratch` trains
    the same target set from a fresh initialisation.
    """
    if phase not in ("pretrain", "finetune", "scratch"):
        raise ConfigError(f"unknown phase '{phase}'")
    seed = cfg.seed if seed is None else seed
    train_split, valid_split = PHASE_SPLITS["pretrain" if phase == "pretrain" else "finetune"]
    if phase == "pretrain":
        train_entries = split_entries(paths, train_split)
    else:
        size = size or max(cfg.corpus.target_sizes)
        train_entries = target_subset(read_manifest(paths.manifest), size)
    valid_entries = split_entries(paths, valid_split)

    stats = index_stats(paths, flags.combine, train_split)
    pairs = load_pairs(paths, train_entries, flags.combine)
    valid_pairs = load_pairs(paths, valid_entries, flags.combine)
    model = Seq2SeqModel(cfg.seq2seq, int(stats["groups"]), int(stats["codewords"]),
                         separate_tables=flags.separate, combined=flags.combine,
                         seed=derive_seed(seed, f"seq2seq/init/{flags.variant}"))
    if model.cfg.feat_dim != pairs[0][1].frames.shape[1]:
        raise DataError(f"features have dim {pairs[0][1].frames.shape[1]} but seq2seq.feat_dim is {model.cfg.feat_dim}")

    if phase == "finetune":
        if not init:
            raise ConfigError("phase=finetune needs an init checkpoint (--init)")
        ckpt = load_checkpoint(init)
        check_compatible(ckpt.meta, model, stats.get("quantizer_sha256"))
        # all weights are loaded and trained; the optimizer starts fresh
        ckpt.apply(model.store, with_optimizer=False)
    elif init:
        logger.info(f"Ignoring init checkpoint {init} for phase={phase}")

    budget = cfg.budgets.pretrain_steps if phase == "pretrain" else cfg.budgets.finetune_steps
    label = f"{flags.variant}/{phase}" + (f"-{size}" if size else "")
    curve = train_seq2seq(model, pairs, steps or budget, cfg.budgets.batch_size, seed=seed,
                          valid_pairs=valid_pairs, label=label)

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, checkpoint_name(phase, size))
    meta = {**model.meta(), "phase": phase, "target_size": size, "variant": flags.variant,
            "quantizer_sha256": stats.get("quantizer_sha256"), "config_hash": config_hash(cfg), "seed": seed}
    digest = save_checkpoint(path, model.store, meta)
    stem = path[:-len(".ckpt")]
    with open(f"{stem}.train.tsv", "w", encoding="utf-8") as fh:
        fh.write(curve.train_tsv())
    with open(f"{stem}.valid.tsv", "w", encoding="utf-8") as fh:
        fh.write(curve.valid_tsv())
    return PhaseResult(path, digest, curve)


def handle_train_seq2seq(ctx: CommandContext) -> int:
    cfg, flags = ctx.cfg, ctx.cfg.postprocess
    phase = ctx.arg("phase", "pretrain")
    size = ctx.arg("target_size")
    init = ctx.arg("init")
    if size is not None and size not in cfg.corpus.target_sizes:
        logger.warning(f"⚠️ target size {size} is not one of the configured sizes {cfg.corpus.target_sizes}")
    out_dir = ctx.paths.seq2seq_dir(flags.variant)
    logger.info(f"🚀 Seq2seq {phase} for variant '{flags.variant}' into {out_dir}")
    result = run_phase(cfg, ctx.paths, flags, phase, out_dir, size=size, init=init, steps=ctx.arg("steps"))
    register_checkpoint(ctx, f"seq2seq-{phase}", result.checkpoint, result.sha256)
    logger.info(f"✅ Seq2seq checkpoint: {result.checkpoint} (validation L1 {result.curve.final_valid})")
    return 0
