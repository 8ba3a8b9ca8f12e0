# test_pipeline.py
import hashlib
import json
import math
import os
import shutil

import pytest

from app import crud
from app.checkpoint import load_checkpoint
from app.config import RunPaths, load_config
from app.db import get_session
from app.errors import NumericError
from app.featio import read_frames, read_manifest
from app.handlers.command_router import route_command
from app.metrics import mcd
from app.models import Run
from app.postprocess import read_dump_dir
from app.scheduler import run_tasks
from app.schemas import PostprocessFlags, TrainingBudgets
from app.synth import render_utterance
from conftest import cli_args, tiny_config


def sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture(scope="module")
def trained(prepared_run):
    """Pretrain, then finetune on the smaller target set, for the default variant."""
    paths = RunPaths(prepared_run.out)
    assert route_command("train-seq2seq", prepared_run, cli_args(phase="pretrain")) == 0
    pretrain = os.path.join(paths.seq2seq_dir("combine+separate"), "pretrain.ckpt")
    assert route_command("train-seq2seq", prepared_run, cli_args(phase="finetune", init=pretrain, target_size=2)) == 0
    finetune = os.path.join(paths.seq2seq_dir("combine+separate"), "finetune-2.ckpt")
    return prepared_run, pretrain, finetune


def test_corpus_and_indices_are_on_disk(prepared_run):
    paths = RunPaths(prepared_run.out)
    manifest = read_manifest(paths.manifest)
    assert len(manifest) == 8 + 6 + 2 + 4 + 2 + 2 * 2 + 3 * 2
    for entry in manifest:
        assert read_frames(paths.resolve(entry.feat_path)).shape[1] == 16
    test_dumps = os.listdir(paths.index_dir(True, "test"))
    assert sorted(test_dumps) == sorted([f"{e.utt_id}.idx" for e in manifest if e.split == "test"] + ["stats.json"])
    assert os.path.isfile(paths.quantizer_curve)


def test_stats_file_matches_a_recount_of_the_dumps(prepared_run):
    paths = RunPaths(prepared_run.out)
    for split in ("test", "target-train"):
        directory = paths.index_dir(True, split)
        with open(os.path.join(directory, "stats.json"), encoding="utf-8") as fh:
            stats = json.load(fh)
        seqs = read_dump_dir(directory)
        ratios = [1.0 - len(s) / s.frame_count for s in seqs]
        assert stats["reduction_ratio"] == pytest.approx(sum(ratios) / len(ratios), abs=1e-12)
        assert stats["frames"] == sum(s.frame_count for s in seqs)
        assert stats["utterances"] == len(seqs)


def test_every_command_is_registered(prepared_run):
    db = get_session(RunPaths(prepared_run.out).registry)
    try:
        ok_runs = {}
        for run in db.query(Run).filter(Run.status == "ok").order_by(Run.id):
            ok_runs.setdefault(run.command, run)
        assert {"gen-corpus", "pretrain-quantizer", "extract"} <= set(ok_runs)
        quantizer_run = ok_runs["pretrain-quantizer"]
        kinds = [c.kind for c in crud.get_checkpoints(db, quantizer_run.id)]
        assert kinds == ["quantizer"]
    finally:
        db.close()


def test_finetune_starts_from_pretrained_weights(trained):
    _, pretrain, finetune = trained
    before, after = load_checkpoint(pretrain), load_checkpoint(finetune)
    assert after.meta["phase"] == "finetune" and after.meta["target_size"] == 2
    assert after.meta["quantizer_sha256"] == before.meta["quantizer_sha256"]
    assert after.step == 2
    assert before.params.keys() == after.params.keys()
    for stem in (pretrain, finetune):
        assert os.path.isfile(stem[:-len(".ckpt")] + ".train.tsv")


def test_convert_then_eval(trained):
    cfg, _, finetune = trained
    paths = RunPaths(cfg.out)
    assert route_command("convert", cfg, cli_args(seq2seq=finetune)) == 0
    out_dir = paths.converted_dir("combine+separate")
    with open(os.path.join(out_dir, "index.tsv"), encoding="utf-8") as fh:
        rows = fh.read().splitlines()
    assert rows[0] == "utt_id\tframes\ttruncated"
    assert len(rows) == 1 + 3
    for row in rows[1:]:
        utt_id, frames, _ = row.split("\t")
        assert read_frames(os.path.join(out_dir, f"{utt_id}.feat")).shape == (int(frames), 16)

    assert route_command("eval", cfg) == 0
    with open(os.path.join(paths.reports_dir, "eval-combine_separate.jsonl"), encoding="utf-8") as fh:
        reports = fh.read().splitlines()
    assert len(reports) == 3


def test_convert_refuses_a_different_postprocess_variant(trained):
    cfg, _, finetune = trained
    frame_level = cfg.model_copy(update={"postprocess": PostprocessFlags(combine=False, separate=True)})
    assert route_command("convert", frame_level, cli_args(seq2seq=finetune)) == 2


def test_finetune_without_init_is_a_config_error(prepared_run):
    assert route_command("train-seq2seq", prepared_run, cli_args(phase="finetune", target_size=2)) == 2


def test_unknown_command_and_existing_output(prepared_run):
    assert route_command("dance", prepared_run) == 2
    # refuses to overwrite; nothing is removed
    assert route_command("gen-corpus", prepared_run) == 2
    assert os.path.isfile(RunPaths(prepared_run.out).manifest)


def test_missing_manifest_is_a_data_error(tmp_path):
    assert route_command("extract", tiny_config(str(tmp_path / "empty"))) == 3


def test_diverging_quantizer_leaves_a_failed_checkpoint(prepared_run, tmp_path, monkeypatch):
    cfg = tiny_config(str(tmp_path / "run"))
    shutil.copytree(RunPaths(prepared_run.out).corpus_dir, RunPaths(cfg.out).corpus_dir)

    def diverge(model, signals, steps, seed, curve=None, on_eval=None):
        raise NumericError("loss is not finite", diagnostics={"step": 0})

    monkeypatch.setattr("app.handlers.quantizer_handler.pretrain_quantizer", diverge)
    assert route_command("pretrain-quantizer", cfg) == 4
    failed = load_checkpoint(RunPaths(cfg.out).quantizer_checkpoint + ".failed")
    assert failed.meta["failed"] is True
    assert failed.meta["diagnostics"] == {"step": 0}


def test_same_seed_gives_identical_artifacts(prepared_run, tmp_path):
    cfg = tiny_config(str(tmp_path / "again"))
    assert route_command("gen-corpus", cfg) == 0
    assert route_command("pretrain-quantizer", cfg) == 0
    first, second = RunPaths(prepared_run.out), RunPaths(cfg.out)
    assert sha(first.manifest) == sha(second.manifest)
    for entry in read_manifest(first.manifest)[:5]:
        assert sha(first.resolve(entry.feat_path)) == sha(second.resolve(entry.feat_path))
    assert sha(first.quantizer_checkpoint) == sha(second.quantizer_checkpoint)


def test_worker_count_does_not_change_the_corpus(prepared_run, tmp_path):
    cfg = tiny_config(str(tmp_path / "parallel"), workers=2)
    assert route_command("gen-corpus", cfg) == 0
    assert sha(RunPaths(cfg.out).manifest) == sha(RunPaths(prepared_run.out).manifest)


def test_failing_tasks_do_not_stop_the_others():
    results = run_tasks(math.sqrt, [4.0, -1.0, 9.0], workers=2)
    assert [r.value for r in results] == [2.0, None, 3.0]
    assert [r.ok for r in results] == [True, False, True]
    assert results[1].error.startswith("ValueError")


def test_grid_and_render_only(trained):
    cfg, _, _ = trained
    paths = RunPaths(cfg.out)
    assert route_command("run-grid", cfg) == 0
    assert os.path.isfile(os.path.join(paths.reports_dir, "grid.jsonl"))
    assert os.path.isfile(os.path.join(paths.reports_dir, "grid.xlsx"))
    db = get_session(paths.registry)
    try:
        cells = crud.get_grid_cells(db, crud.get_latest_run(db, "run-grid").id)
    finally:
        db.close()
    assert {(c.variant, c.target_size) for c in cells} == {
        (v, s) for v in ("none", "separate", "combine+separate") for s in (4, 2)}
    assert all(c.status == "ok" for c in cells)
    assert any(c.scratch_valid_l1 is not None for c in cells)

    os.remove(os.path.join(paths.reports_dir, "grid.jsonl"))
    assert route_command("run-grid", cfg, cli_args(render_only=True)) == 0
    assert os.path.isfile(os.path.join(paths.reports_dir, "grid.jsonl"))


def test_render_only_without_a_previous_grid(tmp_path):
    assert route_command("run-grid", tiny_config(str(tmp_path / "fresh")), cli_args(render_only=True)) == 3


@pytest.mark.slow
def test_target_utterance_converts_back_to_its_own_voice(tmp_path):
    cfg = load_config(overrides={"seed": 5, "out": str(tmp_path / "self")})
    cfg = cfg.model_copy(update={
        "corpus": cfg.corpus.model_copy(update={"target_sizes": [40]}),
        "budgets": TrainingBudgets(quantizer_steps=1500, pretrain_steps=2000, finetune_steps=1000),
    })
    for command in ("gen-corpus", "pretrain-quantizer", "extract"):
        assert route_command(command, cfg) == 0, command
    paths = RunPaths(cfg.out)
    s2s_dir = paths.seq2seq_dir("combine+separate")
    assert route_command("train-seq2seq", cfg, cli_args(phase="pretrain")) == 0
    assert route_command("train-seq2seq", cfg, cli_args(phase="finetune", target_size=40,
                                                       init=os.path.join(s2s_dir, "pretrain.ckpt"))) == 0

    entries = [e for e in read_manifest(paths.manifest) if e.split == "target-train"][:5]
    out_dir = str(tmp_path / "converted")
    assert route_command("convert", cfg, cli_args(seq2seq=os.path.join(s2s_dir, "finetune-40.ckpt"), output=out_dir,
                                                  input=[paths.resolve(e.signal_path) for e in entries])) == 0
    others = cfg.corpus.quantizer_speakers + cfg.corpus.source_speakers + [cfg.corpus.pretrain_speaker]
    for entry in entries:
        converted = read_frames(os.path.join(out_dir, f"{os.path.splitext(os.path.basename(entry.signal_path))[0]}.feat"))
        own = mcd(converted, read_frames(paths.resolve(entry.feat_path)))
        for speaker in others:
            rendering = render_utterance(cfg.seed, entry.utt_id, speaker, entry.symbols)
            assert own < mcd(converted, rendering.features), (entry.utt_id, speaker)
