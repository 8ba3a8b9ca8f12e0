# conftest.py
import argparse
import logging

import numpy as np
import pytest

from app.schemas import (ContrastiveConfig, ConvLayer, CorpusSpec, EncoderConfig, GridConfig, QuantizerConfig,
                         RunConfig, Seq2SeqConfig, TrainingBudgets)
from app.tensor import precision

logging.basicConfig(level=logging.INFO)


def tiny_corpus() -> CorpusSpec:
    return CorpusSpec(
        quantizer_speakers=["q0", "q1"],
        n_utts_each=4,
        n_pretrain_utts=6,
        n_pretrain_valid=2,
        target_sizes=[4, 2],
        n_target_valid=2,
        source_speakers=["src0", "src1"],
        n_valid=2,
        n_test=3,
        min_symbols=4,
        max_symbols=6,
    )


def tiny_seq2seq() -> Seq2SeqConfig:
    return Seq2SeqConfig(emb_dim=4, model_dim=16, heads=2, encoder_layers=1, decoder_layers=1,
                         ffn_dim=32, prenet_dim=16, max_len_factor=3, log_every=1000)


def tiny_config(out: str, **changes) -> RunConfig:
    """A run small enough for the whole pipeline to finish in seconds."""
    cfg = RunConfig(
        seed=7,
        out=out,
        corpus=tiny_corpus(),
        contrastive=ContrastiveConfig(n_negatives=4, log_every=1000, eval_every=1000),
        seq2seq=tiny_seq2seq(),
        budgets=TrainingBudgets(quantizer_steps=4, pretrain_steps=3, finetune_steps=2, batch_size=2),
        grid=GridConfig(variants=["none", "separate", "combine+separate"], repeats=1, n_eval=2),
    )
    return cfg.model_copy(update=changes)


def small_quantizer(groups: int = 2, codewords: int = 4, dim: int = 8) -> QuantizerConfig:
    """Receptive field 10, stride 5."""
    encoder = EncoderConfig(layers=[ConvLayer(channels=dim, kernel=5, stride=5), ConvLayer(channels=dim, kernel=2, stride=1)],
                            aggregator_layers=1, aggregator_kernel=2)
    return QuantizerConfig(dim=dim, groups=groups, codewords=codewords, encoder=encoder)


def cli_args(**values) -> argparse.Namespace:
    return argparse.Namespace(**values)


@pytest.fixture
def float64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def run_cfg(tmp_path):
    return tiny_config(str(tmp_path / "run"))


@pytest.fixture(scope="session")
def prepared_run(tmp_path_factory):
    """Corpus, quantizer and combined index dumps, shared by the pipeline tests. Tests may add outputs, never remove them."""
    from app.handlers.command_router import route_command

    cfg = tiny_config(str(tmp_path_factory.mktemp("prepared") / "run"))
    assert route_command("gen-corpus", cfg) == 0
    assert route_command("pretrain-quantizer", cfg) == 0
    assert route_command("extract", cfg) == 0
    return cfg


# --- START: FINITE-DIFFERENCE GRADIENT CHECK ---

def numeric_grad(value_fn, arrays, eps: float = 1e-6):
    """Central differences of a scalar function with respect to every element of every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            original = a[idx]
            a[idx] = original + eps
            plus = value_fn(*arrays)
            a[idx] = original - eps
            minus = value_fn(*arrays)
            a[idx] = original
            g[idx] = (plus - minus) / (2 * eps)
        grads.append(g)
    return grads


def gradcheck(build, *arrays, rtol: float = 1e-5, atol: float = 1e-7):
    """
    `build` maps Tensors to a scalar Tensor. Compares backward() against central
    differences in float64.
    """
    from app import tensor as T

    with precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]

        def value(*arrs):
            with T.no_grad():
                return build(*[T.Tensor(x) for x in arrs]).item()

        params = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
        build(*params).backward()
        for n, (param, expected) in enumerate(zip(params, numeric_grad(value, arrays))):
            assert param.grad is not None, f"input {n} received no gradient"
            np.testing.assert_allclose(param.grad, expected, rtol=rtol, atol=atol, err_msg=f"input {n}")

# --- END: FINITE-DIFFERENCE GRADIENT CHECK ---
