# app/seq2seq.py
"""
Transformer-TTS style encoder-decoder from postprocessed index sequences to
acoustic frames, with a stop-token head.

Front-end modes:
  separate  one flat table of G*V rows (width emb_dim); the G lookups of a
            tuple are concatenated (G*emb_dim) and projected to model_dim.
  joint     one table of V^G rows (width model_dim) indexed by the joint id.
Layers are pre-norm; the decoder consumes the previous frames through a
two-layer ReLU prenet and uses a causal self-attention mask.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from app import tensor as T
from app.checkpoint import load_checkpoint
from app.errors import ContractError, NumericError
from app.nn import (Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore, adam_step,
                    clip_grad_norm)
from app.postprocess import IndexSeq, joint_ids, separate_frames, table_rows
from app.schemas import Seq2SeqConfig
from app.tensor import RngState, Tensor

logger = logging.getLogger(__name__)


@dataclass
class AcousticSeq:
    frames: np.ndarray                       # (m, feat_dim)
    stop_labels: Optional[np.ndarray] = None  # (m,), single 1 at the last frame
    truncated: bool = False

    @classmethod
    def target(cls, frames: np.ndarray) -> "AcousticSeq":
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 2 or len(frames) == 0:
            raise ContractError(f"target frames must be a nonempty (m, dim) array, got {list(frames.shape)}")
        labels = np.zeros(len(frames), dtype=np.float32)
        labels[-1] = 1.0
        return cls(frames, labels)

    def __len__(self):
        return len(self.frames)


@dataclass
class EncoderStates:
    h: Tensor
    attention: List[np.ndarray] = field(default_factory=list)  # per layer, (heads, n, n)

    def __len__(self):
        return self.h.shape[0]


def positional_encoding(length: int, dim: int) -> np.ndarray:
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)[:, :dim // 2]
    return table


class _EncoderLayer:
    def __init__(self, store: ParamStore, name: str, cfg: Seq2SeqConfig):
        self.norm1 = LayerNorm(store, f"{name}/ln1", cfg.model_dim)
        self.attn = MultiHeadAttention(store, f"{name}/self", cfg.model_dim, cfg.heads)
        self.norm2 = LayerNorm(store, f"{name}/ln2", cfg.model_dim)
        self.ffn = FeedForward(store, f"{name}", cfg.model_dim, cfg.ffn_dim)

    def __call__(self, x: Tensor) -> Tuple[Tensor, np.ndarray]:
        normed = self.norm1(x)
        attended, weights = self.attn(normed, normed)
        x = T.add(x, attended)
        x = T.add(x, self.ffn(self.norm2(x)))
        return x, weights


class _DecoderLayer:
    def __init__(self, store: ParamStore, name: str, cfg: Seq2SeqConfig):
        self.norm1 = LayerNorm(store, f"{name}/ln1", cfg.model_dim)
        self.self_attn = MultiHeadAttention(store, f"{name}/self", cfg.model_dim, cfg.heads)
        self.norm2 = LayerNorm(store, f"{name}/ln2", cfg.model_dim)
        self.cross_attn = MultiHeadAttention(store, f"{name}/cross", cfg.model_dim, cfg.heads)
        self.norm3 = LayerNorm(store, f"{name}/ln3", cfg.model_dim)
        self.ffn = FeedForward(store, f"{name}", cfg.model_dim, cfg.ffn_dim)

    def __call__(self, y: Tensor, memory: Tensor) -> Tuple[Tensor, np.ndarray]:
        normed = self.norm1(y)
        attended, _ = self.self_attn(normed, normed, causal=True)
        y = T.add(y, attended)
        context, cross = self.cross_attn(self.norm2(y), memory)
        y = T.add(y, context)
        y = T.add(y, self.ffn(self.norm3(y)))
        return y, cross


class Seq2SeqModel:
    def __init__(self, cfg: Seq2SeqConfig, groups: int, codewords: int, separate_tables: bool = True,
                 combined: bool = True, seed: int = 0, store: Optional[ParamStore] = None):
        self.cfg = cfg
        self.groups, self.codewords = groups, codewords
        self.separate_tables = separate_tables
        self.combined = combined
        self.store = store or ParamStore(seed)
        rows = table_rows(codewords, groups, separate_tables)

        if separate_tables:
            self.table = Embedding(self.store, "s2s/embed", rows, cfg.emb_dim)
            width = groups * cfg.emb_dim
            if cfg.use_projection:
                self.projection = Linear(self.store, "s2s/embed/proj", width, cfg.model_dim)
            elif width != cfg.model_dim:
                raise ContractError(f"without a projection G*emb_dim ({width}) must equal model_dim ({cfg.model_dim})")
            else:
                self.projection = None
        else:
            self.table = Embedding(self.store, "s2s/embed", rows, cfg.model_dim)
            self.projection = None

        self.encoder_layers = [_EncoderLayer(self.store, f"s2s/enc{n}", cfg) for n in range(cfg.encoder_layers)]
        self.encoder_norm = LayerNorm(self.store, "s2s/enc_norm", cfg.model_dim)
        self.prenet = [Linear(self.store, "s2s/prenet0", cfg.feat_dim, cfg.prenet_dim),
                       Linear(self.store, "s2s/prenet1", cfg.prenet_dim, cfg.model_dim)]
        self.decoder_layers = [_DecoderLayer(self.store, f"s2s/dec{n}", cfg) for n in range(cfg.decoder_layers)]
        self.decoder_norm = LayerNorm(self.store, "s2s/dec_norm", cfg.model_dim)
        self.frame_out = Linear(self.store, "s2s/out", cfg.model_dim, cfg.feat_dim)
        self.stop_out = Linear(self.store, "s2s/stop", cfg.model_dim, 1)

    @property
    def mode(self) -> str:
        return "separate" if self.separate_tables else "joint"

    def meta(self) -> dict:
        return {
            "kind": "seq2seq",
            "seq2seq": self.cfg.model_dump(mode="json"),
            "groups": self.groups,
            "codewords": self.codewords,
            "separate": self.separate_tables,
            "combine": self.combined,
        }

    # --- front end ---

    def concat_embeddings(self, seq: IndexSeq) -> Tensor:
        """Separate mode only: the G table rows of each tuple side by side, (n, G*emb_dim)."""
        ids = separate_frames(seq.frames, self.codewords)
        looked_up = self.table(ids)  # (n, G, emb)
        return T.reshape(looked_up, (len(seq), self.groups * self.cfg.emb_dim))

    def embed_front_end(self, seq: IndexSeq) -> Tensor:
        if seq.groups != self.groups or seq.codewords != self.codewords:
            raise ContractError(f"index vocabulary G={seq.groups} V={seq.codewords} does not match the model "
                                f"(G={self.groups} V={self.codewords})")
        if seq.combined != self.combined:
            raise ContractError(f"model expects {'combined' if self.combined else 'frame-level'} indices")
        if len(seq) == 0:
            raise ContractError("cannot embed an empty index sequence")
        if self.separate_tables:
            x = self.concat_embeddings(seq)
            if self.projection is not None:
                x = self.projection(x)
        else:
            x = self.table(joint_ids(seq.frames, self.codewords))
        return T.add(x, positional_encoding(len(seq), self.cfg.model_dim))

    # --- encoder ---

    def encode_tokens(self, embeddings: Tensor) -> EncoderStates:
        if embeddings.shape[0] == 0:
            raise ContractError("encoder needs at least one token")
        x = embeddings
        maps = []
        for layer in self.encoder_layers:
            x, weights = layer(x)
            maps.append(weights)
        return EncoderStates(self.encoder_norm(x), maps)

    def encode(self, seq: IndexSeq) -> EncoderStates:
        return self.encode_tokens(self.embed_front_end(seq))

    # --- decoder ---

    def decode_frames(self, states: EncoderStates, previous: np.ndarray) -> Tuple[Tensor, Tensor, List[np.ndarray]]:
        """previous: (m, feat_dim) decoder inputs. Returns frame predictions, stop logits (m,) and cross-attention maps."""
        y = T.relu(self.prenet[0](Tensor(previous)))
        y = T.relu(self.prenet[1](y))
        y = T.add(y, positional_encoding(len(previous), self.cfg.model_dim))
        maps = []
        for layer in self.decoder_layers:
            y, cross = layer(y, states.h)
            maps.append(cross)
        y = self.decoder_norm(y)
        stop = T.reshape(self.stop_out(y), (len(previous),))
        return self.frame_out(y), stop, maps

    @staticmethod
    def shifted_inputs(frames: np.ndarray) -> np.ndarray:
        start = np.zeros((1, frames.shape[1]), dtype=np.float32)
        return np.concatenate([start, frames[:-1]], axis=0)

    def decode_train(self, states: EncoderStates, target: AcousticSeq) -> Tensor:
        """Teacher-forced loss: mean L1 over frames plus positively weighted BCE on the stop logits."""
        if target.frames.shape[1] != self.cfg.feat_dim:
            raise ContractError(f"target frames have dim {target.frames.shape[1]}, model predicts {self.cfg.feat_dim}")
        labels = target.stop_labels if target.stop_labels is not None else AcousticSeq.target(target.frames).stop_labels
        pred, stop, _ = self.decode_frames(states, self.shifted_inputs(target.frames))
        l1 = T.mean(T.abs(T.sub(pred, target.frames)))
        weights = np.where(labels > 0.5, self.cfg.stop_pos_weight, 1.0)
        bce = T.neg(T.mean(T.add(T.mul(T.log_sigmoid(stop), labels * weights),
                                 T.mul(T.log_sigmoid(T.neg(stop)), (1.0 - labels)))))
        loss = T.add(l1, bce)
        if not math.isfinite(loss.item()):
            raise NumericError("seq2seq loss is not finite", diagnostics={"l1": float(l1.item()), "bce": float(bce.item())})
        return loss

    def decode_infer(self, states: EncoderStates, max_len: Optional[int] = None,
                     stop_threshold: Optional[float] = None) -> AcousticSeq:
        """Greedy autoregressive generation; no sampling, so identical inputs give identical outputs."""
        max_len = max_len if max_len is not None else self.cfg.max_len_factor * len(states)
        threshold = self.cfg.stop_threshold if stop_threshold is None else stop_threshold
        generated = np.zeros((0, self.cfg.feat_dim), dtype=np.float32)
        with T.no_grad():
            while len(generated) < max_len:
                inputs = np.concatenate([np.zeros((1, self.cfg.feat_dim), dtype=np.float32), generated], axis=0)
                pred, stop, _ = self.decode_frames(states, inputs)
                generated = np.concatenate([generated, pred.data[-1:].astype(np.float32)], axis=0)
                if float(special.expit(stop.data[-1])) > threshold:
                    return AcousticSeq(generated)
        return AcousticSeq(generated, truncated=True)

    def convert(self, seq: IndexSeq, max_len: Optional[int] = None) -> AcousticSeq:
        with T.no_grad():
            states = self.encode(seq)
        return self.decode_infer(states, max_len=max_len)

    def loss(self, seq: IndexSeq, target: AcousticSeq) -> Tensor:
        return self.decode_train(self.encode(seq), target)


# --- training ---

Pair = Tuple[IndexSeq, AcousticSeq]


@dataclass
class Seq2SeqCurve:
    train: List[Tuple[int, float]] = field(default_factory=list)
    valid: List[Tuple[int, float]] = field(default_factory=list)

    def train_tsv(self) -> str:
        return "step\ttrain_loss\n" + "".join(f"{s}\t{v:.6f}\n" for s, v in self.train)

    def valid_tsv(self) -> str:
        return "epoch\tvalid_l1\n" + "".join(f"{e}\t{v:.6f}\n" for e, v in self.valid)

    @property
    def best_valid(self) -> Optional[float]:
        return min(v for _, v in self.valid) if self.valid else None

    @property
    def final_valid(self) -> Optional[float]:
        return self.valid[-1][1] if self.valid else None


def validation_l1(model: Seq2SeqModel, pairs: Sequence[Pair]) -> float:
    """Teacher-forced mean absolute frame error over `pairs`."""
    if not pairs:
        raise ContractError("validation needs at least one pair")
    errors = []
    with T.no_grad():
        for seq, target in pairs:
            states = model.encode(seq)
            pred, _, _ = model.decode_frames(states, model.shifted_inputs(target.frames))
            errors.append(float(np.mean(np.abs(pred.data - target.frames), dtype=np.float64)))
    return float(np.mean(errors))


def train_seq2seq(model: Seq2SeqModel, pairs: Sequence[Pair], steps: int, batch_size: int, seed: int,
                  valid_pairs: Optional[Sequence[Pair]] = None, label: str = "seq2seq") -> Seq2SeqCurve:
    """
    Adam on the summed batch loss (averaged over the batch). Pairs are visited in a
    fresh seeded permutation every epoch; teacher-forced validation L1 is recorded at
    the end of each epoch and once more after the final step.
    """
    if not pairs:
        raise ContractError("training needs at least one pair")
    cfg = model.cfg
    rng = RngState(seed).fork(f"seq2seq/{label}")
    curve = Seq2SeqCurve()
    order: List[int] = []
    epoch = 0
    logger.info(f"🚀 Training {label}: {len(pairs)} pairs, {steps} steps, batch {batch_size}, front-end {model.mode}")
    for step in range(steps):
        batch = []
        while len(batch) < min(batch_size, len(pairs)):
            if not order:
                if step > 0 and valid_pairs:
                    curve.valid.append((epoch, validation_l1(model, valid_pairs)))
                epoch += 1
                order = rng.permutation(len(pairs)).tolist()
            batch.append(order.pop(0))
        total = None
        for idx in batch:
            seq, target = pairs[idx]
            loss = model.loss(seq, target)
            total = loss if total is None else T.add(total, loss)
        total = T.mul(total, 1.0 / len(batch))
        total.backward()
        clip_grad_norm(model.store, cfg.clip_norm)
        adam_step(model.store, cfg.learning_rate)
        curve.train.append((step, total.item()))
        if (step + 1) % cfg.log_every == 0:
            logger.info(f"   {label} step {step + 1}/{steps} loss={total.item():.4f}")
    if valid_pairs:
        curve.valid.append((epoch, validation_l1(model, valid_pairs)))
        logger.info(f"✅ {label} finished: validation L1 {curve.final_valid:.4f}")
    return curve


def load_seq2seq(path: str) -> Tuple[Seq2SeqModel, dict]:
    """Rebuild a model from a checkpoint; returns the model and the checkpoint meta."""
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    if meta.get("kind") != "seq2seq":
        raise ContractError(f"{path} is not a seq2seq checkpoint (kind={meta.get('kind')!r})")
    model = Seq2SeqModel(Seq2SeqConfig.model_validate(meta["seq2seq"]), int(meta["groups"]), int(meta["codewords"]),
                         separate_tables=bool(meta["separate"]), combined=bool(meta["combine"]))
    ckpt.apply(model.store)
    return model, meta
