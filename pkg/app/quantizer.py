# app/quantizer.py
"""
Discrete representation learner: a strided conv encoder f, a grouped
Gumbel-softmax quantizer q with one codebook shared by all groups, a causal
conv aggregator g, and the future-prediction contrastive objective that
trains them.

Frames are time-major throughout: z and zhat are (T, d), contexts c are (T, d).
"""
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app import tensor as T
from app.checkpoint import load_checkpoint
from app.errors import ContractError, NumericError
from app.nn import Conv1d, Linear, ParamStore, adam_step, clip_grad_norm
from app.postprocess import IndexSeq, perplexity
from app.schemas import ContrastiveConfig, QuantizerConfig
from app.tensor import RngState, Tensor

logger = logging.getLogger(__name__)


@dataclass
class QuantizerOutput:
    indices: np.ndarray                 # (T, G) chosen codeword per group
    zhat: Tensor                        # (T, d) concatenated codewords
    soft_probs: Optional[Tensor] = None  # (T, G, V), train mode only
    logits: Optional[np.ndarray] = None  # (T, G, V) noise-free logits
    noise: Optional[np.ndarray] = None   # (T, G, V) Gumbel draws, train mode only


def temperature_at(step: int, total_steps: int, start: float, end: float, anneal_steps: Optional[int] = None) -> float:
    """Linear anneal from `start` to `end` over the first half of training (or `anneal_steps`), then held."""
    horizon = anneal_steps or max(total_steps // 2, 1)
    if step >= horizon:
        return end
    return start + (end - start) * step / horizon


def sample_negatives(rng: RngState, length: int, k: int, n_negatives: int) -> np.ndarray:
    """For each anchor i in [0, T-k), N frame positions drawn uniformly from [0, T) excluding i+k."""
    if length <= k:
        raise ContractError(f"sequence of {length} frames is too short for {k} step(s) ahead")
    anchors = np.arange(length - k)[:, None]
    draws = rng.integers(0, length - 1, size=(length - k, n_negatives))
    draws[draws >= anchors + k] += 1
    return draws


class VQEncoder:
    def __init__(self, cfg: QuantizerConfig, contrastive: Optional[ContrastiveConfig] = None, seed: int = 0,
                 store: Optional[ParamStore] = None):
        self.cfg = cfg
        self.contrastive = contrastive or ContrastiveConfig()
        self.store = store or ParamStore(seed)
        enc = cfg.encoder

        self.encoder: List[Conv1d] = []
        in_ch = 1
        for n, layer in enumerate(enc.layers):
            self.encoder.append(Conv1d(self.store, f"enc/conv{n}", in_ch, layer.channels, layer.kernel, layer.stride))
            in_ch = layer.channels

        self.logit_maps = [Linear(self.store, f"quant/logits{g}", cfg.group_dim, cfg.codewords)
                           for g in range(cfg.groups)]
        self.codebook = self.store.create("quant/codebook", (cfg.codewords, cfg.group_dim), init="normal", scale=1.0)

        pad = enc.aggregator_kernel - 1
        self.aggregator = [Conv1d(self.store, f"agg/conv{n}", cfg.dim, cfg.dim, enc.aggregator_kernel, 1, (pad, 0))
                           for n in range(enc.aggregator_layers)]
        # W_k maps contexts (dim d) onto target frames (dim d)
        self.step_maps = [self.store.create(f"ctx/W{k}", (cfg.dim, cfg.dim), init="normal", scale=0.02)
                          for k in range(1, self.contrastive.steps_ahead + 1)]

    @property
    def receptive_field(self) -> int:
        return self.cfg.encoder.receptive_field

    @property
    def total_stride(self) -> int:
        return self.cfg.encoder.total_stride

    def encode(self, signal) -> Tensor:
        """Raw samples (n,) -> latent frames z (T, d)."""
        x = signal if isinstance(signal, Tensor) else Tensor(np.asarray(signal).reshape(-1, 1))
        if x.ndim == 1:
            x = T.reshape(x, (x.shape[0], 1))
        if x.shape[0] < self.receptive_field:
            raise ContractError(f"signal of {x.shape[0]} samples is shorter than the receptive field ({self.receptive_field})")
        for n, conv in enumerate(self.encoder):
            x = conv(x)
            if n < len(self.encoder) - 1:
                x = T.relu(x)
        return x

    def quantize(self, z: Tensor, rng: Optional[RngState] = None, tau: float = 1.0, mode: str = "eval",
                 straight_through: Optional[bool] = None) -> QuantizerOutput:
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got '{mode}'")
        if tau <= 0:
            raise ContractError(f"temperature must be positive, got {tau}")
        if z.ndim != 2 or z.shape[1] != self.cfg.dim:
            raise ContractError(f"quantize expects (T, {self.cfg.dim}) frames, got {z.shape}")
        if mode == "train" and rng is None:
            raise ContractError("train-mode quantization needs an RngState for Gumbel noise")
        st = self.cfg.straight_through if straight_through is None else straight_through
        n_frames, dg, V = z.shape[0], self.cfg.group_dim, self.cfg.codewords

        slices, probs, noises, all_logits, indices = [], [], [], [], []
        for g, logit_map in enumerate(self.logit_maps):
            logits = logit_map(T.take(z, (slice(None), slice(g * dg, (g + 1) * dg))))
            all_logits.append(logits.data)
            if mode == "eval":
                idx = np.argmax(logits.data, axis=1)
                slices.append(T.embedding(self.codebook, idx))
            else:
                noise = rng.gumbel((n_frames, V)).astype(logits.data.dtype)
                p = T.softmax(T.mul(T.add(logits, noise), 1.0 / tau), axis=-1)
                idx = np.argmax(p.data, axis=1)
                selector = T.straight_through(p, np.eye(V)[idx]) if st else p
                slices.append(T.matmul(selector, self.codebook))
                probs.append(T.reshape(p, (n_frames, 1, V)))
                noises.append(noise)
            indices.append(idx)

        return QuantizerOutput(
            indices=np.stack(indices, axis=1).astype(np.int64),
            zhat=T.concat(slices, axis=1),
            soft_probs=T.concat(probs, axis=1) if probs else None,
            logits=np.stack(all_logits, axis=1),
            noise=np.stack(noises, axis=1) if noises else None,
        )

    def aggregate(self, zhat: Tensor) -> Tensor:
        """Causal conv stack: c_t depends only on zhat[:t+1]."""
        if zhat.shape[0] == 0:
            raise ContractError("aggregate needs at least one frame")
        c = zhat
        for n, conv in enumerate(self.aggregator):
            c = conv(c)
            if n < len(self.aggregator) - 1:
                c = T.relu(c)
        return c

    def contrastive_loss(self, c: Tensor, z: Tensor, rng: RngState,
                         negatives: Optional[Dict[int, np.ndarray]] = None) -> Tuple[Tensor, Dict[int, np.ndarray]]:
        """
        L = sum_k L_k,  L_k = -sum_i [log sig(z_{i+k}.W_k c_i) + (lambda/N) sum_neg log sig(-z~.W_k c_i)].
        Returns the loss and the negative positions used per step k.
        """
        cfg = self.contrastive
        length, K = c.shape[0], cfg.steps_ahead
        if z.shape[0] != length:
            raise ContractError(f"context and target lengths differ: {length} vs {z.shape[0]}")
        if length <= K:
            raise ContractError(f"sequence of {length} frames needs more than K={K} frames")
        used: Dict[int, np.ndarray] = {}
        neg_weight = cfg.negative_weight / cfg.n_negatives
        total = None
        for k in range(1, K + 1):
            n = length - k
            neg_idx = negatives[k] if negatives is not None else sample_negatives(rng, length, k, cfg.n_negatives)
            used[k] = neg_idx
            projected = T.matmul(T.take(c, slice(0, n)), self.step_maps[k - 1])  # (n, d)
            positive = T.sum(T.mul(projected, T.take(z, slice(k, length))), axis=1)
            negative_frames = T.take(z, neg_idx)  # (n, N, d)
            negative = T.sum(T.mul(negative_frames, T.reshape(projected, (n, 1, z.shape[1]))), axis=2)
            term = T.add(T.sum(T.log_sigmoid(positive)), T.mul(T.sum(T.log_sigmoid(T.neg(negative))), neg_weight))
            total = T.neg(term) if total is None else T.sub(total, term)
        return total, used

    def forward(self, signal, rng: RngState, tau: float) -> Tuple[Tensor, QuantizerOutput, int]:
        """Full training forward pass; returns (normalised loss, quantizer output, term count)."""
        z = self.encode(signal)
        q = self.quantize(z, rng, tau, mode="train")
        c = self.aggregate(q.zhat)
        loss, _ = self.contrastive_loss(c, q.zhat, rng)
        length = z.shape[0]
        terms = sum(length - k for k in range(1, self.contrastive.steps_ahead + 1))
        return T.mul(loss, 1.0 / terms), q, terms

    def extract_indices(self, signal, utt_id: str = "") -> IndexSeq:
        """Eval-mode quantization; the aggregator is not used."""
        with T.no_grad():
            z = self.encode(signal)
            q = self.quantize(z, mode="eval")
        return IndexSeq(q.indices, self.cfg.groups, self.cfg.codewords, utt_id=utt_id)

    def meta(self) -> dict:
        return {
            "kind": "quantizer",
            "quantizer": self.cfg.model_dump(mode="json"),
            "contrastive": self.contrastive.model_dump(mode="json"),
        }


def extract_indices(model: VQEncoder, signal, utt_id: str = "") -> IndexSeq:
    return model.extract_indices(signal, utt_id=utt_id)


@dataclass
class QuantizerCurve:
    steps: List[int]
    losses: List[float]
    taus: List[float]

    def to_tsv(self) -> str:
        rows = ["step\tloss\ttau"]
        rows += [f"{s}\t{l:.6f}\t{t:.6f}" for s, l, t in zip(self.steps, self.losses, self.taus)]
        return "\n".join(rows) + "\n"


def _crop(signal: np.ndarray, rng: RngState, crop: int) -> np.ndarray:
    if len(signal) <= crop:
        return signal
    start = int(rng.integers(0, len(signal) - crop + 1))
    return signal[start:start + crop]


def pretrain_quantizer(model: VQEncoder, signals: Sequence[np.ndarray], steps: int, seed: int,
                       on_eval: Optional[Callable[[int, List[float]], None]] = None,
                       curve: Optional["QuantizerCurve"] = None) -> "QuantizerCurve":
    """
    Train encoder, quantizer, aggregator and step maps on unlabeled signals, one
    utterance (cropped) per step. Raises NumericError with diagnostics on divergence;
    the model keeps the parameters of the last finite step and `curve`
    (when passed in) keeps the losses recorded so far.
    """
    cfg = model.contrastive
    usable = [np.asarray(s, dtype=np.float32) for s in signals
              if model.cfg.encoder.frame_count(min(len(s), cfg.crop_samples)) > cfg.steps_ahead]
    if not usable:
        raise ContractError("no training signal is long enough for the contrastive objective")
    rng = RngState(seed).fork("quantizer/train")
    curve = curve if curve is not None else QuantizerCurve([], [], [])
    recent = deque(maxlen=20)
    usage = np.zeros((model.cfg.groups, model.cfg.codewords), dtype=np.int64)
    logger.info(f"🚀 Quantizer pretraining: {len(usable)} utterances, {steps} steps, "
                f"G={model.cfg.groups} V={model.cfg.codewords}")

    for step in range(steps):
        tau = temperature_at(step, steps, cfg.tau_start, cfg.tau_end, cfg.anneal_steps)
        signal = _crop(usable[int(rng.integers(0, len(usable)))], rng, cfg.crop_samples)
        loss, q, _ = model.forward(signal, rng, tau)
        value = loss.item()
        if not math.isfinite(value):
            model.store.zero_grad()
            raise NumericError(
                f"quantizer loss became non-finite at step {step}",
                diagnostics={"step": step, "tau": tau, "recent_losses": list(recent)},
            )
        loss.backward()
        clip_grad_norm(model.store, cfg.clip_norm)
        adam_step(model.store, cfg.learning_rate)
        recent.append(value)
        curve.steps.append(step)
        curve.losses.append(value)
        curve.taus.append(tau)
        for g in range(model.cfg.groups):
            usage[g] += np.bincount(q.indices[:, g], minlength=model.cfg.codewords)

        if (step + 1) % cfg.log_every == 0:
            logger.info(f"   step {step + 1}/{steps} loss={np.mean(recent):.4f} tau={tau:.3f}")
        if (step + 1) % cfg.eval_every == 0:
            perplexities = [perplexity(h) for h in usage]
            logger.info(f"   step {step + 1}: code perplexity per group {[round(p, 2) for p in perplexities]}")
            if on_eval:
                on_eval(step + 1, perplexities)
            usage[:] = 0

    logger.info(f"✅ Quantizer pretraining finished: first-10% loss {np.mean(curve.losses[:max(steps // 10, 1)]):.4f}, "
                f"last-10% loss {np.mean(curve.losses[-max(steps // 10, 1):]):.4f}")
    return curve


def load_quantizer(path: str) -> VQEncoder:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "quantizer":
        raise ContractError(f"{path} is not a quantizer checkpoint (kind={ckpt.meta.get('kind')!r})")
    model = VQEncoder(QuantizerConfig.model_validate(ckpt.meta["quantizer"]),
                      ContrastiveConfig.model_validate(ckpt.meta["contrastive"]))
    ckpt.apply(model.store)
    return model
