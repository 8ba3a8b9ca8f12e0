# app/schemas.py
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Dict, Tuple

# --- CONFIGURATION SCHEMAS ---

class ConvLayer(BaseModel):
    channels: int = Field(gt=0)
    kernel: int = Field(gt=0)
    stride: int = Field(gt=0)


def _desk_encoder_layers() -> List[ConvLayer]:
    return [
        ConvLayer(channels=16, kernel=10, stride=5),
        ConvLayer(channels=16, kernel=3, stride=2),
        ConvLayer(channels=16, kernel=2, stride=1),
        ConvLayer(channels=16, kernel=1, stride=1),
    ]


class EncoderConfig(BaseModel):
    layers: List[ConvLayer] = Field(default_factory=_desk_encoder_layers)
    aggregator_layers: int = Field(default=2, ge=1)
    aggregator_kernel: int = Field(default=3, ge=1)

    @property
    def total_stride(self) -> int:
        stride = 1
        for layer in self.layers:
            stride *= layer.stride
        return stride

    @property
    def receptive_field(self) -> int:
        field, jump = 1, 1
        for layer in self.layers:
            field += (layer.kernel - 1) * jump
            jump *= layer.stride
        return field

    @property
    def out_channels(self) -> int:
        return self.layers[-1].channels

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.receptive_field:
            return 0
        return (n_samples - self.receptive_field) // self.total_stride + 1


class QuantizerConfig(BaseModel):
    dim: int = Field(default=16, gt=0)
    groups: int = Field(default=2, gt=0)
    codewords: int = Field(default=8, gt=1)
    straight_through: bool = True
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)

    @model_validator(mode="after")
    def check_dims(self):
        if not self.encoder.layers:
            raise ValueError("encoder needs at least one conv layer")
        if self.dim % self.groups != 0:
            raise ValueError(f"dim {self.dim} is not divisible by groups {self.groups}")
        if self.encoder.out_channels != self.dim:
            raise ValueError(f"last encoder layer has {self.encoder.out_channels} channels, quantizer dim is {self.dim}")
        return self

    @property
    def group_dim(self) -> int:
        return self.dim // self.groups


class ContrastiveConfig(BaseModel):
    steps_ahead: int = Field(default=3, ge=1)
    n_negatives: int = Field(default=10, ge=1)
    negative_weight: float = Field(default=10.0, ge=0.0)
    tau_start: float = Field(default=2.0, gt=0.0)
    tau_end: float = Field(default=0.5, gt=0.0)
    anneal_steps: Optional[int] = Field(default=None, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    clip_norm: float = Field(default=5.0, ge=0.0)
    crop_samples: int = Field(default=1200, ge=30)
    log_every: int = Field(default=50, ge=1)
    eval_every: int = Field(default=100, ge=1)


class PostprocessFlags(BaseModel):
    combine: bool = True
    separate: bool = True

    @property
    def variant(self) -> str:
        if self.combine and self.separate:
            return "combine+separate"
        if self.combine:
            return "combine"
        if self.separate:
            return "separate"
        return "none"

    @classmethod
    def from_variant(cls, name: str) -> "PostprocessFlags":
        table = {
            "none": (False, False),
            "separate": (False, True),
            "combine": (True, False),
            "combine+separate": (True, True),
        }
        if name not in table:
            raise ValueError(f"unknown postprocess variant '{name}', expected one of {sorted(table)}")
        combine, separate = table[name]
        return cls(combine=combine, separate=separate)


class Seq2SeqConfig(BaseModel):
    emb_dim: int = Field(default=8, gt=0)
    model_dim: int = Field(default=32, gt=0)
    heads: int = Field(default=2, gt=0)
    encoder_layers: int = Field(default=2, ge=1)
    decoder_layers: int = Field(default=2, ge=1)
    ffn_dim: int = Field(default=64, gt=0)
    prenet_dim: int = Field(default=32, gt=0)
    feat_dim: int = Field(default=16, gt=0)
    use_projection: bool = True
    stop_pos_weight: float = Field(default=5.0, gt=0.0)
    stop_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    max_len_factor: int = Field(default=10, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    clip_norm: float = Field(default=1.0, ge=0.0)
    log_every: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def check_heads(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        return self


class CorpusSpec(BaseModel):
    quantizer_speakers: List[str] = Field(default_factory=lambda: ["q0", "q1", "q2", "q3"])
    n_utts_each: int = Field(default=50, ge=1)
    pretrain_speaker: str = "pre"
    n_pretrain_utts: int = Field(default=300, ge=1)
    n_pretrain_valid: int = Field(default=20, ge=1)
    target_speaker: str = "tgt"
    target_sizes: List[int] = Field(default_factory=lambda: [200, 20])
    n_target_valid: int = Field(default=20, ge=1)
    source_speakers: List[str] = Field(default_factory=lambda: ["src0", "src1"])
    n_valid: int = Field(default=20, ge=1)
    n_test: int = Field(default=50, ge=1)
    min_symbols: int = Field(default=5, ge=1)
    max_symbols: int = Field(default=20, ge=1)

    @field_validator("target_sizes")
    @classmethod
    def positive_sizes(cls, sizes: List[int]) -> List[int]:
        if not sizes or any(s <= 0 for s in sizes):
            raise ValueError("target_sizes must be a nonempty list of positive counts")
        return sizes

    @model_validator(mode="after")
    def check_lengths(self):
        if self.min_symbols > self.max_symbols:
            raise ValueError("min_symbols exceeds max_symbols")
        if not self.source_speakers:
            raise ValueError("at least one source speaker is required")
        return self


class TrainingBudgets(BaseModel):
    quantizer_steps: int = Field(default=3000, ge=1)
    pretrain_steps: int = Field(default=5000, ge=1)
    finetune_steps: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=4, ge=1)


class GridConfig(BaseModel):
    variants: List[str] = Field(default_factory=lambda: ["none", "separate", "combine+separate"])
    repeats: int = Field(default=1, ge=1)
    scratch_control: bool = True
    n_eval: int = Field(default=50, ge=1)

    @field_validator("variants")
    @classmethod
    def known_variants(cls, variants: List[str]) -> List[str]:
        for name in variants:
            PostprocessFlags.from_variant(name)
        return variants


class RunConfig(BaseModel):
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    threads: int = Field(default=1, ge=1)
    workers: int = Field(default=1, ge=1)
    out: str = "runs/default"
    force: bool = False
    detect_anomaly: bool = False
    log_level: str = "INFO"
    corpus: CorpusSpec = Field(default_factory=CorpusSpec)
    quantizer: QuantizerConfig = Field(default_factory=QuantizerConfig)
    contrastive: ContrastiveConfig = Field(default_factory=ContrastiveConfig)
    postprocess: PostprocessFlags = Field(default_factory=PostprocessFlags)
    seq2seq: Seq2SeqConfig = Field(default_factory=Seq2SeqConfig)
    budgets: TrainingBudgets = Field(default_factory=TrainingBudgets)
    grid: GridConfig = Field(default_factory=GridConfig)


# --- RESULT SCHEMAS ---

class VocabStats(BaseModel):
    groups: int
    codewords: int
    utterances: int
    frames: int
    unique_combinations: int
    histograms: List[List[int]]
    perplexities: List[float]
    # None when no utterance carried run lengths
    reduction_ratio: Optional[float]
    utterances_without_runs: int = 0


class QuantizerStats(BaseModel):
    perplexities: List[float]
    unique_combinations: int


class ConversionScore(BaseModel):
    mcd_conv: float
    mcd_copy: float

    @property
    def success(self) -> bool:
        return self.mcd_conv < self.mcd_copy


class MetricReport(BaseModel):
    utt_id: str
    mcd: float = Field(ge=0.0)
    mcd_copy: float = Field(ge=0.0)
    path_length: int
    symbol_error_rate: float = Field(ge=0.0)
    truncated: bool = False


class GridCellOut(BaseModel):
    variant: str
    target_size: int
    repeat: int
    status: str
    mcd_conv: Optional[float] = None
    mcd_copy: Optional[float] = None
    symbol_error_rate: Optional[float] = None
    success_rate: Optional[float] = None
    valid_l1: Optional[float] = None
    scratch_valid_l1: Optional[float] = None
    n_utts: int = 0
    error: Optional[str] = None
    model_config = ConfigDict(from_attributes=True)


class OrderingCheck(BaseModel):
    name: str
    passed: Optional[bool]
    detail: Dict[str, Optional[float]] = Field(default_factory=dict)
