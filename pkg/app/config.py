# app/config.py
"""
Run configuration: defaults < config file < environment (.env) < CLI flags.

The config file is line-based `key = value` with `[section]` headers. Sections
map onto the nested RunConfig models; lists are comma separated and encoder
layers are written as `channels:kernel:stride`.
"""
import configparser
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from app.errors import ConfigError
from app.schemas import RunConfig

logger = logging.getLogger(__name__)

APP_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.dirname(APP_DIR)

THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

# Environment variable -> RunConfig field.
ENV_OVERRIDES = {
    "VQVC_OUT": "out",
    "VQVC_SEED": "seed",
    "VQVC_THREADS": "threads",
    "VQVC_WORKERS": "workers",
    "VQVC_LOG_LEVEL": "log_level",
    "VQVC_DETECT_ANOMALY": "detect_anomaly",
}

# Keys in the [quantizer] section that belong to the nested encoder model.
_ENCODER_KEYS = {"encoder_layers": "layers", "aggregator_layers": "aggregator_layers",
                 "aggregator_kernel": "aggregator_kernel"}
_LIST_KEYS = {"quantizer_speakers", "source_speakers", "target_sizes", "variants"}
_TOP_LEVEL = {"seed", "threads", "workers", "out", "force", "detect_anomaly", "log_level"}


def apply_thread_env(threads: int) -> None:
    """Cap BLAS/OpenMP pools. Only effective when called before numpy is imported."""
    for name in THREAD_ENV_VARS:
        os.environ[name] = str(threads)


def _parse_layers(raw: str):
    layers = []
    for spec in raw.split(","):
        spec = spec.strip()
        if not spec:
            continue
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"encoder layer '{spec}' must be channels:kernel:stride")
        channels, kernel, stride = parts
        layers.append({"channels": channels, "kernel": kernel, "stride": stride})
    return layers


def _section_values(name: str, section: configparser.SectionProxy) -> Dict[str, Any]:
    known = RunConfig.model_fields[name].annotation.model_fields if name != "run" else None
    values: Dict[str, Any] = {}
    for key, raw in section.items():
        if name == "run":
            if key not in _TOP_LEVEL:
                raise ConfigError(f"[run] unknown key '{key}'")
            values[key] = raw
            continue
        if name == "quantizer" and key in _ENCODER_KEYS:
            encoder = values.setdefault("encoder", {})
            encoder[_ENCODER_KEYS[key]] = _parse_layers(raw) if key == "encoder_layers" else raw
            continue
        if key not in known:
            raise ConfigError(f"[{name}] unknown key '{key}'")
        values[key] = [item.strip() for item in raw.split(",") if item.strip()] if key in _LIST_KEYS else raw
    return values


def read_config_file(path: str) -> Dict[str, Any]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    data: Dict[str, Any] = {}
    for name in parser.sections():
        if name != "run" and name not in RunConfig.model_fields:
            raise ConfigError(f"{path}: unknown section [{name}]")
        values = _section_values(name, parser[name])
        if name == "run":
            data.update(values)
        else:
            data[name] = values
    return data


def _env_values() -> Dict[str, Any]:
    load_dotenv()
    values = {}
    for env_name, field in ENV_OVERRIDES.items():
        raw = os.getenv(env_name)
        if raw not in (None, ""):
            values[field] = raw
    return values


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    data: Dict[str, Any] = read_config_file(path) if path else {}
    data.update(_env_values())
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    logger.debug(f"Config loaded (hash {config_hash(cfg)[:12]})")
    return cfg


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json", exclude={"out", "force", "workers", "log_level"}), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


@dataclass
class RunPaths:
    """Every file location of one run, derived from the output directory."""
    out: str

    @property
    def corpus_dir(self) -> str:
        return os.path.join(self.out, "corpus")

    @property
    def manifest(self) -> str:
        return os.path.join(self.corpus_dir, "manifest.tsv")

    @property
    def quantizer_dir(self) -> str:
        return os.path.join(self.out, "quantizer")

    @property
    def quantizer_checkpoint(self) -> str:
        return os.path.join(self.quantizer_dir, "quantizer.ckpt")

    @property
    def quantizer_curve(self) -> str:
        return os.path.join(self.quantizer_dir, "loss.tsv")

    def index_dir(self, combined: bool, split: str) -> str:
        return os.path.join(self.out, "indices", "combined" if combined else "frames", split)

    def seq2seq_dir(self, variant: str) -> str:
        return os.path.join(self.out, "seq2seq", variant.replace("+", "_"))

    def converted_dir(self, variant: str) -> str:
        return os.path.join(self.out, "converted", variant.replace("+", "_"))

    def grid_cell_dir(self, variant: str, repeat: int) -> str:
        return os.path.join(self.out, "grid", f"{variant.replace('+', '_')}-r{repeat}")

    @property
    def reports_dir(self) -> str:
        return os.path.join(self.out, "reports")

    @property
    def registry(self) -> str:
        return os.path.join(self.reports_dir, "registry.sqlite")

    def resolve(self, relative: str) -> str:
        return relative if os.path.isabs(relative) else os.path.join(self.corpus_dir, relative)


def prepare_output_dir(path: str, force: bool) -> str:
    """Create `path`; an existing non-empty directory is refused unless `force` is set."""
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise ConfigError(f"output directory '{path}' already exists; pass --force to overwrite it")
        logger.warning(f"⚠️ Overwriting existing output directory: {path}")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return path
