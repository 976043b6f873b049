"""
Experiment configuration.

Experiment files are line-oriented UTF-8 text:

    # baseline on the synthetic pair
    arm = none
    seed = 1
    bpe.src_ops = 5000
    model.family = transformer
    training.max_steps = 3000
    grid.bpe_ops = [5000, 10000]

Values are read as YAML scalars / flow sequences, so numbers, booleans, null
and lists get their natural types. A .yaml/.yml file with nested mappings is
accepted too and flattened to the same dotted keys.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import yaml
from loguru import logger

import config
from errors import ConfigError
from nmt import RECURRENT_GRID, TRANSFORMER_GRID, ModelConfig, TrainingConfig
import utils

ARMS = ("none", "SL-DUM", "SL-POS", "SL-MSD", "TL-DUM", "TL-POS", "TL-MSD", "SLMSD+TLPOS")
SOURCES = ("synthetic", "files")
CORPUS_KEYS = ("train_src", "train_tgt", "dev_src", "dev_tgt", "test_src", "test_tgt")

_RE_ARM = re.compile(r"^(?:(SL|TL)-(DUM|POS|MSD)|SL(DUM|POS|MSD)\+TL(DUM|POS|MSD))$")


def parse_arm(arm: str) -> Tuple[Optional[str], Optional[str]]:
    """'TL-MSD' → (None, 'MSD'); 'SLMSD+TLPOS' → ('MSD', 'POS'); 'none' → (None, None)."""
    if arm == "none":
        return None, None
    match = _RE_ARM.match(arm)
    if not match:
        raise ConfigError(f"unknown tag arm {arm!r} (expected one of {', '.join(ARMS)})")
    side, kind, src_kind, tgt_kind = match.groups()
    if side == "SL":
        return kind, None
    if side == "TL":
        return None, kind
    return src_kind, tgt_kind


# ─── Value coercion ───────────────────────────────────────────────────────────

def _coerce(key: str, value: Any, hint: Any) -> Any:
    if get_origin(hint) is Union:
        args = [a for a in get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(key, value, args[0])
    if get_origin(hint) in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        inner = get_args(hint)[0]
        return tuple(_coerce(key, v, inner) for v in value)
    try:
        if hint is bool:
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if hint is int:
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError(value)
            return int(float(value))
        if hint is float:
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {hint.__name__}") from None
    return value


def render_value(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(render_value(v) for v in value) + "]"
    return str(value)


# ─── File formats ─────────────────────────────────────────────────────────────

def parse_config_text(text: str) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        if key in flat:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        try:
            flat[key] = yaml.safe_load(value) if value else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"line {line_no}: cannot parse value for {key!r}: {exc}") from exc
    return flat


def flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def load_flat(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if path.endswith((".yaml", ".yml")):
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return flatten(tree)
    return parse_config_text(text)


# ─── ExperimentConfig ─────────────────────────────────────────────────────────

@dataclass
class ExperimentConfig:
    pair: str = "synthetic"
    source: str = "synthetic"
    arm: str = "none"
    seed: int = config.DEFAULT_SEED
    # files source: tokenised-or-raw text, one sentence per line
    corpus: Dict[str, Optional[str]] = field(default_factory=lambda: dict.fromkeys(CORPUS_KEYS))
    # files source: CoNLL-U annotations, one sentence per corpus line
    annotation: Dict[str, Optional[str]] = field(default_factory=lambda: dict.fromkeys(CORPUS_KEYS))
    synthetic_train: int = 5000
    synthetic_dev: int = 200
    synthetic_test: int = 200
    downsample: Optional[int] = None
    max_len: int = 100
    truecase: bool = True
    bpe_src_ops: int = 5000
    bpe_tgt_ops: int = 5000
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    beam: int = config.DEFAULT_BEAM
    bootstrap_iters: int = 1000
    forced: bool = True
    baseline_run: Optional[str] = None

    # flat key ↔ attribute for the scalar fields
    _KEYS = {
        "pair": "pair", "source": "source", "arm": "arm", "seed": "seed",
        "synthetic.train": "synthetic_train", "synthetic.dev": "synthetic_dev",
        "synthetic.test": "synthetic_test", "downsample": "downsample", "max_len": "max_len",
        "truecase": "truecase", "bpe.src_ops": "bpe_src_ops", "bpe.tgt_ops": "bpe_tgt_ops",
        "beam": "beam", "eval.bootstrap_iters": "bootstrap_iters", "eval.forced": "forced",
        "baseline_run": "baseline_run",
    }

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"unknown corpus source {self.source!r} (expected one of {SOURCES})")
        parse_arm(self.arm)
        for name in ("synthetic_train", "synthetic_dev", "synthetic_test", "max_len", "beam", "bootstrap_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("bpe_src_ops", "bpe_tgt_ops"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.downsample is not None and self.downsample < 1:
            raise ConfigError(f"downsample must be positive, got {self.downsample}")
        self.training = replace(self.training, seed=self.seed)

    @property
    def tag_kinds(self) -> Tuple[Optional[str], Optional[str]]:
        return parse_arm(self.arm)

    # ─── flat dict I/O ──────────────────────────────────────────────────────

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "ExperimentConfig":
        hints = get_type_hints(cls)
        model_hints = get_type_hints(ModelConfig)
        training_hints = get_type_hints(TrainingConfig)
        kwargs: Dict[str, Any] = {}
        model_kw: Dict[str, Any] = {}
        training_kw: Dict[str, Any] = {}
        corpus = dict.fromkeys(CORPUS_KEYS)
        annotation = dict.fromkeys(CORPUS_KEYS)

        for key, value in flat.items():
            head, _, rest = key.partition(".")
            if head == "grid":
                continue
            if key in cls._KEYS:
                attr = cls._KEYS[key]
                kwargs[attr] = _coerce(key, value, hints[attr])
            elif head == "model" and rest in model_hints:
                model_kw[rest] = _coerce(key, value, model_hints[rest])
            elif head == "training" and rest in training_hints and rest != "seed":
                training_kw[rest] = _coerce(key, value, training_hints[rest])
            elif head in ("corpus", "annotation") and rest in CORPUS_KEYS:
                target = corpus if head == "corpus" else annotation
                target[rest] = None if value is None else str(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")

        return cls(
            model=ModelConfig(**model_kw),
            training=TrainingConfig(**training_kw),
            corpus=corpus,
            annotation=annotation,
            **kwargs,
        )

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {key: getattr(self, attr) for key, attr in self._KEYS.items()}
        for name in CORPUS_KEYS:
            flat[f"corpus.{name}"] = self.corpus.get(name)
            flat[f"annotation.{name}"] = self.annotation.get(name)
        for f in fields(ModelConfig):
            flat[f"model.{f.name}"] = getattr(self.model, f.name)
        for f in fields(TrainingConfig):
            if f.name != "seed":
                flat[f"training.{f.name}"] = getattr(self.training, f.name)
        return flat

    def to_text(self) -> str:
        """Canonical rendering (sorted keys); written as config.txt in each run."""
        return "".join(f"{k} = {render_value(v)}\n" for k, v in sorted(self.to_flat().items()))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls.from_flat(parse_config_text(text))

    def check_paths(self):
        """Every referenced input file must exist before a run starts."""
        if self.source != "files":
            return
        for name in ("train_src", "train_tgt", "dev_src", "dev_tgt", "test_src", "test_tgt"):
            if not self.corpus.get(name):
                raise ConfigError(f"corpus.{name} is required for source = files")
        src_kind, tgt_kind = self.tag_kinds
        needed = []
        if src_kind:
            needed += ["train_src", "dev_src", "test_src"]
        if tgt_kind:
            needed += ["train_tgt", "dev_tgt", "test_tgt"]
        for name in needed:
            if not self.annotation.get(name):
                raise ConfigError(f"annotation.{name} is required for arm {self.arm}")
        paths = [p for p in list(self.corpus.values()) + list(self.annotation.values()) if p]
        if self.baseline_run:
            paths.append(self.baseline_run)
        for path in paths:
            if not os.path.exists(path):
                raise ConfigError(f"referenced path does not exist: {path}")


def load_config(path: str) -> ExperimentConfig:
    cfg = ExperimentConfig.from_flat(load_flat(path))
    logger.info(f"Loaded experiment config {path} (arm {cfg.arm}, seed {cfg.seed})")
    return cfg


def save_config(cfg: ExperimentConfig, path: str) -> str:
    """Writes config.txt and returns its SHA-256."""
    utils.ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(cfg.to_text())
    return utils.calculate_file_hash(path)


# ─── GridSpace ────────────────────────────────────────────────────────────────

def _default_sizes(family: str) -> Tuple[Tuple[int, ...], ...]:
    grid = RECURRENT_GRID if family == "recurrent" else TRANSFORMER_GRID
    return tuple(sorted(grid, reverse=True))


@dataclass
class GridSpace:
    """Three stages searched in order: BPE operations, tied embeddings, model sizes."""
    bpe_ops: Tuple[int, ...] = (5000, 10000, 20000, 40000)
    tied: Tuple[bool, ...] = (True, False)
    sizes: Tuple[Tuple[int, ...], ...] = field(default_factory=lambda: _default_sizes("transformer"))

    @property
    def stages(self) -> List[Tuple[str, Tuple[Any, ...]]]:
        return [("bpe_ops", self.bpe_ops), ("tied", self.tied), ("sizes", self.sizes)]

    def validate(self, family: str):
        for name, values in self.stages:
            if not values:
                raise ConfigError(f"grid stage {name!r} is empty")
        width = 2 if family == "recurrent" else 3
        for size in self.sizes:
            if len(size) != width:
                raise ConfigError(f"{family} grid sizes need {width} values, got {size}")

    @classmethod
    def from_flat(cls, flat: Dict[str, Any], family: str) -> "GridSpace":
        space = cls(sizes=_default_sizes(family))
        for key, value in flat.items():
            if not key.startswith("grid."):
                continue
            name = key[len("grid."):]
            if name == "bpe_ops":
                space.bpe_ops = tuple(_coerce(key, v, int) for v in _as_list(key, value))
            elif name == "tied":
                space.tied = tuple(_coerce(key, v, bool) for v in _as_list(key, value))
            elif name == "sizes":
                space.sizes = tuple(tuple(_coerce(key, x, int) for x in _as_list(key, v))
                                    for v in _as_list(key, value))
            else:
                raise ConfigError(f"unknown config key {key!r}")
        space.validate(family)
        return space


def _as_list(key: str, value: Any) -> List[Any]:
    if isinstance(value, (list, tuple)):
        return list(value)
    raise ConfigError(f"{key}: expected a list, got {value!r}")


def apply_grid_point(cfg: ExperimentConfig, stage: str, value: Any) -> ExperimentConfig:
    if stage == "bpe_ops":
        return replace(cfg, bpe_src_ops=value, bpe_tgt_ops=value)
    if stage == "tied":
        return replace(cfg, model=replace(cfg.model, tied_embeddings=value))
    if stage == "sizes":
        if cfg.model.family == "recurrent":
            hidden, embed = value
            return replace(cfg, model=replace(cfg.model, hidden_size=hidden, embed_size=embed))
        dim, layers, heads = value
        return replace(cfg, model=replace(cfg.model, model_dim=dim, layers=layers, heads=heads))
    raise ConfigError(f"unknown grid stage {stage!r}")
