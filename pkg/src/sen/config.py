"""Experiment configuration: JSON document <-> validated :class:`SENConfig`.

Every section is optional; omitted fields take the desk-scale defaults.
Unknown keys anywhere in the document are errors, and validation reports
all violations at once.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from .encoders import EncoderConfig
from .network import ARMS, PASSES_MODES
from .ra import DISTRIBUTION_MODES, FUSION_KINDS

TASK_KINDS = ("parity", "contrastive", "injection")
DEFAULT_MODALITIES = ("video", "text", "depth")


class ConfigError(ValueError):
    """Carries every validation message found in a document."""

    def __init__(self, errors: list):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class ModalityConfig:
    name: str
    input_dim: int = 8
    seq_len: int = 8
    depth: int = 2
    heads: int = 2
    encoder_seed: Optional[int] = None


@dataclass
class RAConfig:
    layers: int = 3
    fusion: str = "avg"
    distribution: str = "sparse"
    prompt_tokens: int = 4
    learnable_prompt: bool = True
    passes_mode: str = "L_plus_1"


@dataclass
class TrainingConfig:
    base_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    steps: int = 2000
    batch: int = 32
    schedule: str = "cosine"
    eval_every: int = 500


@dataclass
class TaskConfig:
    kind: str = "parity"
    sigma: float = 0.1
    n_train: int = 4096
    n_test: int = 1024
    n_modalities: Optional[int] = None
    classes: int = 4
    target_shape: list = field(default_factory=lambda: [4, 8])
    pattern_seed: int = 1234


@dataclass
class SENConfig:
    modalities: list
    shared_dim: int = 16
    ra: RAConfig = field(default_factory=RAConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    arm: str = "ra"
    seed: int = 0

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def task_modalities(self) -> int:
        return self.task.n_modalities or self.n_modalities

    def encoder_seeds(self) -> list:
        return [m.encoder_seed if m.encoder_seed is not None else 1000 + i
                for i, m in enumerate(self.modalities)]

    def encoder_configs(self) -> list:
        return [EncoderConfig(m.name, m.input_dim, m.seq_len, m.depth, m.heads, self.shared_dim,
                              max_prompt_tokens=self.ra.prompt_tokens)
                for m in self.modalities]

    def distributor_input_width(self) -> int:
        return self.n_modalities * self.shared_dim if self.ra.fusion == "concat" else self.shared_dim

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def with_overrides(self, **sections) -> "SENConfig":
        """Copy with top-level fields or ``ra``/``training``/``task`` sub-fields replaced.

        ``cfg.with_overrides(seed=3, ra={"layers": 1})``
        """
        out = replace(self)
        for key, value in sections.items():
            if key in ("ra", "training", "task"):
                setattr(out, key, replace(getattr(self, key), **value))
            else:
                setattr(out, key, value)
        validate(out)
        return out


def _section(doc, cls, where: str, errors: list):
    if doc is None:
        return cls() if cls is not ModalityConfig else None
    if not isinstance(doc, dict):
        errors.append(f"{where}: expected an object")
        return cls() if cls is not ModalityConfig else None
    names = {f.name for f in fields(cls)}
    for key in doc:
        if key not in names:
            errors.append(f"{where}: unknown key {key!r}")
    kwargs = {k: v for k, v in doc.items() if k in names}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        errors.append(f"{where}: {exc}")
        return None


def _type_checks(obj, where: str, errors: list) -> None:
    for f in fields(obj):
        value = getattr(obj, f.name)
        default_kind = f.type
        if value is None:
            continue
        if default_kind in ("int", "Optional[int]") and (not isinstance(value, int) or isinstance(value, bool)):
            errors.append(f"{where}.{f.name}: expected an integer, got {value!r}")
        elif default_kind == "float" and (not isinstance(value, (int, float)) or isinstance(value, bool)):
            errors.append(f"{where}.{f.name}: expected a number, got {value!r}")
        elif default_kind == "bool" and not isinstance(value, bool):
            errors.append(f"{where}.{f.name}: expected true/false, got {value!r}")
        elif default_kind == "str" and not isinstance(value, str):
            errors.append(f"{where}.{f.name}: expected a string, got {value!r}")


def validate(cfg: SENConfig) -> None:
    """Raise :class:`ConfigError` listing every violation in ``cfg``."""
    errors: list = []
    for name, obj in (("ra", cfg.ra), ("training", cfg.training), ("task", cfg.task)):
        _type_checks(obj, name, errors)
    for i, m in enumerate(cfg.modalities):
        _type_checks(m, f"modalities[{i}]", errors)
    _type_checks(cfg, "config", errors)
    if errors:
        raise ConfigError(errors)

    if not cfg.modalities:
        errors.append("modalities: need at least one modality")
    if cfg.shared_dim < 1:
        errors.append("shared_dim must be >= 1")
    names = [m.name for m in cfg.modalities]
    if len(set(names)) != len(names):
        errors.append(f"modalities: duplicate names {names}")
    if cfg.shared_dim >= 1:
        for enc in cfg.encoder_configs():
            errors.extend(f"modalities: {e}" for e in enc.validate()
                          if "max_prompt_tokens" not in e)
    ra = cfg.ra
    if ra.layers < 0:
        errors.append("ra.layers must be >= 0")
    if ra.fusion not in FUSION_KINDS:
        errors.append(f"ra.fusion: {ra.fusion!r} not in {FUSION_KINDS}")
    if ra.distribution not in DISTRIBUTION_MODES:
        errors.append(f"ra.distribution: {ra.distribution!r} not in {DISTRIBUTION_MODES}")
    if ra.prompt_tokens < 0:
        errors.append("ra.prompt_tokens must be >= 0")
    if ra.passes_mode not in PASSES_MODES:
        errors.append(f"ra.passes_mode: {ra.passes_mode!r} not in {PASSES_MODES}")
    tr = cfg.training
    if tr.base_lr <= 0:
        errors.append("training.base_lr must be > 0")
    if not (0 <= tr.beta1 < 1 and 0 <= tr.beta2 < 1):
        errors.append("training.beta1/beta2 must lie in [0, 1)")
    if tr.weight_decay < 0:
        errors.append("training.weight_decay must be >= 0")
    if tr.steps < 0:
        errors.append("training.steps must be >= 0")
    if tr.batch < 1:
        errors.append("training.batch must be >= 1")
    if tr.schedule not in ("cosine", "constant"):
        errors.append(f"training.schedule: {tr.schedule!r} not in ('cosine', 'constant')")
    if tr.eval_every < 1:
        errors.append("training.eval_every must be >= 1")
    tk = cfg.task
    if tk.kind not in TASK_KINDS:
        errors.append(f"task.kind: {tk.kind!r} not in {TASK_KINDS}")
    if tk.sigma < 0:
        errors.append("task.sigma must be >= 0")
    if tk.n_train < 1 or tk.n_test < 1:
        errors.append("task.n_train and task.n_test must be >= 1")
    if tk.n_train < tr.batch:
        errors.append(f"task.n_train ({tk.n_train}) must be >= training.batch ({tr.batch})")
    if tk.n_modalities is not None and tk.n_modalities < cfg.n_modalities:
        errors.append("task.n_modalities cannot be smaller than the number of model modalities")
    if tk.kind == "parity" and cfg.task_modalities < 2:
        errors.append("task: parity needs at least 2 modalities")
    if tk.kind == "contrastive":
        if tk.classes < 1 or tk.classes > cfg.shared_dim:
            errors.append(f"task.classes must be in [1, shared_dim={cfg.shared_dim}] for orthonormal classes")
        if cfg.n_modalities < 2:
            errors.append("task: contrastive needs a video and an audio modality")
    if tk.kind == "injection":
        if not tk.target_shape or any((not isinstance(s, int)) or s < 1 for s in tk.target_shape):
            errors.append(f"task.target_shape must be positive integers, got {tk.target_shape!r}")
    if len({(m.input_dim, m.seq_len) for m in cfg.modalities}) > 1:
        errors.append("modalities: synthetic tasks need equal input_dim and seq_len across modalities")
    if cfg.arm not in ARMS:
        errors.append(f"arm: {cfg.arm!r} not in {ARMS}")
    if errors:
        raise ConfigError(errors)


def parse_config(document) -> SENConfig:
    """Build a validated config from a JSON string/bytes or an already-parsed dict."""
    if isinstance(document, (bytes, bytearray)):
        document = document.decode("utf-8")
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"malformed JSON: {exc}"]) from exc
    if not isinstance(document, dict):
        raise ConfigError(["top level must be a JSON object"])
    errors: list = []
    top = {f.name for f in fields(SENConfig)}
    for key in document:
        if key not in top:
            errors.append(f"unknown key {key!r}")
    mods_doc = document.get("modalities")
    if mods_doc is None:
        mods_doc = [{"name": n} for n in DEFAULT_MODALITIES]
    modalities = []
    if not isinstance(mods_doc, list):
        errors.append("modalities: expected a list")
    else:
        for i, md in enumerate(mods_doc):
            if isinstance(md, str):
                md = {"name": md}
            m = _section(md, ModalityConfig, f"modalities[{i}]", errors)
            if m is not None:
                modalities.append(m)
    ra = _section(document.get("ra"), RAConfig, "ra", errors)
    training = _section(document.get("training"), TrainingConfig, "training", errors)
    task = _section(document.get("task"), TaskConfig, "task", errors)
    if None in (ra, training, task) or not isinstance(mods_doc, list):
        raise ConfigError(errors or ["malformed section"])
    cfg = SENConfig(modalities=modalities, ra=ra, training=training, task=task,
                    **{k: document[k] for k in ("shared_dim", "arm", "seed") if k in document})
    try:
        validate(cfg)
    except ConfigError as exc:
        errors.extend(exc.errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path) -> SENConfig:
    with open(path, "rb") as fh:
        return parse_config(fh.read())


def default_config(**sections) -> SENConfig:
    return parse_config({}).with_overrides(**sections) if sections else parse_config({})
