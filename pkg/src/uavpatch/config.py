"""Run configuration: one YAML file with stage-scoped sections.

Precedence for every key is flag > environment > file > default.
Environment overrides use ``UAVPATCH_<SECTION>__<KEY>`` (for example
``UAVPATCH_ATTACK__STEPS=50``); top-level keys drop the section part
(``UAVPATCH_SEED=3``). Values are parsed as YAML scalars.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attack import AttackConfig
from .datasets import DEFAULT_CLASSES, VISDRONE_CLASS_MAP, SceneConfig
from .defense import DefenseTrainConfig, RestorationModelConfig
from .detector import DetectorTrainConfig, TinyDetectorConfig
from .errors import ConfigError
from .patching import TransformRanges
from .pipeline import ATTACKS, DEFENSES

ENV_PREFIX = "UAVPATCH_"
# keys filled in from the top level / data / patch sections
DERIVED_KEYS = {"seed", "input_size", "classes", "patch_side"}
STAGE_SECTIONS = {"detector", "detector_train", "attack", "defense", "defense_train", "mask_baseline"}


@dataclass
class DataConfig:
    source: str = "toy"  # toy | visdrone
    root: str | None = None  # VisDrone root holding images/ and annotations/ per split
    classes: tuple[str, ...] = DEFAULT_CLASSES
    class_map: dict[int, int] = field(default_factory=lambda: dict(VISDRONE_CLASS_MAP))
    input_size: int = 128
    min_frac: float = 0.001
    filter_test: bool = True  # apply the size filter to the test split too
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 100
    n_objects: tuple[int, int] = (1, 4)
    clutter: float = 0.8
    distractors: tuple[int, int] = (0, 3)
    background: str = "ground"
    texture_dir: str | None = None  # procedural textures when unset
    n_textures: int = 48

    def scene(self) -> SceneConfig:
        return SceneConfig(size=self.input_size, n_objects=tuple(self.n_objects), clutter=self.clutter,
                           background=self.background, min_frac=self.min_frac,
                           distractors=tuple(self.distractors))

    def validate(self):
        if self.source not in ("toy", "visdrone"):
            raise ConfigError(f"data.source: expected 'toy' or 'visdrone', got {self.source!r}")
        if self.source == "visdrone" and not self.root:
            raise ConfigError("data.root: required when data.source is 'visdrone'")
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"data.input_size: must be a positive multiple of 32, got {self.input_size}")
        if not 0 <= self.min_frac < 1:
            raise ConfigError(f"data.min_frac: must lie in [0, 1), got {self.min_frac}")
        for k in ("n_train", "n_val", "n_test"):
            if getattr(self, k) < 1:
                raise ConfigError(f"data.{k}: must be >= 1")
        for src, dst in self.class_map.items():
            if not 0 <= dst < len(self.classes):
                raise ConfigError(f"data.class_map.{src}: class index {dst} outside data.classes")
        try:
            self.scene().validate()
        except ConfigError as e:
            raise ConfigError(f"data: {e}") from None


@dataclass
class PatchConfig:
    side: int = 64
    ranges: TransformRanges = field(default_factory=TransformRanges)
    printable_colors: str | None = None  # "r,g,b" lines; bundled 30-color list when unset

    def validate(self):
        if self.side < 2:
            raise ConfigError("patch.side: must be >= 2")


@dataclass
class EvalConfig:
    attacks: tuple[str, ...] = ATTACKS
    defenses: tuple[str, ...] = DEFENSES
    runs: int = 5
    batch_size: int = 32
    timing: bool = False
    timing_images: int = 100

    def validate(self):
        for a in self.attacks:
            if a not in ATTACKS:
                raise ConfigError(f"eval.attacks: unknown attack {a!r} (choose from {', '.join(ATTACKS)})")
        for d in self.defenses:
            if d not in DEFENSES:
                raise ConfigError(f"eval.defenses: unknown defense {d!r} (choose from {', '.join(DEFENSES)})")
        if self.runs < 1:
            raise ConfigError("eval.runs: must be >= 1")


@dataclass
class RunConfig:
    seed: int | None = None
    out: str = "runs/default"
    device: str = "cpu"
    data: DataConfig = field(default_factory=DataConfig)
    detector: TinyDetectorConfig = field(default_factory=TinyDetectorConfig)
    detector_train: DetectorTrainConfig = field(default_factory=DetectorTrainConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: RestorationModelConfig = field(default_factory=lambda: RestorationModelConfig(input_size=128))
    defense_train: DefenseTrainConfig = field(default_factory=DefenseTrainConfig)
    mask_baseline: DefenseTrainConfig = field(default_factory=DefenseTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        """Validate every stage up front, then push the shared keys into the sections."""
        if self.seed is None:
            raise ConfigError("seed: required (set it in the file, UAVPATCH_SEED or --seed)")
        if self.device != "cpu":
            raise ConfigError(f"device: only 'cpu' is supported, got {self.device!r}")
        self.data.validate()
        self.patch.validate()
        self.eval.validate()
        d = self.data
        self.detector = dataclasses.replace(self.detector, input_size=d.input_size, classes=tuple(d.classes))
        self.defense = dataclasses.replace(self.defense, input_size=d.input_size)
        stage_seeds = {"detector_train": 1, "attack": 2, "defense_train": 3, "mask_baseline": 4}
        for name, offset in stage_seeds.items():
            section = getattr(self, name)
            section.seed = self.seed * 10 + offset
        self.attack.patch_side = self.patch.side
        self.defense_train.patch_side = self.patch.side
        self.mask_baseline.patch_side = self.patch.side
        for name in ("attack", "defense_train", "mask_baseline"):
            try:
                getattr(self, name).validate()
            except ConfigError as e:
                raise ConfigError(f"{name}: {e}") from None
        if self.detector.score_mode not in ("product", "objectness"):
            raise ConfigError(f"detector.score_mode: expected 'product' or 'objectness', "
                              f"got {self.detector.score_mode!r}")
        if self.defense.output_activation not in ("tanh", None):
            raise ConfigError("defense.output_activation: expected 'tanh' or null")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        """Hash of the resolved config, ignoring where outputs go."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce(value, tp, path: str):
    """Convert a YAML value to ``tp``, raising ConfigError that names ``path``."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, path)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError(errors[0] if len(errors) == 1 else f"{path}: expected {_type_name(tp)}, got {value!r}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return build_dataclass(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        kt, vt = args
        return {_coerce(k, kt, f"{path}.{k}"): _coerce(v, vt, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected true/false, got {value!r}")
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lstrip("-").isdigit():
            return int(value)
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if tp is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def build_dataclass(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    if path in STAGE_SECTIONS:
        names -= DERIVED_KEYS
    kwargs = {}
    for key, value in data.items():
        key_path = f"{path}.{key}" if path else str(key)
        if path in STAGE_SECTIONS and key in DERIVED_KEYS:
            raise ConfigError(f"{key_path}: set by the top-level config, not per section")
        if key not in names:
            raise ConfigError(f"{key_path}: unknown key (allowed: {', '.join(sorted(names))})")
        kwargs[key] = _coerce(value, hints[key], key_path)
    return cls(**kwargs)


def _set_path(tree: dict, keys: list[str], value):
    for k in keys[:-1]:
        node = tree.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{'.'.join(keys)}: {k} is not a section")
        tree = node
    tree[keys[-1]] = value


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    tree: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__") if k]
        if not keys:
            continue
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"{'.'.join(keys)}: environment value {raw!r} is not valid YAML ({e})") from None
        _set_path(tree, keys, value)
    return tree


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping at the top level")
    return data


def load_config(path=None, flags: dict | None = None, environ=None) -> RunConfig:
    """Resolve file, environment and flag layers into a validated RunConfig.

    ``flags`` is a nested dict of explicit overrides (None values are ignored).
    """
    tree = read_config_file(path) if path is not None else {}
    tree = _merge(tree, env_overrides(environ))
    clean_flags: dict = {}
    for dotted, value in (flags or {}).items():
        if value is not None:
            _set_path(clean_flags, dotted.split("."), value)
    tree = _merge(tree, clean_flags)
    return build_dataclass(RunConfig, tree).validate()


def dump_config(cfg: RunConfig, path):
    """Write the resolved config as a loadable file.

    The output path is left out so reruns elsewhere match byte for byte, and
    keys derived from the top level are dropped from the stage sections.
    """
    d = cfg.to_dict()
    d.pop("out")
    for section in STAGE_SECTIONS:
        for key in DERIVED_KEYS:
            d[section].pop(key, None)
    Path(path).write_text(yaml.safe_dump(d, sort_keys=True))
