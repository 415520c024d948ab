"""Experiment configuration model and TOML profile loader."""
import re
import sys
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Dict, Any, List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from models.dataset import DatasetSource, MelSpec
from models.task import DEFAULT_TASK_SIZES


class ConfigError(ValueError):
    """Invalid configuration; `line` points into the profile when known."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        location = ''
        if path and line:
            location = f"{path}:{line}: "
        elif line:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")


class RunMode(str, Enum):
    """Experiment mode driven by the CLI."""
    TIL = "til"
    JOINT = "joint"
    COMMON_HEAD = "common-head"
    COMPARE = "compare"


class KpProfile(str, Enum):
    """Provenance of the alpha/beta modulation factors."""
    REPORTED = "reported"
    PLASTICITY_BOOST = "plasticity-boost"
    CUSTOM = "custom"


KP_PROFILE_FACTORS = {
    KpProfile.REPORTED: (0.15, 0.9),
    KpProfile.PLASTICITY_BOOST: (1.5, 0.9),
}


@dataclass
class DatasetConfig:
    source: str = DatasetSource.SYNTHETIC.value
    root: Optional[str] = None
    meta_csv: str = "meta/esc50.csv"
    audio_dir: str = "audio"
    cache_path: Optional[str] = None
    test_fold: int = 1
    val_fold: int = 2
    clip_seconds: float = 5.0
    num_classes: int = 50
    clips_per_class: int = 40
    snr_db: float = 6.0
    n_frames: int = 32
    seed: int = 0


@dataclass
class ArchitectureConfig:
    channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    kernel_sizes: List[int] = field(default_factory=lambda: [3, 3, 3, 3, 3])
    strides: List[int] = field(default_factory=lambda: [1, 1, 1, 1, 1])
    pool_size: int = 2


@dataclass
class HebbianConfig:
    temperature: float = 1.0
    radius: float = 1.0
    base_lr: float = 0.05
    lr_min: float = 1e-4
    clamp_slack: float = 0.1
    batch_size: int = 16


@dataclass
class KpConfig:
    enabled: bool = True
    profile: str = KpProfile.REPORTED.value
    top_fraction: float = 0.6
    alpha: Optional[float] = None
    beta: Optional[float] = None
    interval: int = 5
    norm: str = "l1"
    threshold_mode: str = "batch"

    def factors(self) -> Tuple[float, float]:
        """Resolved (alpha, beta): explicit values override the profile."""
        default_alpha, default_beta = KP_PROFILE_FACTORS.get(
            KpProfile(self.profile), KP_PROFILE_FACTORS[KpProfile.REPORTED])
        alpha = default_alpha if self.alpha is None else self.alpha
        beta = default_beta if self.beta is None else self.beta
        return alpha, beta

    @property
    def provenance(self) -> str:
        if self.alpha is not None or self.beta is not None:
            return KpProfile.CUSTOM.value
        return self.profile


@dataclass
class TrainingConfig:
    head_epochs: int = 50
    head_lr: float = 0.01
    head_batch_size: int = 32


@dataclass
class TasksConfig:
    sizes: List[int] = field(default_factory=lambda: list(DEFAULT_TASK_SIZES))


@dataclass
class RunConfig:
    mode: str = RunMode.TIL.value
    seed: int = 0
    num_seeds: int = 10
    out_dir: str = "results"
    checkpoint: Optional[str] = None


SECTIONS = {
    'dataset': DatasetConfig,
    'architecture': ArchitectureConfig,
    'hebbian': HebbianConfig,
    'kp': KpConfig,
    'training': TrainingConfig,
    'tasks': TasksConfig,
    'run': RunConfig,
}


class _KeyLocator:
    """Finds the line of `key = ...` inside `[section]` of a TOML text."""

    def __init__(self, text: str):
        self.lines: Dict[Tuple[str, str], int] = {}
        self.section_lines: Dict[str, int] = {}
        section = ''
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            header = re.match(r'^\[([A-Za-z0-9_.-]+)\]', line)
            if header:
                section = header.group(1)
                self.section_lines.setdefault(section, number)
                continue
            assignment = re.match(r'^([A-Za-z0-9_-]+)\s*=', line)
            if assignment:
                self.lines.setdefault((section, assignment.group(1)), number)

    def find(self, section: str, key: Optional[str] = None) -> Optional[int]:
        if key is not None and (section, key) in self.lines:
            return self.lines[(section, key)]
        return self.section_lines.get(section)


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration."""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    features: MelSpec = field(default_factory=MelSpec)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    hebbian: HebbianConfig = field(default_factory=HebbianConfig)
    kp: KpConfig = field(default_factory=KpConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    tasks: TasksConfig = field(default_factory=TasksConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def seeds(self) -> List[int]:
        return list(range(self.run.seed, self.run.seed + self.run.num_seeds))

    def to_dict(self) -> Dict[str, Any]:
        """Convert config to dictionary."""
        data = {name: _section_to_dict(getattr(self, name)) for name in SECTIONS}
        data['features'] = self.features.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any], locator: Optional[_KeyLocator] = None,
                  path: Optional[str] = None) -> 'ExperimentConfig':
        """Create and validate a config from a parsed profile."""
        locator = locator or _KeyLocator('')
        for name in data:
            if name not in SECTIONS and name != 'features':
                raise ConfigError(f"unknown section [{name}]", locator.find(name), path)
        sections = {name: _build_section(section_cls, name, data.get(name, {}), locator, path)
                    for name, section_cls in SECTIONS.items()}
        features_data = data.get('features', {})
        unknown = set(features_data) - {f.name for f in fields(MelSpec)}
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown key [features].{key}", locator.find('features', key), path)
        try:
            features = MelSpec.from_dict(features_data)
        except (TypeError, ValueError) as error:
            raise ConfigError(f"[features]: {error}", locator.find('features'), path) from error
        config = cls(features=features, **sections)
        config.validate(locator, path)
        return config

    def validate(self, locator: Optional[_KeyLocator] = None, path: Optional[str] = None):
        """Check ranges and cross-field constraints; raises ConfigError."""
        locator = locator or _KeyLocator('')

        def fail(section: str, key: str, message: str):
            raise ConfigError(f"[{section}].{key}: {message}", locator.find(section, key), path)

        dataset = self.dataset
        if dataset.source not in {source.value for source in DatasetSource}:
            fail('dataset', 'source', f"unknown source '{dataset.source}'")
        if dataset.source == DatasetSource.ESC_LAYOUT.value and not (dataset.root or dataset.cache_path):
            fail('dataset', 'root', "esc-layout source needs root or cache_path")
        for key in ('test_fold', 'val_fold'):
            if getattr(dataset, key) not in (1, 2, 3, 4, 5):
                fail('dataset', key, "fold must lie in 1-5")
        if dataset.test_fold == dataset.val_fold:
            fail('dataset', 'val_fold', "validation and test folds must differ")
        for key in ('num_classes', 'clips_per_class', 'n_frames'):
            if getattr(dataset, key) < 1:
                fail('dataset', key, "must be positive")
        if dataset.clip_seconds <= 0:
            fail('dataset', 'clip_seconds', "must be positive")
        if dataset.seed < 0:
            fail('dataset', 'seed', "must be non-negative")

        arch = self.architecture
        if not arch.channels or any(c < 1 for c in arch.channels):
            fail('architecture', 'channels', "needs positive channel counts")
        for key in ('kernel_sizes', 'strides'):
            values = getattr(arch, key)
            if len(values) != len(arch.channels):
                fail('architecture', key, f"needs {len(arch.channels)} entries, one per layer")
            if any(v < 1 for v in values):
                fail('architecture', key, "entries must be positive")
        if arch.pool_size < 1:
            fail('architecture', 'pool_size', "must be positive")

        hebb = self.hebbian
        for key in ('temperature', 'radius', 'base_lr'):
            if getattr(hebb, key) <= 0:
                fail('hebbian', key, "must be positive")
        if not 0 <= hebb.lr_min <= hebb.base_lr:
            fail('hebbian', 'lr_min', "must lie in [0, base_lr]")
        if hebb.clamp_slack < 0:
            fail('hebbian', 'clamp_slack', "must be nonnegative")
        if hebb.batch_size < 1:
            fail('hebbian', 'batch_size', "must be positive")

        kp = self.kp
        if kp.profile not in {profile.value for profile in KpProfile} or kp.profile == KpProfile.CUSTOM.value:
            fail('kp', 'profile', f"unknown profile '{kp.profile}' "
                 f"(use {KpProfile.REPORTED.value} or {KpProfile.PLASTICITY_BOOST.value})")
        if not 0.0 <= kp.top_fraction <= 1.0:
            fail('kp', 'top_fraction', "must lie in [0, 1]")
        alpha, beta = kp.factors()
        if not 0.0 <= beta <= 1.0:
            fail('kp', 'beta', "must lie in [0, 1]")
        if kp.profile == KpProfile.REPORTED.value and not 0.0 <= alpha <= 1.0:
            fail('kp', 'alpha', "must lie in [0, 1] for the reported profile")
        if kp.profile == KpProfile.PLASTICITY_BOOST.value and not alpha > 1.0:
            fail('kp', 'alpha', "must exceed 1 for the plasticity-boost profile")
        if kp.interval < 1:
            fail('kp', 'interval', "must be positive")
        if kp.norm not in ('l1', 'l2'):
            fail('kp', 'norm', "must be l1 or l2")
        if kp.threshold_mode not in ('interval', 'batch'):
            fail('kp', 'threshold_mode', "must be interval or batch")

        training = self.training
        for key in ('head_epochs', 'head_batch_size'):
            if getattr(training, key) < 1:
                fail('training', key, "must be positive")
        if training.head_lr <= 0:
            fail('training', 'head_lr', "must be positive")

        sizes = self.tasks.sizes
        if not sizes or any(size < 1 for size in sizes):
            fail('tasks', 'sizes', "needs positive task sizes")
        if dataset.source == DatasetSource.SYNTHETIC.value and sum(sizes) > dataset.num_classes:
            fail('tasks', 'sizes', f"sum {sum(sizes)} exceeds {dataset.num_classes} classes")

        if self.run.mode not in {mode.value for mode in RunMode}:
            fail('run', 'mode', f"unknown mode '{self.run.mode}'")
        if self.run.num_seeds < 1:
            fail('run', 'num_seeds', "must be positive")


def _section_to_dict(section) -> Dict[str, Any]:
    return {f.name: (list(getattr(section, f.name)) if isinstance(getattr(section, f.name), list)
                     else getattr(section, f.name)) for f in fields(section)}


def _coerce(value: Any, default: Any, name: str) -> Any:
    """Coerce a TOML value to the type of the field default."""
    if value is None:
        if default is None:
            return None
        raise TypeError(f"{name} may not be empty")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"{name} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{name} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise TypeError(f"{name} must be a list of integers")
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError(f"{name} must be a string")
        return value
    # Optional fields: numbers stay numbers, anything else must be a string
    if isinstance(value, bool):
        raise TypeError(f"{name} has an unexpected boolean")
    return float(value) if isinstance(value, (int, float)) else str(value)


def _build_section(section_cls, name: str, data: Dict[str, Any], locator: _KeyLocator,
                   path: Optional[str]):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table", locator.find(name), path)
    defaults = section_cls()
    known = {f.name for f in fields(section_cls)}
    values = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key [{name}].{key}", locator.find(name, key), path)
        try:
            values[key] = _coerce(value, getattr(defaults, key), f"[{name}].{key}")
        except TypeError as error:
            raise ConfigError(str(error), locator.find(name, key), path) from error
    return section_cls(**values)


def _decode_line(error: Exception) -> Optional[int]:
    lineno = getattr(error, 'lineno', None)
    if lineno:
        return int(lineno)
    match = re.search(r'line (\d+)', str(error))
    return int(match.group(1)) if match else None


def parse_config(text: str, path: Optional[str] = None) -> ExperimentConfig:
    """Parse and validate a TOML profile given as text."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as error:
        raise ConfigError(f"malformed TOML: {error}", _decode_line(error), path) from error
    return ExperimentConfig.from_dict(data, _KeyLocator(text), path)


def load_config(path: str) -> ExperimentConfig:
    """Load and validate a TOML profile from disk."""
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(config_path.read_text(encoding='utf-8'), str(config_path))
