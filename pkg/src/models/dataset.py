"""Clip, feature-front-end and fold models."""
from typing import Dict, Any, List, Optional
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

ESC_FOLDS = (1, 2, 3, 4, 5)


class DatasetSource(str, Enum):
    """Where clips come from."""
    ESC_LAYOUT = "esc-layout"
    SYNTHETIC = "synthetic"


@dataclass
class MelSpec:
    """Log-mel front-end parameters."""
    sample_rate: int = 44100
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 64
    fmin: float = 0.0
    fmax: Optional[float] = None
    log_floor: float = 1e-6

    def __post_init__(self):
        if self.fmax is None:
            self.fmax = self.sample_rate / 2.0
        if self.n_mels < 1:
            raise ValueError(f"n_mels must be at least 1, got {self.n_mels}")
        if self.fmax > self.sample_rate / 2.0:
            raise ValueError(f"fmax {self.fmax} exceeds Nyquist {self.sample_rate / 2.0}")
        if not 0 <= self.fmin < self.fmax:
            raise ValueError(f"fmin must lie in [0, fmax), got {self.fmin}")
        if self.n_fft < 1 or self.hop < 1:
            raise ValueError("n_fft and hop must be positive")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def n_frames(self, num_samples: int) -> int:
        return 1 + (num_samples - self.n_fft) // self.hop

    def to_dict(self) -> Dict[str, Any]:
        """Convert mel spec to dictionary."""
        return {
            'sample_rate': self.sample_rate,
            'n_fft': self.n_fft,
            'hop': self.hop,
            'n_mels': self.n_mels,
            'fmin': self.fmin,
            'fmax': self.fmax,
            'log_floor': self.log_floor
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MelSpec':
        """Create mel spec from dictionary."""
        return cls(
            sample_rate=int(data.get('sample_rate', 44100)),
            n_fft=int(data.get('n_fft', 1024)),
            hop=int(data.get('hop', 512)),
            n_mels=int(data.get('n_mels', 64)),
            fmin=float(data.get('fmin', 0.0)),
            fmax=None if data.get('fmax') is None else float(data['fmax']),
            log_floor=float(data.get('log_floor', 1e-6))
        )


@dataclass
class ClipRecord:
    """One labelled clip and its [1, n_mels, n_frames] features."""
    clip_id: str
    target: int
    fold: int
    features: np.ndarray

    def __post_init__(self):
        if self.target < 0:
            raise ValueError(f"clip {self.clip_id}: negative class index {self.target}")
        if self.fold not in ESC_FOLDS:
            raise ValueError(f"clip {self.clip_id}: fold {self.fold} outside 1-5")
        if self.features.ndim != 3 or self.features.shape[0] != 1:
            raise ValueError(f"clip {self.clip_id}: features must be [1, n_mels, n_frames], "
                             f"got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"clip {self.clip_id}: non-finite feature values")


@dataclass
class FoldSplit:
    """Train / validation / test partition by fold."""
    train: List[ClipRecord]
    val: List[ClipRecord]
    test: List[ClipRecord]
    test_fold: int
    val_fold: int
    num_classes: int
    metadata: Dict[str, Any] = field(default_factory=dict)

    def clip_ids(self, part: str) -> List[str]:
        return [record.clip_id for record in getattr(self, part)]
