"""Result models: accuracy matrices and run reports."""
from typing import Dict, Any, List, Optional
from dataclasses import dataclass, field
from enum import Enum

INDEX_CONVENTION = "a[l][j] = accuracy on task j after training through task l"
FM_CONVENTION = "fm terms clipped at 0: max(0, best earlier accuracy - current accuracy)"


class RunStatus(str, Enum):
    """Run report status."""
    COMPLETED = "completed"
    PARTIAL = "partial"
    FAILED = "failed"


@dataclass
class AccuracyMatrix:
    """Lower-triangular accuracies: rows[l][j] for j <= l."""
    rows: List[List[float]] = field(default_factory=list)

    def __post_init__(self):
        rows, self.rows = self.rows, []
        for row in rows:
            self.add_row(row)

    @property
    def num_tasks(self) -> int:
        return len(self.rows)

    def add_row(self, row: List[float]):
        """Append the accuracies measured after training the next task."""
        if len(row) != len(self.rows) + 1:
            raise ValueError(f"row {len(self.rows)} needs {len(self.rows) + 1} entries, got {len(row)}")
        for value in row:
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"accuracy {value} outside [0, 1]")
        self.rows.append([float(value) for value in row])

    def get(self, stage: int, task: int) -> float:
        if not 0 <= task <= stage < len(self.rows):
            raise IndexError(f"a[{stage}][{task}] is not defined for {len(self.rows)} tasks")
        return self.rows[stage][task]

    def overall(self, stage: int) -> float:
        """Unweighted mean over every task learned through the stage."""
        row = self.rows[stage]
        return sum(row) / len(row)

    def previous(self, stage: int) -> Optional[float]:
        """Unweighted mean over tasks before the stage's own task."""
        if stage == 0:
            return None
        row = self.rows[stage][:stage]
        return sum(row) / len(row)

    def last(self, stage: int) -> float:
        return self.rows[stage][stage]

    def to_dict(self) -> Dict[str, Any]:
        """Convert matrix to dictionary."""
        return {
            'rows': [list(row) for row in self.rows],
            'index_convention': INDEX_CONVENTION
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AccuracyMatrix':
        """Create matrix from dictionary."""
        return cls(rows=[list(map(float, row)) for row in data.get('rows', [])])


@dataclass
class SeedResult:
    """Outcome of one seed of a run."""
    seed: int
    matrix: AccuracyMatrix
    joint_references: List[float] = field(default_factory=list)
    metrics: Dict[str, List[Optional[float]]] = field(default_factory=dict)
    val_accuracies: List[float] = field(default_factory=list)
    protected_counts: List[List[int]] = field(default_factory=list)
    error: Optional[str] = None
    joint_error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert seed result to dictionary."""
        return {
            'seed': self.seed,
            'matrix': self.matrix.to_dict(),
            'joint_references': self.joint_references,
            'metrics': self.metrics,
            'val_accuracies': self.val_accuracies,
            'protected_counts': self.protected_counts,
            'error': self.error,
            'joint_error': self.joint_error
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SeedResult':
        """Create seed result from dictionary."""
        return cls(
            seed=int(data['seed']),
            matrix=AccuracyMatrix.from_dict(data.get('matrix', {})),
            joint_references=list(data.get('joint_references', [])),
            metrics=dict(data.get('metrics', {})),
            val_accuracies=list(data.get('val_accuracies', [])),
            protected_counts=list(data.get('protected_counts', [])),
            error=data.get('error'),
            joint_error=data.get('joint_error')
        )


@dataclass
class RunReport:
    """Self-contained record of one CLI run."""
    mode: str
    config: Dict[str, Any]
    config_hash: str
    kp_enabled: bool
    kp_profile: str
    software_version: str
    status: RunStatus = RunStatus.COMPLETED
    seeds: List[SeedResult] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    index_convention: str = INDEX_CONVENTION
    fm_convention: str = FM_CONVENTION
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """Convert report to dictionary."""
        return {
            'mode': self.mode,
            'config': self.config,
            'config_hash': self.config_hash,
            'kp_enabled': self.kp_enabled,
            'kp_profile': self.kp_profile,
            'software_version': self.software_version,
            'status': self.status.value if isinstance(self.status, RunStatus) else self.status,
            'seeds': [seed.to_dict() for seed in self.seeds],
            'wall_clock_seconds': self.wall_clock_seconds,
            'index_convention': self.index_convention,
            'fm_convention': self.fm_convention,
            'extra': self.extra
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunReport':
        """Create report from dictionary."""
        return cls(
            mode=data['mode'],
            config=data['config'],
            config_hash=data['config_hash'],
            kp_enabled=bool(data['kp_enabled']),
            kp_profile=data.get('kp_profile', 'reported'),
            software_version=data.get('software_version', ''),
            status=RunStatus(data.get('status', 'completed')),
            seeds=[SeedResult.from_dict(seed) for seed in data.get('seeds', [])],
            wall_clock_seconds=float(data.get('wall_clock_seconds', 0.0)),
            index_convention=data.get('index_convention', INDEX_CONVENTION),
            fm_convention=data.get('fm_convention', FM_CONVENTION),
            extra=dict(data.get('extra', {}))
        )
