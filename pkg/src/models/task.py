"""Task sequence model for task-incremental runs."""
from typing import Dict, Any, List
from dataclasses import dataclass

DEFAULT_TASK_SIZES = [30, 5, 5, 5, 5]


@dataclass
class TaskSequence:
    """Ordered disjoint class subsets, one per incremental task."""
    tasks: List[List[int]]
    seed: int

    def __post_init__(self):
        seen = set()
        for index, classes in enumerate(self.tasks):
            if not classes:
                raise ValueError(f"task {index} has no classes")
            overlap = seen.intersection(classes)
            if overlap or len(set(classes)) != len(classes):
                raise ValueError(f"task {index} repeats classes {sorted(overlap) or classes}")
            seen.update(classes)

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def sizes(self) -> List[int]:
        return [len(classes) for classes in self.tasks]

    def classes_through(self, stage: int) -> List[int]:
        """Sorted union of the classes of tasks 0..stage."""
        union = []
        for classes in self.tasks[:stage + 1]:
            union.extend(classes)
        return sorted(union)

    def all_classes(self) -> List[int]:
        return self.classes_through(len(self.tasks) - 1)

    def head_id(self, task_index: int) -> int:
        """Head identifier for a task; heads are keyed by task position."""
        if not 0 <= task_index < len(self.tasks):
            raise IndexError(f"task index {task_index} outside 0..{len(self.tasks) - 1}")
        return task_index

    def to_dict(self) -> Dict[str, Any]:
        """Convert task sequence to dictionary."""
        return {
            'tasks': [list(classes) for classes in self.tasks],
            'seed': self.seed
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TaskSequence':
        """Create task sequence from dictionary."""
        return cls(
            tasks=[[int(c) for c in classes] for classes in data['tasks']],
            seed=int(data.get('seed', 0))
        )
