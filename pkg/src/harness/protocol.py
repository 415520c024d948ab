"""Task-incremental training protocol.

Each task runs consecutively: one unsupervised Hebbian epoch over the task's
training clips (modulated by the plasticity ledger once a task has been
finalized), ledger finalization, a fresh head trained on frozen features,
then evaluation of every stored head on its own task's test clips.

Every random draw comes from a generator keyed by (seed, task index,
purpose), so a run resumed from a checkpoint replays exactly the draws an
uninterrupted run would make.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from audio.dataset import stack
from learners.extractor import HebbianExtractor
from learners.heads import HeadStore, LinearHead, accuracy, predict, train_head
from learners.plasticity import PlasticityLedger
from models.config import ExperimentConfig
from models.dataset import FoldSplit
from models.result import AccuracyMatrix, SeedResult
from models.task import TaskSequence
from utils.storage import CheckpointError, CheckpointStore

logger = logging.getLogger(__name__)

PURPOSE_SPLIT = 0
PURPOSE_INIT = 1
PURPOSE_HEBBIAN = 2
PURPOSE_HEAD = 3


class HarnessError(RuntimeError):
    """A protocol stage failed; `matrix` holds the rows completed before it."""

    def __init__(self, message: str, matrix: Optional[AccuracyMatrix] = None, stage: Optional[int] = None):
        self.matrix = matrix or AccuracyMatrix()
        self.stage = stage
        super().__init__(message)


def seeded_rng(seed: int, task_index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, task_index, purpose]))


def split_tasks(num_classes: int, sizes: Sequence[int], seed: int) -> TaskSequence:
    """Seeded shuffle of the class indices partitioned by sizes; each task sorted."""
    if any(size < 1 for size in sizes):
        raise ValueError(f"task sizes must be positive, got {list(sizes)}")
    if sum(sizes) > num_classes:
        raise ValueError(f"task sizes sum to {sum(sizes)} but only {num_classes} classes exist")
    order = seeded_rng(seed, 0, PURPOSE_SPLIT).permutation(num_classes)
    tasks, start = [], 0
    for size in sizes:
        tasks.append(sorted(int(c) for c in order[start:start + size]))
        start += size
    return TaskSequence(tasks=tasks, seed=seed)


@dataclass
class ContinualLearner:
    """Shared extractor, its plasticity ledger and the per-task heads."""
    extractor: HebbianExtractor
    ledger: PlasticityLedger
    heads: HeadStore = field(default_factory=HeadStore)


def build_learner(config: ExperimentConfig, seed: int, in_channels: int = 1) -> ContinualLearner:
    arch, hebb, kp = config.architecture, config.hebbian, config.kp
    extractor = HebbianExtractor.build(
        in_channels, arch.channels, arch.kernel_sizes, arch.strides, arch.pool_size,
        seeded_rng(seed, 0, PURPOSE_INIT),
        radius=hebb.radius, base_lr=hebb.base_lr, temperature=hebb.temperature,
        lr_min=hebb.lr_min, clamp_slack=hebb.clamp_slack
    )
    alpha, beta = kp.factors()
    ledger = PlasticityLedger.for_kernel_counts(
        extractor.kernel_counts(), top_fraction=kp.top_fraction, alpha=alpha, beta=beta,
        interval=kp.interval, norm=kp.norm, threshold_mode=kp.threshold_mode
    )
    return ContinualLearner(extractor, ledger)


def hebbian_epoch(learner: ContinualLearner, inputs: np.ndarray, batch_size: int, interval: int,
                  rng: np.random.Generator, kp_enabled: bool, show_progress: bool = False) -> int:
    """One shuffled pass of Hebbian updates with ledger tracking.

    Tracking always runs; modulation applies only when KP is enabled and a
    previous task has been finalized. A trailing partial interval is tracked
    too. Returns the number of batches seen.
    """
    extractor, ledger = learner.extractor, learner.ledger
    modulating = kp_enabled and ledger.ready
    modulated = 0

    def modulate(stage_index, update):
        nonlocal modulated
        kernel_ledger = ledger.layers[stage_index]
        if kernel_ledger.modulation_condition(update):
            modulated += 1
        return kernel_ledger.modulate(update)

    ledger.begin_task(extractor.layer_weights())
    order = rng.permutation(len(inputs))
    pending: List[List[np.ndarray]] = []
    batches = 0
    for bounds in tqdm(batch_bounds(len(order), batch_size), desc='hebbian', disable=not show_progress):
        post_acts = extractor.train_batch(inputs[order[slice(*bounds)]],
                                          modulate if modulating else None)
        pending.append(post_acts)
        batches += 1
        if len(pending) == interval:
            _track(ledger, extractor, pending)
            pending = []
    if pending:
        _track(ledger, extractor, pending)
    if modulating:
        logger.debug("Modulation condition held on %d layer-batches of %d", modulated,
                     batches * len(extractor.stages))
    return batches


def batch_bounds(count: int, batch_size: int) -> List[tuple]:
    """(start, end) pairs covering count items; a lone trailing item joins the previous batch."""
    bounds = [(start, min(start + batch_size, count)) for start in range(0, count, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2:] = [(bounds[-2][0], count)]
    return bounds


def _track(ledger: PlasticityLedger, extractor: HebbianExtractor, pending: List[List[np.ndarray]]):
    per_layer = [np.concatenate(acts, axis=0) for acts in zip(*pending)]
    ledger.track_interval(extractor.layer_weights(), per_layer)


def local_labels(targets: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Global class ids mapped to positions in the head's class list."""
    position = {c: i for i, c in enumerate(classes)}
    return np.array([position[int(t)] for t in targets], dtype=np.int64)


@dataclass
class StageOutcome:
    """What one consecutive training stage produced."""
    head_id: int
    train_loss: float
    val_accuracy: Optional[float]
    protected_counts: List[int]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'head_id': self.head_id,
            'train_loss': self.train_loss,
            'val_accuracy': self.val_accuracy,
            'protected_counts': self.protected_counts
        }


def train_stage(learner: ContinualLearner, config: ExperimentConfig, split: FoldSplit, seed: int,
                task_index: int, classes: Sequence[int], kp_enabled: bool,
                show_progress: bool = False) -> StageOutcome:
    """Hebbian epoch, ledger finalize, then a new head on frozen features."""
    classes = sorted(classes)
    train_x, train_y = stack(split.train, classes)
    if len(train_y) == 0:
        raise ValueError(f"task {task_index} has no training clips for classes {classes}")
    batches = hebbian_epoch(learner, train_x, config.hebbian.batch_size, config.kp.interval,
                            seeded_rng(seed, task_index, PURPOSE_HEBBIAN), kp_enabled, show_progress)
    learner.ledger.finalize_task()
    logger.info("Task %d: Hebbian epoch over %d clips in %d batches", task_index, len(train_y), batches)

    features = learner.extractor.features(train_x)
    head = LinearHead.zeros(task_index, classes, features.shape[1])
    log = train_head(head, features, local_labels(train_y, classes), seeded_rng(seed, task_index, PURPOSE_HEAD),
                     epochs=config.training.head_epochs, lr=config.training.head_lr,
                     batch_size=config.training.head_batch_size)
    learner.heads.add(head)

    val_x, val_y = stack(split.val, classes)
    val_accuracy = None
    if len(val_y):
        val_accuracy = accuracy(head, learner.extractor.features(val_x), local_labels(val_y, classes))
        logger.info("Task %d: validation accuracy %.3f", task_index, val_accuracy)
    protected = [len(protected_set) for protected_set in learner.ledger.protected_sets()]
    return StageOutcome(task_index, log.final_loss, val_accuracy, protected)


def evaluate_task(learner: ContinualLearner, split: FoldSplit, head_id: int, classes: Sequence[int]) -> float:
    """Accuracy of the task's own head on the task's test clips."""
    test_x, test_y = stack(split.test, classes)
    if len(test_y) == 0:
        raise ValueError(f"no test clips for classes {sorted(classes)}")
    predicted = predict(learner.heads, learner.extractor, test_x, head_id)
    return float(np.mean(predicted == test_y))


def evaluate_row(learner: ContinualLearner, split: FoldSplit, sequence: TaskSequence, stage: int) -> List[float]:
    return [evaluate_task(learner, split, sequence.head_id(task), sequence.tasks[task])
            for task in range(stage + 1)]


def _progress(seed: int, config_hash: str, sequence: TaskSequence, kp_enabled: bool, matrix: AccuracyMatrix,
              outcomes: List[StageOutcome]) -> Dict[str, Any]:
    return {
        'seed': seed,
        'config_hash': config_hash,
        'kp_enabled': kp_enabled,
        'tasks': sequence.to_dict(),
        'matrix': matrix.to_dict(),
        'outcomes': [outcome.to_dict() for outcome in outcomes]
    }


def run_til(config: ExperimentConfig, split: FoldSplit, seed: int, kp_enabled: bool, config_hash: str = '',
            checkpoints: Optional[CheckpointStore] = None, resume_path: Optional[str] = None,
            show_progress: bool = False) -> SeedResult:
    """Full task-incremental run for one seed.

    With `checkpoints`, the state after every task is written to disk; with
    `resume_path`, training continues after the task stored there. A failing
    stage raises HarnessError carrying the rows completed so far.
    """
    sequence = split_tasks(split.num_classes, config.tasks.sizes, seed)
    matrix = AccuracyMatrix()
    outcomes: List[StageOutcome] = []
    first_task = 0
    if resume_path:
        extractor, ledger, heads, progress = (checkpoints or CheckpointStore(None)).load(resume_path)
        if progress['seed'] != seed:
            raise CheckpointError(f"checkpoint belongs to seed {progress['seed']}, not {seed}")
        if config_hash and progress['config_hash'] != config_hash:
            raise CheckpointError("checkpoint was written under a different config")
        if progress['kp_enabled'] != kp_enabled:
            raise CheckpointError(f"checkpoint was written with kp_enabled={progress['kp_enabled']}")
        learner = ContinualLearner(extractor, ledger, heads)
        sequence = TaskSequence.from_dict(progress['tasks'])
        matrix = AccuracyMatrix.from_dict(progress['matrix'])
        outcomes = [StageOutcome(**outcome) for outcome in progress['outcomes']]
        first_task = matrix.num_tasks
        logger.info("Seed %d: resuming after task %d from %s", seed, first_task - 1, resume_path)
    else:
        learner = build_learner(config, seed)

    for task_index in range(first_task, len(sequence)):
        try:
            outcome = train_stage(learner, config, split, seed, task_index, sequence.tasks[task_index],
                                  kp_enabled, show_progress)
            row = evaluate_row(learner, split, sequence, task_index)
            matrix.add_row(row)
        except Exception as error:
            raise HarnessError(f"seed {seed}, task {task_index}: {type(error).__name__}: {error}",
                               matrix, task_index) from error
        outcomes.append(outcome)
        logger.info("Seed %d, task %d: accuracies %s", seed, task_index,
                    ' '.join(f"{value:.3f}" for value in row))
        if checkpoints is not None and checkpoints.root is not None:
            checkpoints.save(checkpoints.path_for(seed, task_index), learner.extractor, learner.ledger,
                             learner.heads, _progress(seed, config_hash, sequence, kp_enabled, matrix, outcomes))

    return SeedResult(
        seed=seed,
        matrix=matrix,
        val_accuracies=[outcome.val_accuracy for outcome in outcomes],
        protected_counts=[outcome.protected_counts for outcome in outcomes]
    )


def run_joint(config: ExperimentConfig, split: FoldSplit, seed: int, class_set: Sequence[int],
              show_progress: bool = False) -> float:
    """Non-incremental reference: one model trained directly on the class union."""
    classes = sorted(set(int(c) for c in class_set))
    if not classes:
        raise HarnessError("joint training needs a non-empty class set")
    learner = build_learner(config, seed)
    try:
        train_stage(learner, config, split, seed, 0, classes, kp_enabled=False, show_progress=show_progress)
        value = evaluate_task(learner, split, 0, classes)
    except Exception as error:
        raise HarnessError(f"seed {seed}, joint {len(classes)} classes: {type(error).__name__}: {error}") from error
    logger.info("Seed %d: joint accuracy over %d classes %.3f", seed, len(classes), value)
    return value


def joint_references(config: ExperimentConfig, split: FoldSplit, seed: int,
                     show_progress: bool = False) -> List[float]:
    """Joint accuracy on the cumulative class union at every stage."""
    sequence = split_tasks(split.num_classes, config.tasks.sizes, seed)
    return [run_joint(config, split, seed, sequence.classes_through(stage), show_progress)
            for stage in range(len(sequence))]


def run_common_head(config: ExperimentConfig, split: FoldSplit, seed: int, checkpoint_path: Optional[str]) -> float:
    """One head over every learned class, trained on an incrementally trained extractor."""
    if not checkpoint_path:
        raise HarnessError("common-head needs a completed task-incremental checkpoint")
    extractor, _, _, progress = CheckpointStore(None).load(checkpoint_path)
    sequence = TaskSequence.from_dict(progress['tasks'])
    if AccuracyMatrix.from_dict(progress['matrix']).num_tasks != len(sequence):
        raise HarnessError(f"checkpoint {checkpoint_path} stops before the final task")
    classes = sequence.all_classes()
    train_x, train_y = stack(split.train, classes)
    test_x, test_y = stack(split.test, classes)
    if len(train_y) == 0 or len(test_y) == 0:
        raise HarnessError(f"no clips for the {len(classes)} checkpointed classes")
    features = extractor.features(train_x)
    head = LinearHead.zeros(len(sequence), classes, features.shape[1])
    # same head draws as task 0, so a single-task run reproduces its TIL accuracy
    train_head(head, features, local_labels(train_y, classes), seeded_rng(seed, 0, PURPOSE_HEAD),
               epochs=config.training.head_epochs, lr=config.training.head_lr,
               batch_size=config.training.head_batch_size)
    value = accuracy(head, extractor.features(test_x), local_labels(test_y, classes))
    logger.info("Seed %d: common head over %d classes %.3f", seed, len(classes), value)
    return value
