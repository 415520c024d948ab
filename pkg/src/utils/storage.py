"""Storage for checkpoints, feature caches and run reports."""
import csv
import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Any, List, Optional, Tuple

import numpy as np

from learners.extractor import ExtractorStage, HebbianExtractor, PoolKind
from learners.heads import HeadStore, LinearHead
from learners.plasticity import KernelLedger, PlasticityLedger
from learners.softhebb import HebbianConvLayer
from models.result import AccuracyMatrix, RunReport
from numerics.tensor_ops import BatchNormState

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HTCK"
CHECKPOINT_VERSION = 1
FEATURE_CACHE_MAGIC = b"HTIL"
FEATURE_CACHE_VERSION = 1
RESULTS_COLUMNS = ['stage', 'task', 'metric', 'value', 'seed', 'kp_enabled']
_DIGEST_SIZE = hashlib.sha256().digest_size


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt or incompatible checkpoints."""


def _canonical_json(data: Dict[str, Any]) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(',', ':')).encode()


def encode_checkpoint(state: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> bytes:
    """Serialize scalars plus named float64 arrays with a trailing SHA-256."""
    directory = []
    payload = bytearray()
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name], dtype='<f8')
        directory.append({'name': name, 'shape': list(array.shape), 'offset': len(payload)})
        payload.extend(array.tobytes())
    meta = _canonical_json({'state': state, 'arrays': directory})
    body = struct.pack('<4sII', CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta)) + meta + bytes(payload)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Inverse of encode_checkpoint; verifies magic, version and checksum."""
    header_size = struct.calcsize('<4sII')
    if len(blob) < header_size + _DIGEST_SIZE:
        raise CheckpointError("checkpoint truncated")
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    magic, version, meta_len = struct.unpack('<4sII', body[:header_size])
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    try:
        meta = json.loads(body[header_size:header_size + meta_len])
    except ValueError as error:
        raise CheckpointError(f"checkpoint metadata unreadable: {error}") from error
    payload = body[header_size + meta_len:]
    arrays = {}
    for entry in meta['arrays']:
        count = int(np.prod(entry['shape'], dtype=np.int64))
        start = entry['offset']
        values = np.frombuffer(payload, dtype='<f8', count=count, offset=start)
        arrays[entry['name']] = values.astype(np.float64).reshape(entry['shape'])
    return meta['state'], arrays


def snapshot_training_state(extractor: HebbianExtractor, ledger: PlasticityLedger, heads: HeadStore,
                            progress: Dict[str, Any]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Split the full training state into JSON scalars and float64 arrays."""
    arrays: Dict[str, np.ndarray] = {}
    stages = []
    for index, stage in enumerate(extractor.stages):
        prefix = f"stage{index}"
        arrays[f"{prefix}.weights"] = stage.layer.weights
        arrays[f"{prefix}.rates"] = stage.layer.rates
        arrays[f"{prefix}.bn.running_mean"] = stage.norm.running_mean
        arrays[f"{prefix}.bn.running_var"] = stage.norm.running_var
        arrays[f"{prefix}.bn.gamma"] = stage.norm.gamma
        arrays[f"{prefix}.bn.beta"] = stage.norm.beta
        stages.append({
            'layer': stage.layer.hyperparameters(),
            'pool': stage.pool.value,
            'pool_size': stage.pool_size,
            'bn': {'momentum': stage.norm.momentum, 'eps': stage.norm.eps,
                   'batches_seen': stage.norm.batches_seen}
        })
    ledgers = []
    for index, kernel_ledger in enumerate(ledger.layers):
        prefix = f"ledger{index}"
        arrays[f"{prefix}.avg_change"] = kernel_ledger.avg_change
        arrays[f"{prefix}.change_sum"] = kernel_ledger.change_sum
        arrays[f"{prefix}.cum_activation"] = kernel_ledger.cum_activation
        arrays[f"{prefix}.protected"] = np.array(sorted(kernel_ledger.protected), dtype=np.float64)
        if kernel_ledger.snapshot is not None:
            arrays[f"{prefix}.snapshot"] = kernel_ledger.snapshot
        ledgers.append({
            'settings': kernel_ledger.settings(),
            'tasks_merged': kernel_ledger.tasks_merged,
            'intervals_seen': kernel_ledger.intervals_seen,
            'has_snapshot': kernel_ledger.snapshot is not None
        })
    head_meta = []
    for task_id in heads.task_ids():
        head = heads.heads[task_id]
        arrays[f"head{task_id}.weight"] = head.weight
        arrays[f"head{task_id}.bias"] = head.bias
        head_meta.append(head.to_dict())
    state = {'stages': stages, 'ledger': ledgers, 'heads': head_meta, 'progress': progress}
    return state, arrays


def restore_training_state(state: Dict[str, Any], arrays: Dict[str, np.ndarray]
                           ) -> Tuple[HebbianExtractor, PlasticityLedger, HeadStore, Dict[str, Any]]:
    """Rebuild extractor, ledger and heads from a decoded checkpoint."""
    try:
        stages = []
        for index, meta in enumerate(state['stages']):
            prefix = f"stage{index}"
            layer = HebbianConvLayer.from_state(meta['layer'], arrays[f"{prefix}.weights"],
                                                arrays[f"{prefix}.rates"])
            norm = BatchNormState(
                running_mean=arrays[f"{prefix}.bn.running_mean"],
                running_var=arrays[f"{prefix}.bn.running_var"],
                gamma=arrays[f"{prefix}.bn.gamma"],
                beta=arrays[f"{prefix}.bn.beta"],
                momentum=meta['bn']['momentum'],
                eps=meta['bn']['eps'],
                batches_seen=meta['bn']['batches_seen']
            )
            stages.append(ExtractorStage(norm, layer, PoolKind(meta['pool']), meta['pool_size']))
        kernel_ledgers = []
        for index, meta in enumerate(state['ledger']):
            prefix = f"ledger{index}"
            kernel_ledger = KernelLedger(**meta['settings'])
            kernel_ledger.avg_change = arrays[f"{prefix}.avg_change"]
            kernel_ledger.change_sum = arrays[f"{prefix}.change_sum"]
            kernel_ledger.cum_activation = arrays[f"{prefix}.cum_activation"]
            kernel_ledger.protected = {int(j) for j in arrays[f"{prefix}.protected"]}
            kernel_ledger.tasks_merged = meta['tasks_merged']
            kernel_ledger.intervals_seen = meta['intervals_seen']
            kernel_ledger.snapshot = arrays[f"{prefix}.snapshot"] if meta['has_snapshot'] else None
            kernel_ledgers.append(kernel_ledger)
        heads = HeadStore()
        for meta in state['heads']:
            task_id = meta['task_id']
            heads.add(LinearHead(task_id, list(meta['classes']),
                                 arrays[f"head{task_id}.weight"], arrays[f"head{task_id}.bias"]))
    except KeyError as error:
        raise CheckpointError(f"checkpoint is missing {error}") from error
    return HebbianExtractor(stages), PlasticityLedger(kernel_ledgers), heads, state['progress']


class CheckpointStore:
    """Manages per-seed, per-task training checkpoints under a directory."""

    def __init__(self, root: Optional[str]):
        self.root = Path(root) if root else None

    def path_for(self, seed: int, task_index: int) -> Optional[Path]:
        if self.root is None:
            return None
        return self.root / f"seed-{seed}" / f"task-{task_index}.ckpt"

    def for_variant(self, suffix: str) -> 'CheckpointStore':
        """Store under a subdirectory, so compare-mode variants keep separate checkpoints."""
        if self.root is None:
            return CheckpointStore(None)
        return CheckpointStore(str(self.root / suffix.strip('-')))

    def save(self, path: Path, extractor: HebbianExtractor, ledger: PlasticityLedger, heads: HeadStore,
             progress: Dict[str, Any]) -> Path:
        """Write a checkpoint; the parent directory is created if needed."""
        state, arrays = snapshot_training_state(extractor, ledger, heads, progress)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(state, arrays))
        logger.debug("Checkpoint written to %s", path)
        return path

    def load(self, path) -> Tuple[HebbianExtractor, PlasticityLedger, HeadStore, Dict[str, Any]]:
        """Read a checkpoint written by save."""
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        state, arrays = decode_checkpoint(path.read_bytes())
        return restore_training_state(state, arrays)


class FeatureCacheStore:
    """Binary feature cache (HTIL) with a JSON sidecar for clip metadata."""

    def __init__(self, path):
        self.path = Path(path)
        self.sidecar = self.path.with_name(self.path.name + '.json')

    def exists(self) -> bool:
        return self.path.is_file() and self.sidecar.is_file()

    def save(self, features: np.ndarray, metadata: Dict[str, Any]):
        """Write features as float32 little-endian plus the metadata sidecar."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        header = struct.pack('<4sII', FEATURE_CACHE_MAGIC, FEATURE_CACHE_VERSION, features.ndim)
        header += struct.pack(f'<{features.ndim}I', *features.shape)
        self.path.write_bytes(header + np.ascontiguousarray(features, dtype='<f4').tobytes())
        self.sidecar.write_text(json.dumps(metadata, sort_keys=True, indent=2), encoding='utf-8')
        logger.info("Feature cache written: %s %s", self.path, tuple(features.shape))

    def load(self) -> Tuple[np.ndarray, Dict[str, Any]]:
        """Read features back as float64 together with the sidecar metadata."""
        blob = self.path.read_bytes()
        head = struct.calcsize('<4sII')
        if len(blob) < head:
            raise CheckpointError(f"feature cache truncated: {self.path}")
        magic, version, ndim = struct.unpack('<4sII', blob[:head])
        if magic != FEATURE_CACHE_MAGIC:
            raise CheckpointError(f"not a feature cache (magic {magic!r})")
        if version != FEATURE_CACHE_VERSION:
            raise CheckpointError(f"feature cache version {version} unsupported")
        dims = struct.unpack(f'<{ndim}I', blob[head:head + 4 * ndim])
        count = int(np.prod(dims, dtype=np.int64))
        payload = np.frombuffer(blob, dtype='<f4', count=count, offset=head + 4 * ndim)
        metadata = json.loads(self.sidecar.read_text(encoding='utf-8'))
        return payload.astype(np.float64).reshape(dims), metadata


class ReportStore:
    """Writes run reports and CSV tables into an output directory."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)

    def save_report(self, report: RunReport, name: str = 'report.json') -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding='utf-8')
        return path

    def save_csv(self, name: str, columns: List[str], rows: List[Dict[str, Any]]) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        with path.open('w', newline='', encoding='utf-8') as handle:
            writer = csv.DictWriter(handle, fieldnames=columns)
            writer.writeheader()
            for row in rows:
                writer.writerow({column: row.get(column, '') for column in columns})
        return path

    def save_results(self, rows: List[Dict[str, Any]], name: str = 'results.csv') -> Path:
        """Long-format results: stage,task,metric,value,seed,kp_enabled."""
        return self.save_csv(name, RESULTS_COLUMNS, rows)


def load_report(path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text(encoding='utf-8')))


def load_matrices(path) -> List[AccuracyMatrix]:
    """Accuracy matrices from a run report or a bare {"rows": [...]} JSON file."""
    data = json.loads(Path(path).read_text(encoding='utf-8'))
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    try:
        if 'rows' in data:
            return [AccuracyMatrix.from_dict(data)]
        if 'seeds' in data:
            return [seed.matrix for seed in RunReport.from_dict(data).seeds]
    except (KeyError, TypeError) as error:
        raise ValueError(f"{path}: malformed content ({type(error).__name__}: {error})") from error
    raise ValueError(f"{path}: neither an accuracy matrix nor a run report")
