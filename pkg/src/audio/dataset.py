"""Fold splits, standardization and the on-disk feature cache."""
import logging
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from audio.ingest import DatasetError, load_esc_layout
from audio.synthetic import synth_dataset
from models.config import ExperimentConfig
from models.dataset import ESC_FOLDS, ClipRecord, DatasetSource, FoldSplit
from utils.storage import FeatureCacheStore

logger = logging.getLogger(__name__)


def split_folds(records: List[ClipRecord], test_fold: int, val_fold: int,
                num_classes: Optional[int] = None) -> FoldSplit:
    """One test fold, one validation fold, the rest for training."""
    if test_fold not in ESC_FOLDS or val_fold not in ESC_FOLDS:
        raise DatasetError(f"folds must lie in 1-5, got test={test_fold} val={val_fold}")
    if test_fold == val_fold:
        raise DatasetError("test and validation folds must differ")
    ordered = sorted(records, key=lambda record: record.clip_id)
    if num_classes is None:
        num_classes = max((record.target for record in ordered), default=-1) + 1
    out_of_range = [record.clip_id for record in ordered if record.target >= num_classes]
    if out_of_range:
        raise DatasetError(f"clip {out_of_range[0]} has a class index outside [0, {num_classes})")
    return FoldSplit(
        train=[record for record in ordered if record.fold not in (test_fold, val_fold)],
        val=[record for record in ordered if record.fold == val_fold],
        test=[record for record in ordered if record.fold == test_fold],
        test_fold=test_fold,
        val_fold=val_fold,
        num_classes=num_classes
    )


def standardize(split: FoldSplit) -> FoldSplit:
    """Zero mean, unit variance using statistics of the training folds only."""
    if not split.train:
        raise DatasetError("cannot standardize without training clips")
    train = np.stack([record.features for record in split.train])
    mean = float(train.mean())
    std = float(train.std()) or 1.0

    def rescale(records: List[ClipRecord]) -> List[ClipRecord]:
        return [ClipRecord(record.clip_id, record.target, record.fold, (record.features - mean) / std)
                for record in records]

    metadata = dict(split.metadata, feature_mean=mean, feature_std=std)
    return FoldSplit(rescale(split.train), rescale(split.val), rescale(split.test),
                     split.test_fold, split.val_fold, split.num_classes, metadata)


def stack(records: List[ClipRecord], classes: Optional[List[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(N, 1, n_mels, n_frames) features and global targets, optionally filtered to classes."""
    if classes is not None:
        wanted = set(classes)
        records = [record for record in records if record.target in wanted]
    if not records:
        return np.empty((0,)), np.empty((0,), dtype=np.int64)
    features = np.stack([record.features for record in records])
    return features, np.array([record.target for record in records], dtype=np.int64)


def save_cache(cache: FeatureCacheStore, records: List[ClipRecord], metadata: Dict[str, Any]):
    ordered = sorted(records, key=lambda record: record.clip_id)
    sidecar = dict(metadata,
                   clip_ids=[record.clip_id for record in ordered],
                   targets=[record.target for record in ordered],
                   folds=[record.fold for record in ordered])
    cache.save(np.stack([record.features for record in ordered]), sidecar)


def load_cache(cache: FeatureCacheStore) -> Tuple[List[ClipRecord], Dict[str, Any]]:
    features, sidecar = cache.load()
    if not len(features) == len(sidecar['clip_ids']) == len(sidecar['targets']) == len(sidecar['folds']):
        raise DatasetError("feature cache and sidecar disagree on clip count", path=str(cache.path))
    records = [ClipRecord(clip_id, int(target), int(fold), clip)
               for clip_id, target, fold, clip in zip(sidecar['clip_ids'], sidecar['targets'],
                                                      sidecar['folds'], features)]
    return records, sidecar


def build_records(config: ExperimentConfig, show_progress: bool = False) -> List[ClipRecord]:
    """Records for the configured source, reading the feature cache when present."""
    dataset = config.dataset
    if dataset.source == DatasetSource.SYNTHETIC.value:
        return synth_dataset(dataset.num_classes, dataset.clips_per_class, dataset.seed,
                             n_mels=config.features.n_mels, n_frames=dataset.n_frames,
                             snr_db=dataset.snr_db)
    if dataset.cache_path:
        cache = FeatureCacheStore(dataset.cache_path)
        if cache.exists():
            records, sidecar = load_cache(cache)
            if sidecar.get('mel_spec') != config.features.to_dict():
                raise DatasetError("feature cache was built with a different front-end; re-run prepare",
                                   path=str(cache.path))
            logger.info("Loaded %d clips from cache %s", len(records), cache.path)
            return records
    if not dataset.root:
        raise DatasetError("no feature cache and no dataset root configured")
    return load_esc_layout(dataset.root, dataset.meta_csv, config.features, dataset.clip_seconds,
                           dataset.audio_dir, show_progress=show_progress)


def prepare_cache(config: ExperimentConfig, cache_path: str, show_progress: bool = False) -> FeatureCacheStore:
    """Decode the configured dataset once and write the feature cache."""
    dataset = config.dataset
    if dataset.source == DatasetSource.SYNTHETIC.value:
        records = build_records(config)
    else:
        if not dataset.root:
            raise DatasetError("prepare needs [dataset].root for the esc-layout source")
        records = load_esc_layout(dataset.root, dataset.meta_csv, config.features, dataset.clip_seconds,
                                  dataset.audio_dir, show_progress=show_progress)
    cache = FeatureCacheStore(cache_path)
    save_cache(cache, records, {'source': dataset.source, 'mel_spec': config.features.to_dict()})
    return cache


def load_split(config: ExperimentConfig, show_progress: bool = False) -> FoldSplit:
    """Standardized fold split for a run."""
    dataset = config.dataset
    records = build_records(config, show_progress=show_progress)
    num_classes = dataset.num_classes if dataset.source == DatasetSource.SYNTHETIC.value else None
    split = standardize(split_folds(records, dataset.test_fold, dataset.val_fold, num_classes))
    needed = sum(config.tasks.sizes)
    if needed > split.num_classes:
        raise DatasetError(f"task sizes need {needed} classes but the dataset has {split.num_classes}")
    logger.info("Split: %d train / %d val / %d test clips (test fold %d, val fold %d)",
                len(split.train), len(split.val), len(split.test), split.test_fold, split.val_fold)
    return split
