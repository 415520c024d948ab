"""WAV decoding, log-mel features and ESC-50-layout metadata loading."""
import io
import logging
import re
import struct
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple

import librosa
import numpy as np
import pandas as pd
from scipy.io import wavfile
from tqdm import tqdm

from models.dataset import ESC_FOLDS, ClipRecord, MelSpec
from numerics.tensor_ops import DimensionError

logger = logging.getLogger(__name__)

META_COLUMNS = ('filename', 'fold', 'target')
PCM16_SCALE = 32768.0


class AudioDecodeError(ValueError):
    """Raised for malformed or unsupported WAV input."""


class DatasetError(ValueError):
    """Dataset layout problem; `line` is the 1-based metadata line when known."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        location = ''
        if path and line:
            location = f"{path}:{line}: "
        elif path:
            location = f"{path}: "
        super().__init__(f"{location}{message}")


def decode_wav(data: bytes) -> Tuple[np.ndarray, int]:
    """Decode PCM16 RIFF/WAVE bytes to mono float64 samples in [-1, 1]."""
    try:
        sample_rate, samples = wavfile.read(io.BytesIO(data))
    except (ValueError, EOFError, OSError, struct.error) as error:
        raise AudioDecodeError(f"malformed WAV data: {error}") from error
    if samples.dtype != np.int16:
        raise AudioDecodeError(f"unsupported encoding {samples.dtype}, expected PCM16")
    samples = samples.astype(np.float64) / PCM16_SCALE
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return samples, int(sample_rate)


@lru_cache(maxsize=8)
def _mel_basis(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax)


def stft_magnitude(samples: np.ndarray, spec: MelSpec) -> np.ndarray:
    """Hann-windowed magnitude STFT without centering: (1 + n_fft // 2, n_frames)."""
    if len(samples) < spec.n_fft:
        raise DimensionError('stft', f">= {spec.n_fft} samples", len(samples), 'signal too short')
    return np.abs(librosa.stft(np.asarray(samples, dtype=np.float64), n_fft=spec.n_fft,
                               hop_length=spec.hop, window='hann', center=False))


def log_mel(samples: np.ndarray, spec: MelSpec) -> np.ndarray:
    """Log-mel spectrogram shaped [1, n_mels, n_frames]."""
    magnitude = stft_magnitude(samples, spec)
    basis = _mel_basis(spec.sample_rate, spec.n_fft, spec.n_mels, float(spec.fmin), float(spec.fmax))
    mel = basis @ magnitude
    return np.log(mel + spec.log_floor)[np.newaxis]


def fit_length(samples: np.ndarray, num_samples: int) -> np.ndarray:
    """Zero-pad or truncate to exactly num_samples."""
    return librosa.util.fix_length(samples, size=num_samples)


def clip_features(data: bytes, spec: MelSpec, clip_seconds: float) -> np.ndarray:
    samples, sample_rate = decode_wav(data)
    if sample_rate != spec.sample_rate:
        raise AudioDecodeError(f"sample rate {sample_rate} differs from configured {spec.sample_rate}")
    return log_mel(fit_length(samples, int(round(clip_seconds * spec.sample_rate))), spec)


def _parse_line_number(error: Exception) -> Optional[int]:
    match = re.search(r'line (\d+)', str(error))
    return int(match.group(1)) if match else None


def read_metadata(meta_path: Path) -> pd.DataFrame:
    """Metadata table with validated filename, fold and target columns.

    A `line` column records each row's 1-based line in the CSV.
    """
    try:
        frame = pd.read_csv(meta_path, dtype=str, keep_default_na=False)
    except FileNotFoundError as error:
        raise DatasetError("metadata file not found", path=str(meta_path)) from error
    except pd.errors.ParserError as error:
        raise DatasetError(f"unparseable row: {error}", _parse_line_number(error), str(meta_path)) from error
    missing = [column for column in META_COLUMNS if column not in frame.columns]
    if missing:
        raise DatasetError(f"missing columns {missing}", 1, str(meta_path))

    frame['line'] = np.arange(len(frame)) + 2
    folds, targets = [], []
    for row in frame.itertuples(index=False):
        if not row.filename:
            raise DatasetError("empty filename", row.line, str(meta_path))
        try:
            fold, target = int(row.fold), int(row.target)
        except ValueError as error:
            raise DatasetError(f"fold and target must be integers ({error})", row.line, str(meta_path)) from error
        if fold not in ESC_FOLDS:
            raise DatasetError(f"fold {fold} outside 1-5", row.line, str(meta_path))
        if target < 0:
            raise DatasetError(f"negative target {target}", row.line, str(meta_path))
        folds.append(fold)
        targets.append(target)
    frame['fold'] = folds
    frame['target'] = targets

    duplicated = frame[frame['filename'].duplicated()]
    if len(duplicated):
        row = duplicated.iloc[0]
        raise DatasetError(f"duplicate clip id '{row['filename']}'", int(row['line']), str(meta_path))
    return frame


def load_esc_layout(root: str, meta_csv: str, spec: MelSpec, clip_seconds: float = 5.0,
                    audio_dir: str = 'audio', show_progress: bool = False) -> List[ClipRecord]:
    """Decode every clip listed in the metadata CSV; records ordered by clip id."""
    root_path = Path(root)
    meta_path = root_path / meta_csv
    frame = read_metadata(meta_path)
    for row in frame.itertuples(index=False):
        if not (root_path / audio_dir / row.filename).is_file():
            raise DatasetError(f"audio file missing: {row.filename}", row.line, str(meta_path))

    records = []
    rows = sorted(frame.itertuples(index=False), key=lambda row: row.filename)
    for row in tqdm(rows, desc='clips', disable=not show_progress):
        data = (root_path / audio_dir / row.filename).read_bytes()
        try:
            features = clip_features(data, spec, clip_seconds)
        except AudioDecodeError as error:
            raise DatasetError(f"{row.filename}: {error}", row.line, str(meta_path)) from error
        records.append(ClipRecord(row.filename, row.target, row.fold, features))
    logger.info("Loaded %d clips over %d classes from %s",
                len(records), len({record.target for record in records}), meta_path)
    return records
