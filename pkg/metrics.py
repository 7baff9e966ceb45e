"""
Full-reference image quality: PSNR and SSIM on [0, 1] images.

Colour images are scored per channel and averaged (RGB channel mean).
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from errors import DomainError, MissingFilesError, ShapeMismatchError, StorageError
from storage import PNG_SUFFIX, RAW_SUFFIX, read_image, read_raw
from tensor import Tensor
from utils import fmt, parallel_map

logger = logging.getLogger(__name__)

# Reported in place of +inf for identical images
PSNR_CAP_DB = 99.0
DATA_RANGE = 1.0

# 11 x 11 is the Gaussian support at sigma 1.5 truncated at 3.5 sigma
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

METRICS_CSV = 'metrics.csv'
METRICS_HEADER = 'id,psnr_db,ssim'


def _array(value):
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def _pair(op, x, y):
    a, b = _array(x), _array(y)
    if a.shape != b.shape:
        raise ShapeMismatchError(op, 'shape', a.shape, b.shape)
    return a, b


def psnr(x, y):
    """10 log10(1 / MSE) with peak value 1; identical images give PSNR_CAP_DB"""
    a, b = _pair('psnr', x, y)
    if np.array_equal(a, b):
        return PSNR_CAP_DB
    return min(float(peak_signal_noise_ratio(a, b, data_range=DATA_RANGE)), PSNR_CAP_DB)


def ssim(x, y, sigma=SSIM_SIGMA, k1=SSIM_K1, k2=SSIM_K2):
    """
    Gaussian-weighted SSIM averaged over window positions that fit inside
    the image.

    Accepts H x W or C x H x W inputs; colour is the mean of per-channel
    scores. Both image sides must be at least SSIM_WINDOW.
    """
    a, b = _pair('ssim', x, y)
    if a.ndim not in (2, 3):
        raise ShapeMismatchError('ssim', 'rank', '2 or 3', a.ndim)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DomainError(
            f"ssim: images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} (got {a.shape[-2]}x{a.shape[-1]})"
        )
    score = structural_similarity(
        a, b,
        win_size=SSIM_WINDOW,
        gaussian_weights=True,
        sigma=sigma,
        K1=k1,
        K2=k2,
        use_sample_covariance=False,
        data_range=DATA_RANGE,
        channel_axis=0 if a.ndim == 3 else None,
    )
    return float(np.clip(score, -1.0, 1.0))


@dataclass
class ImageMetrics:
    id: str
    psnr_db: float
    ssim: float

    def to_row(self):
        return f"{self.id},{fmt(self.psnr_db)},{fmt(self.ssim)}"


@dataclass
class MetricReport:
    per_image: List[ImageMetrics] = field(default_factory=list)

    def __len__(self):
        return len(self.per_image)

    @property
    def aggregates(self) -> Dict[str, Dict[str, float]]:
        if not self.per_image:
            return {}
        result = {}
        for metric in ('psnr_db', 'ssim'):
            values = [getattr(m, metric) for m in self.per_image]
            result[metric] = {
                'mean': sum(values) / len(values),
                'min': min(values),
                'max': max(values),
            }
        return result

    def mean(self, metric) -> Optional[float]:
        aggregates = self.aggregates
        return aggregates[metric]['mean'] if aggregates else None

    def to_csv(self):
        lines = [METRICS_HEADER] + [m.to_row() for m in self.per_image]
        aggregates = self.aggregates
        for name in ('mean', 'min', 'max') if aggregates else ():
            lines.append(f"{name},{fmt(aggregates['psnr_db'][name])},{fmt(aggregates['ssim'][name])}")
        return '\n'.join(lines) + '\n'

    def write(self, path):
        path = Path(path)
        try:
            path.write_text(self.to_csv(), encoding='utf-8')
        except OSError as e:
            raise StorageError(path, f"cannot write metrics ({e.strerror or e})")
        return path


def restored_path(restored_dir, scene_id) -> Optional[Path]:
    """``<id>.drf`` if present, else ``<id>.png``, else None"""
    restored_dir = Path(restored_dir)
    for suffix in (RAW_SUFFIX, PNG_SUFFIX):
        candidate = restored_dir / f"{scene_id}{suffix}"
        if candidate.is_file():
            return candidate
    return None


def evaluate_corpus(manifest, restored_dir, out_csv=None, threads=None) -> MetricReport:
    """
    Score every restored image against its clean background.

    All missing restorations are reported together before any scoring.
    """
    entries = list(manifest)
    paths = [restored_path(restored_dir, e.id) for e in entries]
    missing = [Path(restored_dir) / f"{e.id}{RAW_SUFFIX}" for e, p in zip(entries, paths) if p is None]
    if missing:
        raise MissingFilesError(missing)

    def _score(job):
        entry, path = job
        truth = read_raw(manifest.path(entry.background))
        restored = read_image(path)
        return ImageMetrics(entry.id, psnr(restored, truth), ssim(restored, truth))

    report = MetricReport(parallel_map(_score, list(zip(entries, paths)), threads=threads))
    if out_csv is not None:
        report.write(out_csv)
    if report.per_image:
        logger.info("scored %d images: mean PSNR %.3f dB, mean SSIM %.4f",
                    len(report), report.mean('psnr_db'), report.mean('ssim'))
    return report
