"""
Physical rain model: additive streak layers, depth-driven transmittance,
veiled composition and exact background inversion.

Veiled composite of a background B with streak layers R_i:

    O = alpha * (B + sum_i R_i) + (1 - alpha) * A

alpha and A are achromatic: a single-channel map (or a scalar for A) applied
to every colour channel. With alpha == 1 the veiled composite equals the
purely additive one exactly. Composites are clamped to [0, 1]; pass
``clamp=False`` to get the raw value.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config import Config
from errors import DomainError, ShapeMismatchError
from tensor import Tensor

logger = logging.getLogger(__name__)

EPS_RECIP = Config.EPS_RECIP

ArrayLike = Union[Tensor, np.ndarray]
LightLike = Union[Tensor, np.ndarray, float]


@dataclass(frozen=True)
class StreakBin:
    """A streak size class; ``area_range`` is the half-open pixel interval (lo, hi]."""

    label: str
    area_range: Tuple[int, int]

    def contains(self, area: float) -> bool:
        lo, hi = self.area_range
        return lo < area <= hi

    @property
    def mean_area(self) -> float:
        lo, hi = self.area_range
        return (lo + hi) / 2.0


SMALL = StreakBin('small', (0, 60))
MIDDLE = StreakBin('middle', (60, 300))
LARGE = StreakBin('large', (300, 600))
STREAK_BINS = (SMALL, MIDDLE, LARGE)
BINS_BY_LABEL = {b.label: b for b in STREAK_BINS}


def bin_for_area(area: float) -> Optional[StreakBin]:
    for streak_bin in STREAK_BINS:
        if streak_bin.contains(area):
            return streak_bin
    return None


@dataclass
class StreakRecord:
    """Geometry and photometry of one rendered streak"""

    bin: str
    area: int
    angle: float
    length: float
    thickness: float
    intensity: float
    center: Tuple[float, float]


@dataclass
class RainScene:
    """Ground-truth bundle of one synthetic rainy image"""

    background: Tensor
    streak_layers: List[Tensor]
    transmittance: Tensor
    atmospheric_light: float
    observed: Tensor
    depth: Optional[Tensor] = None
    beta: float = 0.0
    streak_records: List[StreakRecord] = field(default_factory=list)
    # bin label of each streak layer, in layer order
    bin_labels: List[str] = field(default_factory=list)

    @property
    def layer_count(self) -> int:
        return len(self.streak_layers)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.background.shape[-2], self.background.shape[-1]

    def inverse_transmittance(self) -> np.ndarray:
        return 1.0 / self.transmittance.data


def _array(value: ArrayLike) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def _light(value: LightLike) -> Union[np.ndarray, float]:
    if isinstance(value, (int, float)):
        return float(value)
    return _array(value)


def _check_same_shape(op: str, reference: np.ndarray, others: Sequence[np.ndarray], what: str) -> None:
    for index, other in enumerate(others):
        if other.shape != reference.shape:
            raise ShapeMismatchError(op, f"{what} {index}", reference.shape, other.shape)


def _check_achromatic(op: str, reference: np.ndarray, value: np.ndarray, what: str) -> None:
    if value.ndim == 0 or value.shape == reference.shape:
        return
    expected = reference.shape[:-3] + (1,) + reference.shape[-2:]
    if value.shape != expected:
        raise ShapeMismatchError(op, what, expected, value.shape)


def _finish(value: np.ndarray, clamp: bool) -> Tensor:
    return Tensor(np.clip(value, 0.0, 1.0) if clamp else value)


def compose_linear(background: ArrayLike, streaks: Sequence[ArrayLike], clamp: bool = True) -> Tensor:
    """O = B + sum_i R_i; a single layer is the one-layer additive model."""
    b = _array(background)
    layers = [_array(r) for r in streaks]
    _check_same_shape('compose_linear', b, layers, 'streak layer')
    total = b.copy()
    for layer in layers:
        total += layer
    return _finish(total, clamp)


def compose_veiled(background: ArrayLike, streaks: Sequence[ArrayLike], alpha: ArrayLike,
                   light: LightLike, clamp: bool = True) -> Tensor:
    """O = alpha * (B + sum_i R_i) + (1 - alpha) * A"""
    b = _array(background)
    layers = [_array(r) for r in streaks]
    a = _array(alpha)
    atmos = _light(light)
    _check_same_shape('compose_veiled', b, layers, 'streak layer')
    _check_achromatic('compose_veiled', b, a, 'transmittance')
    if isinstance(atmos, np.ndarray):
        _check_achromatic('compose_veiled', b, atmos, 'atmospheric light')
    if np.any(a < EPS_RECIP) or np.any(a > 1.0):
        raise DomainError(
            f"compose_veiled: transmittance must lie in [{EPS_RECIP}, 1] "
            f"(got [{float(a.min()):g}, {float(a.max()):g}])"
        )
    rainy = b.copy()
    for layer in layers:
        rainy += layer
    return _finish(a * rainy + (1.0 - a) * atmos, clamp)


def transmittance_from_depth(depth: ArrayLike, beta: float) -> Tensor:
    """alpha = exp(-beta * d), floored at EPS_RECIP so 1/alpha stays finite."""
    d = _array(depth)
    if beta < 0:
        raise DomainError(f"transmittance_from_depth: beta must be >= 0 (got {beta})")
    if np.any(d < 0):
        raise DomainError(f"transmittance_from_depth: depth must be >= 0 (min {float(d.min()):g})")
    return Tensor(np.maximum(np.exp(-beta * d), EPS_RECIP))


def invert_background(observed: ArrayLike, inv_alpha: ArrayLike, streaks: Sequence[ArrayLike],
                      light: LightLike, clamp: bool = True) -> Tensor:
    """
    Recover B from a veiled composite given 1/alpha, the streaks and A.

    Evaluated as O + (1/alpha - 1)(O - A) - sum_i R_i, which is the same
    algebra as (1/alpha)(O - A) - sum_i R_i + A but returns O exactly when
    1/alpha == 1 and there is no rain.
    """
    o = _array(observed)
    inv = _array(inv_alpha)
    layers = [_array(r) for r in streaks]
    atmos = _light(light)
    _check_same_shape('invert_background', o, layers, 'streak layer')
    _check_achromatic('invert_background', o, inv, 'inverse transmittance')
    if np.any(inv < 1.0):
        raise DomainError(
            f"invert_background: inverse transmittance must be >= 1 (min {float(inv.min()):g})"
        )
    result = o + (inv - 1.0) * (o - atmos)
    for layer in layers:
        result = result - layer
    return _finish(result, clamp)


def estimate_atmospheric_light(observed: ArrayLike) -> Union[float, np.ndarray]:
    """
    Brightest-pixel rule: the maximum over pixels of the colour-channel mean.

    Returns a float for a single image and one value per image for a batch.
    """
    o = _array(observed)
    brightness = o.mean(axis=-3)
    if o.ndim == 3:
        return float(brightness.max())
    return brightness.reshape(brightness.shape[0], -1).max(axis=1)
