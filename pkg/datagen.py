"""
Deterministic synthesis of rainy-scene corpora.

A master seed fixes the whole corpus: each scene gets a 64-bit seed derived
from (master seed, scene index), and each scene spawns independent random
streams for its background, depth, orientation, photometry and every streak
bin. Turning the veil on or changing beta never alters the background or
the streaks of a scene.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from errors import BinAreaError, ManifestError, StorageError
from procedural import BACKGROUND_KINDS, DEPTH_KINDS, make_background, make_depth
from rain_model import (
    BINS_BY_LABEL,
    EPS_RECIP,
    STREAK_BINS,
    RainScene,
    StreakBin,
    StreakRecord,
    compose_linear,
    compose_veiled,
    transmittance_from_depth,
)
from storage import read_raw, write_png, write_raw
from tensor import Tensor
from utils import ensure_dir, parallel_map

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = 'manifest.txt'
MANIFEST_FIELDS = (
    'id', 'seed', 'observed', 'background', 'transmittance',
    'atmospheric_light', 'depth', 'streaks', 'meta',
)

DEFAULT_ORIENTATIONS = tuple(float(a) for a in np.linspace(-55.0, 55.0, 11))
DEFAULT_COVERAGE = 0.12
MAX_STREAK_ATTEMPTS = 200
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

# thickness ranges (pixels) per bin; lengths follow from the sampled area
DEFAULT_THICKNESS = {'small': (1.2, 2.5), 'middle': (2.5, 5.0), 'large': (5.0, 9.0)}
DEFAULT_INTENSITY = {'small': (0.25, 0.5), 'middle': (0.3, 0.6), 'large': (0.35, 0.7)}

Range = Tuple[float, float]


@dataclass(frozen=True)
class BinSettings:
    """Per-bin streak statistics: how many streaks, how bright, how thick"""

    bin: StreakBin
    count_range: Tuple[int, int]
    intensity_range: Range
    thickness_range: Range

    def to_dict(self):
        return {
            'label': self.bin.label,
            'count_range': list(self.count_range),
            'intensity_range': list(self.intensity_range),
            'thickness_range': list(self.thickness_range),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            bin=BINS_BY_LABEL[data['label']],
            count_range=tuple(int(v) for v in data['count_range']),
            intensity_range=tuple(float(v) for v in data['intensity_range']),
            thickness_range=tuple(float(v) for v in data['thickness_range']),
        )


def default_bin_settings(image_size, coverage=DEFAULT_COVERAGE):
    """
    Streak counts proportional to 1 / mean bin area, so the small bin is the
    densest and the large bin the sparsest.
    """
    height, width = image_size
    settings = []
    for streak_bin in STREAK_BINS:
        upper = max(1, int(round(coverage * height * width / streak_bin.mean_area)))
        thin, thick = DEFAULT_THICKNESS[streak_bin.label]
        # on small images the longest streak is short, so large areas need wider streaks
        thick = max(thick, streak_bin.area_range[1] / _max_streak_length(image_size))
        settings.append(BinSettings(
            bin=streak_bin,
            count_range=(upper // 2, upper),
            intensity_range=DEFAULT_INTENSITY[streak_bin.label],
            thickness_range=(thin, thick),
        ))
    return tuple(settings)


@dataclass(frozen=True)
class RainSceneSpec:
    """Declarative description of a synthetic rainy scene"""

    seed: int = 0
    image_size: Tuple[int, int] = (64, 64)
    bins: Tuple[BinSettings, ...] = ()
    orientations: Tuple[float, ...] = DEFAULT_ORIENTATIONS
    beta: Union[float, Range] = (0.3, 1.0)
    atmospheric_light: Union[float, Range] = (0.7, 1.0)
    veil_enabled: bool = False
    background_kind: str = 'mixed'
    depth_kind: str = 'ramp_blobs'

    def __post_init__(self):
        if not self.bins:
            object.__setattr__(self, 'bins', default_bin_settings(self.image_size))
        if self.background_kind not in BACKGROUND_KINDS:
            raise ValueError(f"unknown background kind: {self.background_kind}")
        if self.depth_kind not in DEPTH_KINDS:
            raise ValueError(f"unknown depth kind: {self.depth_kind}")
        if not self.orientations:
            raise ValueError("at least one streak orientation is required")
        height, width = self.image_size
        if height < 1 or width < 1:
            raise ValueError(f"image size must be positive: {self.image_size}")

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def bin_settings(self, streak_bin):
        for settings in self.bins:
            if settings.bin == streak_bin:
                return settings
        raise ValueError(f"bin '{streak_bin.label}' is not part of this scene spec")

    def to_dict(self):
        return {
            'seed': int(self.seed),
            'image_size': list(self.image_size),
            'bins': [b.to_dict() for b in self.bins],
            'orientations': list(self.orientations),
            'beta': list(self.beta) if isinstance(self.beta, tuple) else self.beta,
            'atmospheric_light': list(self.atmospheric_light)
            if isinstance(self.atmospheric_light, tuple) else self.atmospheric_light,
            'veil_enabled': self.veil_enabled,
            'background_kind': self.background_kind,
            'depth_kind': self.depth_kind,
        }

    @classmethod
    def from_dict(cls, data):
        def _range_or_value(value):
            return tuple(float(v) for v in value) if isinstance(value, (list, tuple)) else float(value)

        return cls(
            seed=int(data['seed']),
            image_size=tuple(int(v) for v in data['image_size']),
            bins=tuple(BinSettings.from_dict(b) for b in data['bins']),
            orientations=tuple(float(v) for v in data['orientations']),
            beta=_range_or_value(data['beta']),
            atmospheric_light=_range_or_value(data['atmospheric_light']),
            veil_enabled=bool(data['veil_enabled']),
            background_kind=data['background_kind'],
            depth_kind=data['depth_kind'],
        )


def _sample(value, rng):
    """Draw from a (lo, hi) range; a fixed value still consumes one draw."""
    draw = rng.random()
    if isinstance(value, tuple):
        lo, hi = value
        return float(lo + (hi - lo) * draw)
    return float(value)


def derive_scene_seed(master_seed, index):
    state = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def draw_streak(image_size, center, angle, length, thickness, intensity):
    """
    Rasterise one motion-blurred streak.

    The streak is a segment of ``length`` along ``angle`` (degrees from
    vertical) with a Gaussian cross-section truncated at ``thickness``; the
    support is exactly the set of pixels it occupies.
    """
    height, width = image_size
    theta = np.deg2rad(angle)
    ux, uy = np.sin(theta), np.cos(theta)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = xx - center[0]
    dy = yy - center[1]
    along = dx * ux + dy * uy
    across = dy * ux - dx * uy
    half_length = length / 2.0
    half_thickness = thickness / 2.0
    sigma = max(thickness / 4.0, 0.3)
    inside = (np.abs(along) <= half_length) & (np.abs(across) <= half_thickness)
    # Soft ends keep the segment anti-aliased along its axis
    ends = np.clip(half_length + 0.5 - np.abs(along), 0.5, 1.0)
    profile = np.exp(-(across ** 2) / (2.0 * sigma ** 2))
    return np.where(inside, intensity * profile * ends, 0.0)


def occupied_area(canvas):
    """Pixel count and component count of a streak's nonzero support"""
    mask = canvas > 0
    _, components = ndimage.label(mask, structure=EIGHT_CONNECTED)
    return int(mask.sum()), int(components)


def _max_streak_length(image_size):
    return max(min(image_size) - 2.0, 1.0)


def _sample_streak(settings, image_size, angle, rng):
    height, width = image_size
    lo, hi = settings.bin.area_range
    target_area = rng.uniform(lo + 1, hi)
    thin, thick = settings.thickness_range
    thickness = rng.uniform(thin, thick)
    max_length = _max_streak_length(image_size)
    length = target_area / thickness
    if length > max_length:
        # widen to keep the area, never past the bin's thickness range
        length = max_length
        thickness = min(target_area / length, thick)
    theta = np.deg2rad(angle)
    extent_x = abs(np.sin(theta)) * length / 2.0 + thickness / 2.0
    extent_y = abs(np.cos(theta)) * length / 2.0 + thickness / 2.0
    cx = rng.uniform(min(extent_x, width / 2.0), max(width - extent_x, width / 2.0))
    cy = rng.uniform(min(extent_y, height / 2.0), max(height - extent_y, height / 2.0))
    intensity = rng.uniform(*settings.intensity_range)
    return (float(cx), float(cy)), float(length), float(thickness), float(intensity)


def render_streak_layer(spec, streak_bin, rng, angle=None, records=None):
    """
    Render one streak layer (3 x H x W, achromatic, nonnegative).

    Every streak is drawn on its own canvas first; samples whose occupied
    area falls outside the bin, or whose support is not one connected
    region, are redrawn.
    """
    settings = spec.bin_settings(streak_bin)
    height, width = spec.image_size
    lo, _ = streak_bin.area_range
    if lo + 1 > height * width // 2:
        raise BinAreaError(
            f"bin '{streak_bin.label}' needs more than {lo} pixels per streak; "
            f"image is only {height}x{width}"
        )
    if angle is None:
        angle = spec.orientations[int(rng.integers(len(spec.orientations)))]

    layer = np.zeros((height, width), dtype=np.float64)
    count = int(rng.integers(settings.count_range[0], settings.count_range[1] + 1))
    for _ in range(count):
        for _attempt in range(MAX_STREAK_ATTEMPTS):
            center, length, thickness, intensity = _sample_streak(settings, spec.image_size, angle, rng)
            canvas = draw_streak(spec.image_size, center, angle, length, thickness, intensity)
            area, components = occupied_area(canvas)
            if components == 1 and streak_bin.contains(area):
                break
        else:
            raise BinAreaError(
                f"could not place a '{streak_bin.label}' streak with area in "
                f"{streak_bin.area_range} on a {height}x{width} image"
            )
        layer += canvas
        if records is not None:
            records.append(StreakRecord(streak_bin.label, area, float(angle), length,
                                        thickness, intensity, center))
    return Tensor(np.repeat(layer[None], 3, axis=0))


def render_scene(spec):
    """Realise a spec into a fully populated RainScene"""
    height, width = spec.image_size
    streams = np.random.SeedSequence(int(spec.seed)).spawn(4 + len(spec.bins))
    bg_rng, depth_rng, orient_rng, photo_rng = (np.random.default_rng(s) for s in streams[:4])

    background = Tensor(make_background(spec.background_kind, height, width, bg_rng))
    angle = spec.orientations[int(orient_rng.integers(len(spec.orientations)))]
    records = []
    layers = [
        render_streak_layer(spec, settings.bin, np.random.default_rng(stream), angle=angle, records=records)
        for settings, stream in zip(spec.bins, streams[4:])
    ]
    beta = _sample(spec.beta, photo_rng)
    light = _sample(spec.atmospheric_light, photo_rng)

    if spec.veil_enabled:
        depth = Tensor(make_depth(spec.depth_kind, height, width, depth_rng))
        alpha = transmittance_from_depth(depth, beta)
        observed = compose_veiled(background, layers, alpha, light)
    else:
        depth = None
        beta = 0.0
        alpha = Tensor.ones((1, height, width))
        observed = compose_linear(background, layers)

    return RainScene(
        background=background,
        streak_layers=layers,
        transmittance=alpha,
        atmospheric_light=light,
        observed=observed,
        depth=depth,
        beta=beta,
        streak_records=records,
        bin_labels=[settings.bin.label for settings in spec.bins],
    )


@dataclass
class ManifestEntry:
    id: str
    seed: int
    observed: str
    background: str
    transmittance: str
    atmospheric_light: str
    depth: Optional[str]
    streaks: List[str]
    meta: Dict = field(default_factory=dict)

    def to_line(self):
        values = [
            self.id, str(self.seed), self.observed, self.background, self.transmittance,
            self.atmospheric_light, self.depth or '-', ','.join(self.streaks),
            json.dumps(self.meta, sort_keys=True, separators=(',', ':')),
        ]
        return '\t'.join(values)

    @classmethod
    def from_line(cls, line, line_number):
        values = line.rstrip('\n').split('\t')
        if len(values) != len(MANIFEST_FIELDS):
            raise ManifestError(
                f"line {line_number}: expected {len(MANIFEST_FIELDS)} fields, got {len(values)}"
            )
        try:
            meta = json.loads(values[8])
        except json.JSONDecodeError as e:
            raise ManifestError(f"line {line_number}: bad meta field ({e})")
        return cls(
            id=values[0], seed=int(values[1]), observed=values[2], background=values[3],
            transmittance=values[4], atmospheric_light=values[5],
            depth=None if values[6] == '-' else values[6],
            streaks=[s for s in values[7].split(',') if s], meta=meta,
        )

    @property
    def bin_labels(self):
        return [b['label'] for b in self.meta.get('spec', {}).get('bins', [])]


@dataclass
class DatasetManifest:
    """Index of a generated corpus; paths are relative to ``root``"""

    version: int = MANIFEST_VERSION
    entries: List[ManifestEntry] = field(default_factory=list)
    root: Path = Path('.')

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def bin_count(self):
        counts = {len(e.streaks) for e in self.entries}
        if len(counts) > 1:
            raise ManifestError(f"entries disagree on streak layer count: {sorted(counts)}")
        return counts.pop() if counts else None

    def path(self, relative):
        return self.root / relative

    def subset(self, entries):
        return DatasetManifest(self.version, list(entries), self.root)

    def split(self, holdout_fraction):
        """Deterministic split: the last ``holdout_fraction`` of entries are held out"""
        if not 0.0 <= holdout_fraction < 1.0:
            raise ValueError(f"holdout fraction must lie in [0, 1): {holdout_fraction}")
        held = int(round(len(self.entries) * holdout_fraction))
        cut = len(self.entries) - held
        return self.subset(self.entries[:cut]), self.subset(self.entries[cut:])

    def write(self, path=None):
        path = Path(path) if path else self.root / MANIFEST_NAME
        lines = [f"version={self.version}"] + [e.to_line() for e in self.entries]
        try:
            path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        except OSError as e:
            raise StorageError(path, f"cannot write manifest ({e.strerror or e})")
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            lines = path.read_text(encoding='utf-8').splitlines()
        except OSError as e:
            raise StorageError(path, f"cannot read manifest ({e.strerror or e})")
        if not lines or not lines[0].startswith('version='):
            raise ManifestError(f"{path}: first line must be 'version=<n>'")
        version = int(lines[0].split('=', 1)[1])
        if version != MANIFEST_VERSION:
            raise ManifestError(f"{path}: unsupported manifest version {version}")
        entries = [ManifestEntry.from_line(line, n) for n, line in enumerate(lines[1:], start=2) if line]
        return cls(version, entries, path.parent)

    def load_scene(self, entry):
        def _load(relative):
            return Tensor(read_raw(self.path(relative)))

        meta_records = entry.meta.get('streak_records', [])
        return RainScene(
            background=_load(entry.background),
            streak_layers=[_load(s) for s in entry.streaks],
            transmittance=_load(entry.transmittance),
            atmospheric_light=float(read_raw(self.path(entry.atmospheric_light)).reshape(-1)[0]),
            observed=_load(entry.observed),
            depth=_load(entry.depth) if entry.depth else None,
            beta=float(entry.meta.get('beta', 0.0)),
            streak_records=[StreakRecord(**{**r, 'center': tuple(r['center'])}) for r in meta_records],
            bin_labels=entry.bin_labels,
        )


def _write_scene(out_dir, scene_id, seed, spec, scene):
    def _raw(name, array):
        relative = f"{scene_id}_{name}.drf"
        write_raw(out_dir / relative, array)
        return relative

    write_png(out_dir / f"{scene_id}_O.png", scene.observed.data)
    write_png(out_dir / f"{scene_id}_B.png", scene.background.data)
    streaks = [
        _raw(f"R{i + 1}_{settings.bin.label}", layer.data)
        for i, (settings, layer) in enumerate(zip(spec.bins, scene.streak_layers))
    ]
    return ManifestEntry(
        id=scene_id,
        seed=seed,
        observed=_raw('O', scene.observed.data),
        background=_raw('B', scene.background.data),
        transmittance=_raw('alpha', scene.transmittance.data),
        atmospheric_light=_raw('A', np.array(scene.atmospheric_light)),
        depth=_raw('depth', scene.depth.data) if scene.depth is not None else None,
        streaks=streaks,
        meta={
            'spec': spec.to_dict(),
            'beta': scene.beta,
            'streak_records': [asdict(r) for r in scene.streak_records],
        },
    )


def generate_dataset(spec_template, count, out_dir, threads=None):
    """
    Render ``count`` scenes into ``out_dir`` and write the manifest.

    The template's seed is the master seed; scene i is rendered from
    derive_scene_seed(master, i).
    """
    out_dir = ensure_dir(out_dir)
    if count < 0:
        raise ValueError(f"count must be nonnegative: {count}")

    def _job(index):
        seed = derive_scene_seed(spec_template.seed, index)
        spec = spec_template.with_seed(seed)
        scene = render_scene(spec)
        return _write_scene(out_dir, f"scene_{index:05d}", seed, spec, scene)

    entries = parallel_map(_job, range(count), threads=threads)
    manifest = DatasetManifest(MANIFEST_VERSION, entries, out_dir)
    path = manifest.write()
    logger.info("wrote %d scenes to %s", count, path)
    return manifest


def _layer_streak_errors(index, label, layer, records):
    """Re-measure a streak layer's 8-connected regions against its bin and its records"""
    streak_bin = BINS_BY_LABEL[label]
    name = f"streak layer {index + 1} ({label})"
    regions, count = ndimage.label(np.any(layer > 0, axis=0), structure=EIGHT_CONNECTED)
    areas = sorted(int(a) for a in np.bincount(regions.ravel())[1:])
    recorded = sorted(r.area for r in records)
    if count > len(recorded):
        return [f"{name} has {count} streak regions but {len(recorded)} recorded streaks"]
    if count == len(recorded):
        # one region per streak, so every region is a whole streak
        errors = []
        outside = [a for a in areas if not streak_bin.contains(a)]
        if outside:
            errors.append(f"{name} has streaks with areas {outside} outside {streak_bin.area_range}")
        if areas != recorded:
            errors.append(f"{name} region areas {areas} differ from the recorded {recorded}")
        return errors
    # overlapping streaks merge; a merged region still holds at least one whole streak
    lo, _ = streak_bin.area_range
    if any(a <= lo for a in areas) or sum(areas) < recorded[-1] or sum(areas) > sum(recorded):
        return [f"{name} region areas {areas} cannot come from streaks of areas {recorded}"]
    return []


def check_scene(scene, tolerance=1e-9):
    """Return the list of RainScene invariant violations (empty when clean)"""
    errors = []
    b = scene.background.data
    o = scene.observed.data
    alpha = scene.transmittance.data
    if b.min() < 0 or b.max() > 1:
        errors.append("background outside [0, 1]")
    if o.min() < 0 or o.max() > 1:
        errors.append("observed outside [0, 1]")
    if not 0.0 <= scene.atmospheric_light <= 1.0:
        errors.append(f"atmospheric light {scene.atmospheric_light} outside [0, 1]")
    for i, layer in enumerate(scene.streak_layers):
        if layer.data.min() < 0:
            errors.append(f"streak layer {i + 1} has negative values")
    if alpha.min() < EPS_RECIP - 1e-15 or alpha.max() > 1.0:
        errors.append("transmittance outside [eps, 1]")
    else:
        expected = compose_veiled(scene.background, scene.streak_layers, scene.transmittance,
                                  scene.atmospheric_light).data
        worst = float(np.max(np.abs(expected - o)))
        if worst > tolerance:
            errors.append(f"observed differs from the veiled composite by {worst:.3e}")
    if scene.depth is not None:
        expected_alpha = np.maximum(np.exp(-scene.beta * scene.depth.data), EPS_RECIP)
        if np.max(np.abs(expected_alpha - alpha)) > tolerance:
            errors.append("transmittance does not follow exp(-beta * depth)")
    for record in scene.streak_records:
        if not BINS_BY_LABEL[record.bin].contains(record.area):
            errors.append(f"{record.bin} streak with area {record.area} is outside its bin")
    if len(scene.bin_labels) == len(scene.streak_layers):
        for i, (label, layer) in enumerate(zip(scene.bin_labels, scene.streak_layers)):
            records = [r for r in scene.streak_records if r.bin == label]
            errors.extend(_layer_streak_errors(i, label, layer.data, records))
    return errors


def check_corpus(manifest, threads=None):
    """Map scene id -> invariant violations, for every scene with at least one"""
    def _job(entry):
        return entry.id, check_scene(manifest.load_scene(entry))

    results = parallel_map(_job, manifest.entries, threads=threads)
    return {scene_id: errors for scene_id, errors in results if errors}
