"""
Scale-aware multi-stage recurrent deraining network.

Pipeline for an input O (3 x H x W, optionally batched):

  1. Feature extractor: a stem convolution followed by a dense block whose
     layers each see the concatenation of all earlier outputs. There are no
     transition layers, so F keeps the input resolution.
  2. Stages j = 1..S. Each stage runs K parallel recurrent sub-networks,
     one per streak scale. Sub-network i iterates T times on
         [F, T_{j-1}, C_1^{j-1}, ..., C_K^{j-1}, own previous prediction]
     where T_0 = O, C_i^j is the cumulative rain estimate of scale i after
     stage j (C^0 = 0) and the first iteration starts from a zero
     prediction. The stage output is T_j = T_{j-1} - sum_i R_i^j.
  3. Optional veil head, parallel to stage 1, predicting inv_alpha =
     1 + relu(raw) >= 1. The background is recovered as
         B = O + (inv_alpha - 1) * (O - A) - sum_i C_i^S
     which is the 1/alpha inversion of the veiled rain model. Without the
     veil head, B = T_S.

``scale_bins = 0`` builds the baseline with no recurrent module: a direct
head predicts O - B.

Parameter keys (G = 1 with shared stage weights, else S; L dense layers):
    2 * (1 + L) + 6 * K * G + 4 * [veil] + 4 * [K == 0]
"""
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import CheckpointError, ConfigError, DomainError, ShapeMismatchError, StorageError
from rain_model import RainScene, estimate_atmospheric_light
from tensor import (
    Tensor,
    concat_channels,
    conv2d,
    reduce_mse,
    relu,
    repeat_channels,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'SMRC'
CHECKPOINT_VERSION = 1

# Output convolutions start small so an untrained network is near the identity restorer
OUTPUT_INIT_GAIN = 0.1
VEIL_INIT_BIAS = 0.5


@dataclass(frozen=True)
class NetworkConfig:
    scale_bins: int = 3
    recurrent_iters: int = 4
    stages: int = 2
    feature_channels: int = 16
    dense_layers: int = 4
    growth_rate: int = 8
    hidden_channels: int = 16
    kernel_size: int = 3
    veil_enabled: bool = False
    share_stage_weights: bool = False
    stage_loss_weights: Optional[Tuple[float, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.scale_bins < 0:
            raise ConfigError(f"scale_bins must be >= 0 (0 selects the direct baseline): {self.scale_bins}")
        for name in ('recurrent_iters', 'stages', 'feature_channels', 'growth_rate', 'hidden_channels'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1: {getattr(self, name)}")
        if self.dense_layers < 0:
            raise ConfigError(f"dense_layers must be >= 0: {self.dense_layers}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd number: {self.kernel_size}")
        if self.stage_loss_weights is not None:
            if len(self.stage_loss_weights) != self.stages:
                raise ConfigError(
                    f"stage_loss_weights has {len(self.stage_loss_weights)} entries for {self.stages} stages"
                )
            object.__setattr__(self, 'stage_loss_weights', tuple(float(w) for w in self.stage_loss_weights))

    @property
    def feature_out_channels(self) -> int:
        return self.feature_channels + self.dense_layers * self.growth_rate

    @property
    def recurrent_in_channels(self) -> int:
        return self.feature_out_channels + 3 + 3 * self.scale_bins + 3

    @property
    def stage_groups(self) -> int:
        return 1 if self.share_stage_weights else self.stages

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    def stage_weight(self, stage: int) -> float:
        return 1.0 if self.stage_loss_weights is None else self.stage_loss_weights[stage]

    def expected_key_count(self) -> int:
        return (2 * (1 + self.dense_layers)
                + 6 * self.scale_bins * self.stage_groups
                + (4 if self.veil_enabled else 0)
                + (4 if self.scale_bins == 0 else 0))

    def to_dict(self) -> Dict:
        data = asdict(self)
        if self.stage_loss_weights is not None:
            data['stage_loss_weights'] = list(self.stage_loss_weights)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        values = dict(data)
        if values.get('stage_loss_weights') is not None:
            values['stage_loss_weights'] = tuple(values['stage_loss_weights'])
        return cls(**values)


def layer_shapes(config: NetworkConfig) -> List[Tuple[str, int, int]]:
    """(layer path, input channels, output channels) in parameter order"""
    fc = config.feature_channels
    hidden = config.hidden_channels
    layers = [('features.stem', 3, fc)]
    for layer in range(config.dense_layers):
        layers.append((f'features.dense{layer + 1}', fc + layer * config.growth_rate, config.growth_rate))
    for group in range(config.stage_groups if config.scale_bins else 0):
        for scale in range(config.scale_bins):
            prefix = f'stage{group + 1}.scale{scale + 1}'
            layers.append((f'{prefix}.conv_in', config.recurrent_in_channels, hidden))
            layers.append((f'{prefix}.conv_mid', hidden, hidden))
            layers.append((f'{prefix}.conv_out', hidden, 3))
    if config.scale_bins == 0:
        layers.append(('direct.conv_in', config.feature_out_channels + 3, hidden))
        layers.append(('direct.conv_out', hidden, 3))
    if config.veil_enabled:
        layers.append(('veil.conv_in', config.feature_out_channels + 3, hidden))
        layers.append(('veil.conv_out', hidden, 1))
    return layers


class NetworkParams:
    """Named learnable tensors, ordered by layer path"""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self._tensors = OrderedDict(tensors)

    def __getitem__(self, key: str) -> Tensor:
        return self._tensors[key]

    def __contains__(self, key: str) -> bool:
        return key in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def keys(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> List[Tensor]:
        return list(self._tensors.values())

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def copy(self) -> "NetworkParams":
        return NetworkParams(OrderedDict(
            (k, Tensor(t.data, requires_grad=True)) for k, t in self._tensors.items()
        ))

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams(OrderedDict(
            (k, Tensor.zeros(t.shape, requires_grad=True)) for k, t in self._tensors.items()
        ))

    def to_bytes(self) -> bytes:
        return b''.join(t.data.astype('<f8').tobytes() for t in self._tensors.values())

    def equals(self, other: "NetworkParams") -> bool:
        return self.keys() == other.keys() and self.to_bytes() == other.to_bytes()


def build_network(config: NetworkConfig) -> NetworkParams:
    """Fan-in scaled uniform init (He bound sqrt(6 / fan_in)), zero biases; deterministic in seed"""
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    tensors = OrderedDict()
    for name, c_in, c_out in layer_shapes(config):
        fan_in = c_in * k * k
        bound = np.sqrt(6.0 / fan_in)
        if name.endswith('conv_out'):
            bound *= OUTPUT_INIT_GAIN
        weight = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        bias = np.full(c_out, VEIL_INIT_BIAS if name == 'veil.conv_out' else 0.0)
        tensors[f'{name}.weight'] = Tensor(weight, requires_grad=True)
        tensors[f'{name}.bias'] = Tensor(bias, requires_grad=True)
    params = NetworkParams(tensors)
    if len(params) != config.expected_key_count():
        raise ConfigError(
            f"network has {len(params)} parameter tensors, config expects {config.expected_key_count()}"
        )
    return params


@dataclass
class ForwardTrace:
    """Every intermediate prediction of one forward pass"""

    features: Tensor
    rain_maps: List[List[Tensor]]
    cumulative_rain: List[List[Tensor]]
    stage_outputs: List[Tensor]
    background: Tensor
    inv_transmittance: Optional[Tensor] = None
    direct_residual: Optional[Tensor] = None
    atmospheric_light: Union[float, np.ndarray, None] = None
    stage_weights: Tuple[float, ...] = ()

    def rain_map(self, scale: int, stage: int) -> Tensor:
        return self.rain_maps[stage][scale]

    def all_rain_maps(self) -> List[Tensor]:
        return [m for stage in self.rain_maps for m in stage]

    def final_rain(self) -> List[Tensor]:
        return self.cumulative_rain[-1] if self.cumulative_rain else []

    def restored(self) -> np.ndarray:
        return np.clip(self.background.data, 0.0, 1.0)


def _conv(params: NetworkParams, name: str, x: Tensor, padding: int) -> Tensor:
    return conv2d(x, params[f'{name}.weight'], params[f'{name}.bias'], stride=1, padding=padding)


def _as_input(observed) -> Tensor:
    tensor = observed if isinstance(observed, Tensor) else Tensor(observed)
    if tensor.ndim not in (3, 4):
        raise ShapeMismatchError('forward', 'input rank', '3 or 4', tensor.ndim)
    if tensor.shape[-3] != 3:
        raise ShapeMismatchError('forward', 'channels', 3, tensor.shape[-3])
    return tensor


def _light_map(observed: Tensor, light) -> Tensor:
    """A constant colour map holding A for each image of the (possibly batched) input"""
    values = np.asarray(light, dtype=np.float64)
    if observed.ndim == 3:
        return Tensor(np.full(observed.shape, float(values.reshape(-1)[0])))
    per_image = np.broadcast_to(values.reshape(-1), (observed.shape[0],))
    return Tensor(np.ones(observed.shape) * per_image[:, None, None, None])


def _sum(tensors: Sequence[Tensor]) -> Tensor:
    total = tensors[0]
    for tensor in tensors[1:]:
        total = total + tensor
    return total


def extract_features(params: NetworkParams, config: NetworkConfig, observed: Tensor) -> Tensor:
    pad = config.padding
    outputs = [relu(_conv(params, 'features.stem', observed, pad))]
    for layer in range(config.dense_layers):
        outputs.append(relu(_conv(params, f'features.dense{layer + 1}', concat_channels(outputs), pad)))
    return concat_channels(outputs)


def _recurrent_unit(params: NetworkParams, prefix: str, config: NetworkConfig,
                    features: Tensor, context: Tensor, zeros: Tensor) -> Tensor:
    pad = config.padding
    prediction = zeros
    for _ in range(config.recurrent_iters):
        x = concat_channels([features, context, prediction])
        hidden = relu(_conv(params, f'{prefix}.conv_in', x, pad))
        hidden = relu(_conv(params, f'{prefix}.conv_mid', hidden, pad)) + hidden
        prediction = prediction + _conv(params, f'{prefix}.conv_out', hidden, pad)
    return prediction


def forward(params: NetworkParams, config: NetworkConfig, observed, light=None) -> ForwardTrace:
    """
    Run the network on O.

    ``light`` is the atmospheric light used by the veil head: a scalar, one
    value per batch image, or None for the brightest-pixel estimate. It is
    ignored when the veil head is off.
    """
    o = _as_input(observed)
    pad = config.padding
    features = extract_features(params, config, o)
    zeros = Tensor.zeros(o.shape)

    rain_maps: List[List[Tensor]] = []
    cumulative: List[List[Tensor]] = []
    stage_outputs: List[Tensor] = []
    direct = None
    if config.scale_bins:
        previous = o
        running = [zeros] * config.scale_bins
        for stage in range(config.stages):
            group = 0 if config.share_stage_weights else stage
            context = concat_channels([previous] + running)
            maps = [
                _recurrent_unit(params, f'stage{group + 1}.scale{scale + 1}', config, features, context, zeros)
                for scale in range(config.scale_bins)
            ]
            previous = previous - _sum(maps)
            running = [c + m for c, m in zip(running, maps)]
            rain_maps.append(maps)
            cumulative.append(running)
            stage_outputs.append(previous)
        rain_total = _sum(running)
    else:
        x = concat_channels([features, o])
        direct = _conv(params, 'direct.conv_out', relu(_conv(params, 'direct.conv_in', x, pad)), pad)
        stage_outputs.append(o - direct)
        rain_total = direct

    inv_alpha = None
    light_value = None
    if config.veil_enabled:
        x = concat_channels([features, o])
        raw = _conv(params, 'veil.conv_out', relu(_conv(params, 'veil.conv_in', x, pad)), pad)
        excess = relu(raw)
        inv_alpha = excess + 1.0
        light_value = estimate_atmospheric_light(o) if light is None else light
        atmos = _light_map(o, light_value)
        background = o + repeat_channels(excess, 3) * (o - atmos) - rain_total
    else:
        background = stage_outputs[-1]

    return ForwardTrace(
        features=features,
        rain_maps=rain_maps,
        cumulative_rain=cumulative,
        stage_outputs=stage_outputs,
        background=background,
        inv_transmittance=inv_alpha,
        direct_residual=direct,
        atmospheric_light=light_value,
        stage_weights=tuple(config.stage_weight(j) for j in range(len(cumulative))),
    )


@dataclass
class TrainingTargets:
    """Ground truth for one image or a stacked batch"""

    background: np.ndarray
    streaks: List[np.ndarray]
    inv_transmittance: Optional[np.ndarray]
    atmospheric_light: Union[float, np.ndarray]


def targets_from_scene(scene: RainScene) -> TrainingTargets:
    return TrainingTargets(
        background=scene.background.data,
        streaks=[layer.data for layer in scene.streak_layers],
        inv_transmittance=scene.inverse_transmittance(),
        atmospheric_light=scene.atmospheric_light,
    )


def stack_targets(scenes: Sequence[RainScene]) -> Tuple[np.ndarray, TrainingTargets]:
    """Batch scenes into (observed N x 3 x H x W, targets)"""
    layer_counts = {s.layer_count for s in scenes}
    if len(layer_counts) != 1:
        raise ShapeMismatchError('stack_targets', 'streak layer count', min(layer_counts), max(layer_counts))
    observed = np.stack([s.observed.data for s in scenes])
    targets = TrainingTargets(
        background=np.stack([s.background.data for s in scenes]),
        streaks=[np.stack([s.streak_layers[i].data for s in scenes]) for i in range(scenes[0].layer_count)],
        inv_transmittance=np.stack([s.inverse_transmittance() for s in scenes]),
        atmospheric_light=np.array([s.atmospheric_light for s in scenes]),
    )
    return observed, targets


def _as_targets(scene) -> TrainingTargets:
    return targets_from_scene(scene) if isinstance(scene, RainScene) else scene


def loss_smrnet(trace: ForwardTrace, scene) -> Tensor:
    """
    MSE(B_hat, B) + sum_j w_j sum_i MSE(C_i^j, R_i)

    C_i^j is the cumulative rain estimate of scale i after stage j, so the
    last stage's term supervises the final per-scale rain map.
    """
    targets = _as_targets(scene)
    loss = reduce_mse(trace.background, Tensor(targets.background))
    if not trace.cumulative_rain:
        return loss
    scales = len(trace.cumulative_rain[0])
    if scales != len(targets.streaks):
        raise ShapeMismatchError('loss_smrnet', 'bin count', scales, len(targets.streaks))
    truth = [Tensor(r) for r in targets.streaks]
    for stage, estimates in enumerate(trace.cumulative_rain):
        weight = trace.stage_weights[stage] if trace.stage_weights else 1.0
        if weight == 0.0:
            continue
        stage_loss = _sum([reduce_mse(est, r) for est, r in zip(estimates, truth)])
        loss = loss + (stage_loss if weight == 1.0 else stage_loss * weight)
    return loss


def loss_smrnet_veil(trace: ForwardTrace, scene) -> Tensor:
    """loss_smrnet + MSE(inv_alpha_hat, 1 / alpha)"""
    targets = _as_targets(scene)
    if trace.inv_transmittance is None:
        raise DomainError("loss_smrnet_veil: the trace has no inverse transmittance (veil head off)")
    if targets.inv_transmittance is None:
        raise DomainError("loss_smrnet_veil: the scene has no transmittance ground truth")
    return loss_smrnet(trace, targets) + reduce_mse(trace.inv_transmittance, Tensor(targets.inv_transmittance))


def network_loss(config: NetworkConfig, trace: ForwardTrace, scene) -> Tensor:
    return loss_smrnet_veil(trace, scene) if config.veil_enabled else loss_smrnet(trace, scene)


@dataclass(frozen=True)
class LightMode:
    """How the atmospheric light is chosen at inference: a known value or the brightest pixel"""

    kind: str = 'brightest_pixel'
    value: Optional[float] = None

    @classmethod
    def known(cls, value: float) -> "LightMode":
        return cls('known', float(value))

    @classmethod
    def brightest_pixel(cls) -> "LightMode":
        return cls('brightest_pixel')

    def resolve(self, observed: Tensor):
        if self.kind == 'known':
            return self.value
        return estimate_atmospheric_light(observed)


def derain(params: NetworkParams, config: NetworkConfig, observed,
           light_mode: LightMode = LightMode.brightest_pixel()) -> Tuple[np.ndarray, ForwardTrace]:
    """Restore O; returns B_hat clamped to [0, 1] and the full trace"""
    o = _as_input(observed).detach()
    inference = NetworkParams(OrderedDict((k, t.detach()) for k, t in params.items()))
    trace = forward(inference, config, o, light=light_mode.resolve(o) if config.veil_enabled else None)
    return trace.restored(), trace


_NAME_LEN = struct.Struct('<H')
_U32 = struct.Struct('<I')
_NDIM = struct.Struct('<B')


def save_checkpoint(path, params: NetworkParams, config: NetworkConfig) -> Path:
    """
    Layout: b"SMRC", uint32 version, uint32 n + n bytes of config JSON,
    uint32 tensor count, then per tensor: uint16 name length, name, uint8
    ndim, uint32 dims, float64 data. All little endian.
    """
    path = Path(path)
    config_blob = json.dumps(config.to_dict(), sort_keys=True).encode('utf-8')
    chunks = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(config_blob)), config_blob,
              _U32.pack(len(params))]
    for name, tensor in params.items():
        encoded = name.encode('utf-8')
        chunks.append(_NAME_LEN.pack(len(encoded)) + encoded)
        chunks.append(_NDIM.pack(tensor.ndim) + b''.join(_U32.pack(d) for d in tensor.shape))
        chunks.append(tensor.data.astype('<f8').tobytes())
    try:
        path.write_bytes(b''.join(chunks))
    except OSError as e:
        raise StorageError(path, f"cannot write checkpoint ({e.strerror or e})")
    return path


def _take(blob: bytes, offset: int, size: int) -> bytes:
    if offset + size > len(blob):
        raise CheckpointError(f"truncated at byte {len(blob)}, {offset + size} needed")
    return blob[offset:offset + size]


def load_checkpoint(path, expected: Optional[NetworkConfig] = None) -> Tuple[NetworkParams, NetworkConfig]:
    """Load params and the echoed config; with ``expected`` the key sets must match exactly"""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise StorageError(path, f"cannot read checkpoint ({e.strerror or e})")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    offset = 4
    try:
        (version,) = _U32.unpack(_take(blob, offset, 4))
        offset += 4
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (config_len,) = _U32.unpack(_take(blob, offset, 4))
        offset += 4
        config_data = json.loads(_take(blob, offset, config_len).decode('utf-8'))
        if not isinstance(config_data, dict):
            raise CheckpointError(f"config record is a {type(config_data).__name__}, not an object")
        config = NetworkConfig.from_dict(config_data)
        offset += config_len
        (count,) = _U32.unpack(_take(blob, offset, 4))
        offset += 4
        tensors = OrderedDict()
        for _ in range(count):
            (name_len,) = _NAME_LEN.unpack(_take(blob, offset, 2))
            offset += 2
            name = _take(blob, offset, name_len).decode('utf-8')
            offset += name_len
            (ndim,) = _NDIM.unpack(_take(blob, offset, 1))
            offset += 1
            shape = struct.unpack(f'<{ndim}I', _take(blob, offset, 4 * ndim))
            offset += 4 * ndim
            size = int(np.prod(shape))
            data = np.frombuffer(_take(blob, offset, 8 * size), dtype='<f8').astype(np.float64)
            offset += 8 * size
            tensors[name] = Tensor(data.reshape(shape), requires_grad=True)
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}")
    except (ConfigError, ShapeMismatchError, TypeError, ValueError) as e:
        # ValueError covers bad JSON and bad UTF-8 in names
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})")
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")

    reference = expected or config
    expected_keys = [f'{name}.{kind}' for name, _, _ in layer_shapes(reference) for kind in ('weight', 'bias')]
    if list(tensors) != expected_keys:
        missing = sorted(set(expected_keys) - set(tensors))
        extra = sorted(set(tensors) - set(expected_keys))
        raise CheckpointError(f"{path}: parameter keys do not match the config (missing {missing}, extra {extra})")
    return NetworkParams(tensors), config
