"""
Training loop, optimizers, held-out evaluation and the module-count ablation.

A run is deterministic given the network seed, the shuffle seed and the
corpus: batches are formed in a fixed (seeded) order and gradients are
accumulated in that order on a single thread.
"""
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from errors import ConfigError, StorageError
from metrics import psnr, ssim, SSIM_WINDOW
from smrnet import (
    LightMode,
    NetworkConfig,
    NetworkParams,
    build_network,
    derain,
    forward,
    network_loss,
    save_checkpoint,
    stack_targets,
)
from tensor import Tensor, backward
from utils import ensure_dir, fmt

logger = logging.getLogger(__name__)

TRAINING_LOG = 'training_log.csv'
TRAINING_LOG_HEADER = 'epoch,train_loss,holdout_psnr,holdout_ssim,wall_seconds,holdout_veil_mae'
ABLATION_CSV = 'ablation.csv'
ABLATION_HEADER = 'variant,epoch,train_loss,holdout_psnr'
OPTIMIZERS = ('adam', 'sgd')
LIGHT_MODES = ('known', 'brightest_pixel')


class SGD:
    def __init__(self, params, lr=0.001):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class Adam:
    def __init__(self, params, lr=0.001, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0

        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        for p in self.params:
            if p.grad is None:
                continue

            grad = p.grad

            self.m[id(p)] = self.beta1 * self.m[id(p)] + (1 - self.beta1) * grad
            self.v[id(p)] = self.beta2 * self.v[id(p)] + (1 - self.beta2) * (grad ** 2)

            m_hat = self.m[id(p)] / (1 - self.beta1 ** self.t)
            v_hat = self.v[id(p)] / (1 - self.beta2 ** self.t)

            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 4
    optimizer: str = 'adam'
    learning_rate: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    holdout_fraction: float = 0.25
    shuffle: bool = True
    shuffle_seed: int = 0
    light_mode: str = 'known'

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1: {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1: {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}: {self.optimizer}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0: {self.learning_rate}")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"betas must be two values in [0, 1): {self.betas}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction must lie in [0, 1): {self.holdout_fraction}")
        if self.light_mode not in LIGHT_MODES:
            raise ConfigError(f"light_mode must be one of {LIGHT_MODES}: {self.light_mode}")
        object.__setattr__(self, 'betas', tuple(float(b) for b in self.betas))

    def make_optimizer(self, params: NetworkParams):
        if self.optimizer == 'sgd':
            return SGD(params.tensors(), lr=self.learning_rate)
        return Adam(params.tensors(), lr=self.learning_rate, betas=self.betas)

    def to_dict(self):
        data = asdict(self)
        data['betas'] = list(self.betas)
        return data


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    holdout_psnr: Optional[float]
    holdout_ssim: Optional[float]
    wall_seconds: float
    holdout_veil_mae: Optional[float] = None
    input_psnr: Optional[float] = None

    def to_row(self):
        return ','.join([
            str(self.epoch), fmt(self.train_loss), fmt(self.holdout_psnr), fmt(self.holdout_ssim),
            fmt(self.wall_seconds, 3), fmt(self.holdout_veil_mae),
        ])


@dataclass
class TrainingResult:
    params: NetworkParams
    log: List[EpochRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    @property
    def final(self) -> Optional[EpochRecord]:
        return self.log[-1] if self.log else None


@dataclass
class HoldoutScores:
    psnr: Optional[float]
    ssim: Optional[float]
    veil_mae: Optional[float]
    input_psnr: Optional[float]


def check_corpus_fits(config: NetworkConfig, manifest) -> None:
    """The corpus must carry one streak layer per scale bin of the network"""
    layers = manifest.bin_count
    if config.scale_bins and layers is not None and layers != config.scale_bins:
        raise ConfigError(
            f"corpus has {layers} streak layers per scene but the network has {config.scale_bins} scale bins"
        )


def _light_for(scene, mode: str) -> LightMode:
    return LightMode.known(scene.atmospheric_light) if mode == 'known' else LightMode.brightest_pixel()


def evaluate_holdout(params: NetworkParams, config: NetworkConfig, scenes: Sequence,
                     light_mode: str = 'known') -> HoldoutScores:
    """Mean PSNR / SSIM of the restorations (and mean |inv_alpha_hat - 1/alpha| when veiled)"""
    if not scenes:
        return HoldoutScores(None, None, None, None)
    psnrs, ssims, maes, inputs = [], [], [], []
    for scene in scenes:
        restored, trace = derain(params, config, scene.observed, _light_for(scene, light_mode))
        truth = scene.background.data
        psnrs.append(psnr(restored, truth))
        inputs.append(psnr(scene.observed, truth))
        if min(truth.shape[-2:]) >= SSIM_WINDOW:
            ssims.append(ssim(restored, truth))
        if trace.inv_transmittance is not None:
            maes.append(float(np.mean(np.abs(trace.inv_transmittance.data - scene.inverse_transmittance()))))
    return HoldoutScores(
        psnr=sum(psnrs) / len(psnrs),
        ssim=sum(ssims) / len(ssims) if ssims else None,
        veil_mae=sum(maes) / len(maes) if maes else None,
        input_psnr=sum(inputs) / len(inputs),
    )


def write_training_log(path, log: Sequence[EpochRecord]) -> Path:
    path = Path(path)
    lines = [TRAINING_LOG_HEADER] + [record.to_row() for record in log]
    try:
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    except OSError as e:
        raise StorageError(path, f"cannot write training log ({e.strerror or e})")
    return path


def train(params: NetworkParams, config: NetworkConfig, manifest, training: TrainingConfig = TrainingConfig(),
          out_dir=None, progress: bool = False, scenes=None) -> TrainingResult:
    """
    Train ``params`` in place on the manifest's training split.

    Writes ``epoch_NNN.smrc`` checkpoints and the training log under
    ``out_dir`` after every epoch when an output directory is given.
    """
    check_corpus_fits(config, manifest)
    train_manifest, holdout_manifest = manifest.split(training.holdout_fraction)
    if not len(train_manifest):
        raise ConfigError("training split is empty")
    if scenes is None:
        scenes = [manifest.load_scene(entry) for entry in manifest]
    train_scenes = scenes[:len(train_manifest)]
    holdout_scenes = scenes[len(train_manifest):]
    out_dir = ensure_dir(out_dir) if out_dir is not None else None

    optimizer = training.make_optimizer(params)
    rng = np.random.default_rng(training.shuffle_seed)
    result = TrainingResult(params)
    logger.info("training %d parameters on %d scenes (%d held out) for %d epochs",
                params.parameter_count(), len(train_scenes), len(holdout_scenes), training.epochs)

    for epoch in range(1, training.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_scenes)) if training.shuffle else np.arange(len(train_scenes))
        batches = [order[i:i + training.batch_size] for i in range(0, len(order), training.batch_size)]
        total = 0.0
        for batch in tqdm(batches, desc=f"epoch {epoch}", disable=not progress, leave=False):
            observed, targets = stack_targets([train_scenes[i] for i in batch])
            trace = forward(params, config, Tensor(observed), light=targets.atmospheric_light)
            loss = network_loss(config, trace, targets)
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            total += loss.item() * len(batch)

        scores = evaluate_holdout(params, config, holdout_scenes, training.light_mode)
        record = EpochRecord(
            epoch=epoch,
            train_loss=total / len(train_scenes),
            holdout_psnr=scores.psnr,
            holdout_ssim=scores.ssim,
            wall_seconds=time.perf_counter() - started,
            holdout_veil_mae=scores.veil_mae,
            input_psnr=scores.input_psnr,
        )
        result.log.append(record)
        logger.info("epoch %d: loss %.6f holdout PSNR %s", epoch, record.train_loss, fmt(record.holdout_psnr, 3))
        if out_dir is not None:
            result.checkpoints.append(save_checkpoint(out_dir / f"epoch_{epoch:03d}.smrc", params, config))
            write_training_log(out_dir / TRAINING_LOG, result.log)
    return result


@dataclass
class AblationRow:
    variant: str
    epoch: int
    train_loss: float
    holdout_psnr: Optional[float]

    def to_row(self):
        return f"{self.variant},{self.epoch},{fmt(self.train_loss)},{fmt(self.holdout_psnr)}"


def variant_name(modules: int) -> str:
    return f"modules_{modules}"


def run_ablation(manifest, base: NetworkConfig, training: TrainingConfig, modules: Sequence[int] = (0, 3),
                 out_dir=None) -> Tuple[List[AblationRow], dict]:
    """
    Train one network per recurrent-module count under the same seed and budget.

    Returns the per-(variant, epoch) rows and each variant's parameter count.
    """
    scenes = [manifest.load_scene(entry) for entry in manifest]
    rows: List[AblationRow] = []
    counts = {}
    for count in modules:
        config = replace(base, scale_bins=count)
        params = build_network(config)
        counts[variant_name(count)] = params.parameter_count()
        logger.info("ablation variant %s: %d parameters", variant_name(count), counts[variant_name(count)])
        result = train(params, config, manifest, training, scenes=scenes)
        rows.extend(AblationRow(variant_name(count), r.epoch, r.train_loss, r.holdout_psnr) for r in result.log)
    if out_dir is not None:
        path = ensure_dir(out_dir) / ABLATION_CSV
        try:
            path.write_text('\n'.join([ABLATION_HEADER] + [r.to_row() for r in rows]) + '\n', encoding='utf-8')
        except OSError as e:
            raise StorageError(path, f"cannot write ablation table ({e.strerror or e})")
    return rows, counts
