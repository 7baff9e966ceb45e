"""
Finite-difference verification of every differentiable op and of the full
veiled network loss on a small input.
"""
import logging
import time

import numpy as np

from errors import EXIT_FAILURE
from rain_model import RainScene, compose_veiled
from smrnet import NetworkConfig, build_network, forward, loss_smrnet_veil
from tensor import (
    Tensor,
    concat_channels,
    conv2d,
    elementwise,
    grad_check,
    reciprocal,
    reduce_mse,
    relu,
    repeat_channels,
)
from utils import error_response, handle_errors, success_response

logger = logging.getLogger(__name__)

NETWORK_MAX_ENTRIES = 6


def register(subparsers):
    parser = subparsers.add_parser('gradcheck', help='check reverse-mode gradients against central differences')
    parser.add_argument('--seeds', type=int, default=5, help='random seeds per case (default 5)')
    parser.add_argument('--size', type=int, default=8, help='spatial size of the network case (default 8)')
    parser.add_argument('--step', type=float, default=1e-3)
    parser.add_argument('--tol', type=float, default=1e-4)
    parser.add_argument('--max-entries', type=int, default=NETWORK_MAX_ENTRIES,
                        help='entries checked per network parameter tensor')
    parser.add_argument('--skip-network', action='store_true', help='only check the individual ops')
    parser.set_defaults(handler=cmd_gradcheck)


def _uniform(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)


def op_cases(rng):
    """(name, f, inputs) for every differentiable op, each scored through an MSE against a fixed target"""
    a, b = _uniform(rng, 2, 4, 4), _uniform(rng, 2, 4, 4)
    target = Tensor(rng.uniform(-1.0, 1.0, size=(2, 4, 4)))
    away_from_zero = Tensor(rng.choice([-1.0, 1.0], size=(2, 4, 4)) * rng.uniform(0.5, 1.5, size=(2, 4, 4)),
                            requires_grad=True)
    x = _uniform(rng, 2, 5, 5)
    kernel = _uniform(rng, 3, 2, 3, 3)
    bias = _uniform(rng, 3)
    batch = _uniform(rng, 2, 2, 5, 5)
    single = _uniform(rng, 1, 4, 4)
    target5 = Tensor(rng.uniform(-1.0, 1.0, size=(3, 5, 5)))
    target2 = Tensor(rng.uniform(-1.0, 1.0, size=(3, 2, 2)))
    target_batch = Tensor(rng.uniform(-1.0, 1.0, size=(2, 3, 5, 5)))
    target4 = Tensor(rng.uniform(-1.0, 1.0, size=(4, 4, 4)))
    target3 = Tensor(rng.uniform(-1.0, 1.0, size=(3, 4, 4)))
    return [
        ('add', lambda p, q: reduce_mse(elementwise('add', p, q), target), [a, b]),
        ('sub', lambda p, q: reduce_mse(elementwise('sub', p, q), target), [a, b]),
        ('mul', lambda p, q: reduce_mse(elementwise('mul', p, q), target), [a, b]),
        ('reciprocal', lambda p: reduce_mse(reciprocal(p), target), [away_from_zero]),
        ('relu', lambda p: reduce_mse(relu(p), target), [a]),
        ('sum', lambda p: (p * p).sum(), [a]),
        ('mean', lambda p: (p * p).mean(), [a]),
        ('reduce_mse', lambda p, q: reduce_mse(p, q), [a, b]),
        ('shared_use', lambda p: reduce_mse(p * p + p, target), [a]),
        ('conv2d', lambda p, k, c: reduce_mse(conv2d(p, k, c, stride=1, padding=1), target5), [x, kernel, bias]),
        ('conv2d_stride2', lambda p, k, c: reduce_mse(conv2d(p, k, c, stride=2, padding=0), target2),
         [x, kernel, bias]),
        ('conv2d_batch', lambda p, k, c: reduce_mse(conv2d(p, k, c, stride=1, padding=1), target_batch),
         [batch, kernel, bias]),
        ('concat_channels', lambda p, q: reduce_mse(concat_channels([p, q]), target4), [a, b]),
        ('repeat_channels', lambda p: reduce_mse(repeat_channels(p, 3), target3), [single]),
    ]


def network_case(seed, size):
    """A tiny veiled network and a random veiled scene of ``size`` x ``size`` pixels"""
    rng = np.random.default_rng(seed)
    config = NetworkConfig(scale_bins=3, recurrent_iters=2, stages=2, feature_channels=2, dense_layers=1,
                           growth_rate=2, hidden_channels=2, veil_enabled=True, seed=seed)
    params = build_network(config)
    shape = (3, size, size)
    background = rng.uniform(0.0, 0.8, size=shape)
    streaks = [rng.uniform(0.0, 0.1, size=shape) for _ in range(config.scale_bins)]
    alpha = rng.uniform(0.4, 1.0, size=(1, size, size))
    light = float(rng.uniform(0.7, 1.0))
    observed = compose_veiled(background, streaks, alpha, light, clamp=False)
    scene = RainScene(Tensor(background), [Tensor(s) for s in streaks], Tensor(alpha), light, observed)

    def f(*_):
        return loss_smrnet_veil(forward(params, config, scene.observed, light=light), scene)

    return f, params.tensors()


def run_suite(seeds=5, size=8, step=1e-3, tol=1e-4, max_entries=NETWORK_MAX_ENTRIES, network=True):
    reports = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, f, inputs in op_cases(rng):
            reports.append(grad_check(f, inputs, step=step, tol=tol, seed=seed, name=f"{name}[seed={seed}]"))
        if network:
            f, inputs = network_case(seed, size)
            reports.append(grad_check(f, inputs, step=step, tol=tol, max_entries=max_entries, seed=seed,
                                      name=f"smrnet_veil_{size}x{size}[seed={seed}]"))
    return reports


@handle_errors
def cmd_gradcheck(args):
    started = time.perf_counter()
    reports = run_suite(args.seeds, args.size, args.step, args.tol, args.max_entries, not args.skip_network)
    for report in reports:
        print(report.summary())
    failed = [r for r in reports if not r.passed]
    if failed:
        return error_response(f"{len(failed)} of {len(reports)} gradient checks exceed tolerance {args.tol:g}",
                              'gradcheck_failed', EXIT_FAILURE)
    return success_response({
        'checks': len(reports),
        'max_rel_err': f"{max(r.max_rel_err for r in reports):.3e}",
        'seconds': f"{time.perf_counter() - started:.1f}",
    }, message='all gradient checks passed')
