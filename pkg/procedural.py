"""Procedural clean backgrounds and depth maps."""

import numpy as np

BACKGROUND_KINDS = ('value_noise', 'gradient', 'mixed')
DEPTH_KINDS = ('ramp', 'ramp_blobs')

# Depth maps span roughly [DEPTH_NEAR, DEPTH_FAR] (arbitrary metres)
DEPTH_NEAR = 0.2
DEPTH_FAR = 2.5


def _fade(t):
    """Perlin fade function: 6t^5 - 15t^4 + 10t^3."""
    return t * t * t * (t * (t * 6 - 15) + 10)


def value_noise_2d(height, width, scale, rng):
    """Smoothly interpolated lattice noise in [0, 1]; ``scale`` is the cell size in pixels."""
    scale = max(scale, 1.0)
    gh = int(np.ceil(height / scale)) + 2
    gw = int(np.ceil(width / scale)) + 2
    grid = rng.random((gh, gw))

    y = np.arange(height) / scale
    x = np.arange(width) / scale
    yi = np.floor(y).astype(int)
    xi = np.floor(x).astype(int)
    yf = _fade(y - yi)[:, None]
    xf = _fade(x - xi)[None, :]

    v00 = grid[yi[:, None], xi[None, :]]
    v10 = grid[yi[:, None] + 1, xi[None, :]]
    v01 = grid[yi[:, None], xi[None, :] + 1]
    v11 = grid[yi[:, None] + 1, xi[None, :] + 1]
    top = v00 + xf * (v01 - v00)
    bottom = v10 + xf * (v11 - v10)
    return top + yf * (bottom - top)


def fbm_2d(height, width, rng, octaves=4, base_scale=16.0, persistence=0.5, lacunarity=2.0):
    """Fractal sum of value-noise octaves, normalised to [0, 1]."""
    result = np.zeros((height, width), dtype=np.float64)
    amplitude = 1.0
    total = 0.0
    scale = base_scale
    for _ in range(octaves):
        result += amplitude * value_noise_2d(height, width, scale, rng)
        total += amplitude
        amplitude *= persistence
        scale /= lacunarity
    return result / total


def linear_gradient(height, width, rng):
    """A planar ramp in a random direction, rescaled to [0, 1]."""
    angle = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    span = ramp.max() - ramp.min()
    return (ramp - ramp.min()) / span if span > 0 else np.zeros_like(ramp)


def make_background(kind, height, width, rng):
    """A 3 x H x W clean background in [0, 1]"""
    if kind not in BACKGROUND_KINDS:
        raise ValueError(f"unknown background kind: {kind}")
    base_scale = max(min(height, width) / 3.0, 2.0)
    channels = []
    tint = rng.uniform(0.15, 0.85, size=3)
    for c in range(3):
        if kind == 'value_noise':
            plane = fbm_2d(height, width, rng, base_scale=base_scale)
        elif kind == 'gradient':
            plane = linear_gradient(height, width, rng)
        else:
            plane = 0.6 * fbm_2d(height, width, rng, base_scale=base_scale) \
                + 0.4 * linear_gradient(height, width, rng)
        channels.append(0.5 * plane + 0.5 * tint[c])
    return np.clip(np.stack(channels), 0.0, 1.0) * 0.85


def make_depth(kind, height, width, rng):
    """A 1 x H x W nonnegative depth map: a tilted plane, optionally with Gaussian bumps"""
    if kind not in DEPTH_KINDS:
        raise ValueError(f"unknown depth kind: {kind}")
    depth = DEPTH_NEAR + (DEPTH_FAR - DEPTH_NEAR) * linear_gradient(height, width, rng)
    if kind == 'ramp_blobs':
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            radius = rng.uniform(0.1, 0.3) * min(height, width)
            # Near objects pull depth towards the camera
            pull = rng.uniform(0.3, 0.8) * (depth - DEPTH_NEAR)
            depth = depth - pull * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
    return np.maximum(depth, 0.0)[None]
