"""Label-preserving style augmentation: random convolution, mixing, texture corruption."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from fedgca.streams import SeedKey, make_rng

OPS = ("randconv", "mix", "texture")


@dataclass(frozen=True)
class AugmentConfig:
    J: int = 2
    kernel_sizes: tuple[int, ...] = (1, 3, 5, 7)
    mixing_weight_range: tuple[float, float] = (0.0, 1.0)
    corruption_scales: tuple[int, ...] = (1, 2, 4)
    factor_range: tuple[float, float] = (0.7, 1.3)
    op_probabilities: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        if self.J < 0:
            raise ValueError(f"J must be >= 0, got {self.J}")
        if not self.kernel_sizes or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError(f"kernel sizes must be odd and >= 1, got {self.kernel_sizes}")
        lo, hi = self.mixing_weight_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"mixing_weight_range must be a sub-interval of [0, 1], got {self.mixing_weight_range}")
        if not self.corruption_scales or any(s < 1 for s in self.corruption_scales):
            raise ValueError(f"corruption scales must be positive, got {self.corruption_scales}")
        if len(self.op_probabilities) != 3 or min(self.op_probabilities) < 0:
            raise ValueError("op_probabilities must be three non-negative reals")
        if abs(sum(self.op_probabilities) - 1.0) > 1e-9:
            raise ValueError(f"op_probabilities must sum to 1, got {sum(self.op_probabilities)}")


@dataclass
class AugmentedBatch:
    views: list[np.ndarray]
    labels: np.ndarray

    @property
    def J(self) -> int:
        return len(self.views) - 1

    def stacked(self) -> np.ndarray:
        """Views stacked along a new leading axis: ``(J+1, n, C, H, W)``."""
        return np.stack(self.views)


def _check_kernel(batch: np.ndarray, kernel_size: int) -> None:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {kernel_size}")
    if kernel_size > min(batch.shape[2:]):
        raise ValueError(f"kernel size {kernel_size} exceeds image size {batch.shape[2:]}")


def sample_kernel(channels: int, kernel_size: int, seed: SeedKey) -> np.ndarray:
    std = np.sqrt(1.0 / (kernel_size * kernel_size * channels))
    return make_rng(seed).normal(0.0, std, size=(channels, channels, kernel_size, kernel_size))


def raw_conv(batch: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size convolution (cross-correlation) with edge-replicate padding, no rescaling."""
    x = torch.from_numpy(np.ascontiguousarray(batch))
    w = torch.from_numpy(np.asarray(kernel, dtype=batch.dtype))
    r = w.shape[-1] // 2
    if r:
        x = F.pad(x, (r, r, r, r), mode="replicate")
    return F.conv2d(x, w).numpy()


def minmax_rescale(images: np.ndarray) -> np.ndarray:
    lo = images.min(axis=(1, 2, 3), keepdims=True)
    hi = images.max(axis=(1, 2, 3), keepdims=True)
    span = hi - lo
    degenerate = span < 1e-8
    out = (images - lo) / np.where(degenerate, 1.0, span)
    out = np.where(degenerate, 0.5, out)
    return np.clip(out, 0.0, 1.0).astype(images.dtype, copy=False)


def rand_conv(batch: np.ndarray, kernel_size: int, seed: SeedKey, *, kernel: np.ndarray | None = None) -> np.ndarray:
    """One random kernel shared by the whole batch, then per-image min-max rescale.

    ``kernel`` overrides the sampled weights (test hook).
    """
    _check_kernel(batch, kernel_size)
    if kernel is None:
        kernel = sample_kernel(batch.shape[1], kernel_size, seed)
    return minmax_rescale(raw_conv(batch, kernel))


def mix_augment(batch: np.ndarray, seed: SeedKey, config: AugmentConfig) -> np.ndarray:
    rng = make_rng(seed)
    k = int(rng.choice(config.kernel_sizes))
    conv_seed = int(rng.integers(0, 2**62))
    m = rng.uniform(*config.mixing_weight_range, size=len(batch)).astype(batch.dtype)
    m = m[:, None, None, None]
    conv = rand_conv(batch, k, conv_seed)
    return np.clip((1 - m) * batch + m * conv, 0.0, 1.0).astype(batch.dtype, copy=False)


def texture_corrupt(batch: np.ndarray, seed: SeedKey, config: AugmentConfig) -> np.ndarray:
    """Multiply each ``s x s`` tile by a random factor; one scale per image."""
    rng = make_rng(seed)
    n, _, h, w = batch.shape
    lo, hi = config.factor_range
    out = np.empty_like(batch)
    for i in range(n):
        s = int(rng.choice(config.corruption_scales))
        if s < 1:
            raise ValueError(f"corruption scale must be positive, got {s}")
        th, tw = -(-h // s), -(-w // s)
        factors = rng.uniform(lo, hi, size=(th, tw))
        field_ = np.repeat(np.repeat(factors, s, axis=0), s, axis=1)[:h, :w]
        out[i] = batch[i] * field_.astype(batch.dtype)
    return np.clip(out, 0.0, 1.0)


def select_op(seed: int, j: int, config: AugmentConfig) -> tuple[str, int]:
    """Operator and kernel size for view ``j``, drawn from stream ``(seed, j, 0)``."""
    rng = make_rng((seed, j, 0))
    op = OPS[int(rng.choice(3, p=config.op_probabilities))]
    k = int(rng.choice(config.kernel_sizes))
    return op, k


def style_complement(batch: np.ndarray, labels: np.ndarray, config: AugmentConfig, seed: int) -> AugmentedBatch:
    if len(batch) != len(labels):
        raise ValueError(f"{len(batch)} images but {len(labels)} labels")
    views = [batch]
    for j in range(1, config.J + 1):
        op, k = select_op(seed, j, config)
        key = (seed, j)
        if op == "randconv":
            views.append(rand_conv(batch, k, key))
        elif op == "mix":
            views.append(mix_augment(batch, key, config))
        else:
            views.append(texture_corrupt(batch, key, config))
    return AugmentedBatch(views, labels)

