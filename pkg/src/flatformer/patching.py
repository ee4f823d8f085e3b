"""Patch segmentation, token embedding and the flattened token layout.

Each variate's lookback window is cut into (possibly overlapping) length-l
patches with stride s; every patch becomes one token, so a window yields an
N x p token grid that is flattened row-major into a single sequence of N*p
tokens (token t = variate t // p, patch t % p).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True)
class PatchConfig:
    patch_len: int
    stride: int
    pad_last: bool = True

    def __post_init__(self) -> None:
        if self.patch_len < 1:
            raise ValueError(f"patch_len must be >= 1, got {self.patch_len}")
        if not 1 <= self.stride <= self.patch_len:
            # stride > patch_len would silently skip samples
            raise ValueError(
                f"stride must lie in [1, patch_len={self.patch_len}], got {self.stride}"
            )

    def n_patches(self, lookback: int) -> int:
        if self.patch_len > lookback:
            raise ValueError(f"patch_len {self.patch_len} exceeds lookback {lookback}")
        tail = lookback - self.patch_len
        p = tail // self.stride + 1
        if self.pad_last and tail % self.stride != 0:
            p += 1
        return p


def segment_patches(x: Tensor, cfg: PatchConfig) -> Tensor:
    """Cut [..., N, L] into patch tokens [..., N, p, patch_len].

    Patch k covers x[..., k*stride : k*stride + patch_len]; when pad_last is
    set and the grid does not land on the end, the series is right-padded by
    replicating the final value so one extra patch covers the tail.
    """
    L = x.shape[-1]
    p = cfg.n_patches(L)
    needed = (p - 1) * cfg.stride + cfg.patch_len
    if needed > L:
        pad = x[..., -1:].expand(*x.shape[:-1], needed - L)
        x = torch.cat([x, pad], dim=-1)
    return x.unfold(-1, cfg.patch_len, cfg.stride)


def embed_patches(x_patches: Tensor, weight: Tensor, pos: Tensor) -> Tensor:
    """Token embeddings: project each patch by ``weight`` [l, d] and add the
    learnable per-(variate, patch) position embedding ``pos`` [N, p, d]."""
    n, p = x_patches.shape[-3], x_patches.shape[-2]
    if pos.shape != (n, p, weight.shape[1]):
        raise ValueError(f"position embedding shape {tuple(pos.shape)} does not match ({n}, {p}, {weight.shape[1]})")
    return x_patches @ weight + pos


def flatten_tokens(h: Tensor) -> Tensor:
    """[..., N, p, d] -> [..., N*p, d], row-major in (variate, patch)."""
    return h.reshape(*h.shape[:-3], h.shape[-3] * h.shape[-2], h.shape[-1])


def unflatten_tokens(tokens: Tensor, n_variates: int, n_patches: int) -> Tensor:
    """Exact inverse of :func:`flatten_tokens`."""
    if tokens.shape[-2] != n_variates * n_patches:
        raise ValueError(
            f"got {tokens.shape[-2]} tokens, expected {n_variates} * {n_patches}"
        )
    return tokens.reshape(*tokens.shape[:-2], n_variates, n_patches, tokens.shape[-1])
