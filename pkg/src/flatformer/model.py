"""Model core: unified attention over flattened patch tokens.

Two attention paths share the encoder skeleton:

* full  -- multi-head self-attention over all N*p tokens; the attention map
  costs h * (N*p)^2 elements per layer per batch element.
* dispatcher -- k learnable dispatcher embeddings first aggregate from all
  tokens (queries = dispatchers) and then distribute back (queries = tokens),
  replacing the quadratic map with two maps of h * k * N*p elements each.

Blocks are post-norm: X'' = BN2(Y + FFN(Y)) with Y = BN1(X' + Attn(X')).
The forecasting head flattens each variate's p token vectors and applies one
shared linear map to the horizon.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .data import INSTANCE_NORM_EPS
from .patching import PatchConfig, embed_patches, flatten_tokens, segment_patches, unflatten_tokens

CHECKPOINT_FORMAT = "flatformer.ckpt.v1"

AttentionMode = Literal["dispatcher", "full"]


@dataclass(frozen=True)
class ModelConfig:
    """All hyperparameters; learnable tensors live in :class:`Flatformer`."""

    n_variates: int
    lookback: int
    horizon: int
    patch_len: int = 16
    stride: int = 8
    pad_last: bool = True
    d_model: int = 128
    n_heads: int = 8
    n_dispatchers: int = 10
    n_layers: int = 2
    d_ff: int | None = None
    dropout: float = 0.1
    attention_mode: AttentionMode = "dispatcher"
    capture_attention: bool = False
    instance_norm: bool = True
    per_layer_dispatchers: bool = False
    within_variate_only: bool = False
    dtype: Literal["float32", "float64"] = "float64"

    def __post_init__(self) -> None:
        for name in ("n_variates", "lookback", "horizon", "d_model", "n_heads", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.attention_mode not in ("dispatcher", "full"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        if self.attention_mode == "dispatcher" and self.n_dispatchers < 1:
            raise ValueError("dispatcher mode needs n_dispatchers >= 1")
        if self.within_variate_only and self.attention_mode != "full":
            raise ValueError("within_variate_only is only meaningful in full attention mode")
        self.patch_config()  # validates patch_len/stride and patch_len <= lookback
        self.patch_config().n_patches(self.lookback)

    def patch_config(self) -> PatchConfig:
        return PatchConfig(self.patch_len, self.stride, self.pad_last)

    @property
    def n_patches(self) -> int:
        return self.patch_config().n_patches(self.lookback)

    @property
    def n_tokens(self) -> int:
        return self.n_variates * self.n_patches

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 2 * self.d_model

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class AttentionRecord:
    """Head-averaged attention maps captured from one layer (eval mode only).

    Arrays carry a leading batch dimension: ``agg`` [B, k, N*p] holds the
    dispatcher<-token weights, ``dist`` [B, N*p, k] the token<-dispatcher
    weights, ``full`` [B, N*p, N*p] the direct token-token weights.
    """

    layer: int
    agg: np.ndarray | None = None
    dist: np.ndarray | None = None
    full: np.ndarray | None = None

    def matrices(self) -> list[np.ndarray]:
        return [m for m in (self.agg, self.dist, self.full) if m is not None]


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Row-softmax(q k^T / sqrt(d_k)) v with explicit max subtraction.

    Accepts any matching leading batch dims on [..., m, d_k], [..., n, d_k],
    [..., n, d_v]; returns (output [..., m, d_v], weights [..., m, n]).
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if torch.isnan(t).any():
            raise ValueError(f"NaN in attention input {name}")
    scores = q @ k.transpose(-2, -1) / (q.shape[-1] ** 0.5)
    scores = scores - scores.amax(dim=-1, keepdim=True)
    weights = torch.exp(scores)
    weights = weights / weights.sum(dim=-1, keepdim=True)
    return weights @ v, weights


def _masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
    """Like :func:`scaled_dot_attention` but with disallowed pairs zeroed.

    ``mask`` is boolean [m, n], True where attention is allowed; every row
    must keep at least one allowed entry.
    """
    scores = q @ k.transpose(-2, -1) / (q.shape[-1] ** 0.5)
    scores = scores.masked_fill(~mask, -torch.inf)
    scores = scores - scores.amax(dim=-1, keepdim=True)
    weights = torch.exp(scores)
    weights = weights / weights.sum(dim=-1, keepdim=True)
    return weights @ v, weights


def _fan_in_uniform(shape: tuple[int, ...], dtype: torch.dtype) -> nn.Parameter:
    bound = shape[0] ** -0.5
    return nn.Parameter(torch.empty(shape, dtype=dtype).uniform_(-bound, bound))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, m, d] -> [B, h, m, d/h]"""
    b, m, d = x.shape
    return x.view(b, m, n_heads, d // n_heads).transpose(1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    """[B, h, m, d_h] -> [B, m, h*d_h]"""
    b, h, m, dh = x.shape
    return x.transpose(1, 2).reshape(b, m, h * dh)


class FullAttention(nn.Module):
    """Multi-head self-attention over the whole flattened token sequence."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, dt = cfg.d_model, cfg.torch_dtype
        self.n_heads = cfg.n_heads
        self.w_q = _fan_in_uniform((d, d), dt)
        self.w_k = _fan_in_uniform((d, d), dt)
        self.w_v = _fan_in_uniform((d, d), dt)
        self.w_o = _fan_in_uniform((d, d), dt)
        mask = None
        if cfg.within_variate_only:
            variate = torch.arange(cfg.n_tokens) // cfg.n_patches
            mask = variate[:, None] == variate[None, :]
        self.register_buffer("mask", mask)
        self.last_attn_numel = 0

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x: [B, m, d] -> (output [B, m, d], head-averaged weights [B, m, m])."""
        q = _split_heads(x @ self.w_q, self.n_heads)
        k = _split_heads(x @ self.w_k, self.n_heads)
        v = _split_heads(x @ self.w_v, self.n_heads)
        if self.mask is not None:
            out, weights = _masked_attention(q, k, v, self.mask)
        else:
            out, weights = scaled_dot_attention(q, k, v)
        self.last_attn_numel = weights.numel()
        return _merge_heads(out) @ self.w_o, weights.mean(dim=1)


class DispatcherAttention(nn.Module):
    """Aggregate/distribute attention pair through k dispatcher embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, dt = cfg.d_model, cfg.torch_dtype
        self.n_heads = cfg.n_heads
        self.w_q1 = _fan_in_uniform((d, d), dt)
        self.w_k1 = _fan_in_uniform((d, d), dt)
        self.w_v1 = _fan_in_uniform((d, d), dt)
        self.w_q2 = _fan_in_uniform((d, d), dt)
        self.w_k2 = _fan_in_uniform((d, d), dt)
        self.w_v2 = _fan_in_uniform((d, d), dt)
        self.w_o = _fan_in_uniform((d, d), dt)
        self.last_attn_numel = 0

    def aggregate(self, dispatchers: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
        """Dispatchers query the tokens: [B, k, d], [B, m, d] -> (D' [B, k, d],
        head-averaged weights [B, k, m]); D' is the raw head concat."""
        q = _split_heads(dispatchers @ self.w_q1, self.n_heads)
        k = _split_heads(x @ self.w_k1, self.n_heads)
        v = _split_heads(x @ self.w_v1, self.n_heads)
        out, weights = scaled_dot_attention(q, k, v)
        self.last_attn_numel = weights.numel()
        return _merge_heads(out), weights.mean(dim=1)

    def distribute(self, x: Tensor, updated: Tensor) -> tuple[Tensor, Tensor]:
        """Tokens query the updated dispatchers; output is projected by w_o."""
        q = _split_heads(x @ self.w_q2, self.n_heads)
        k = _split_heads(updated @ self.w_k2, self.n_heads)
        v = _split_heads(updated @ self.w_v2, self.n_heads)
        out, weights = scaled_dot_attention(q, k, v)
        self.last_attn_numel += weights.numel()
        return _merge_heads(out) @ self.w_o, weights.mean(dim=1)

    def forward(self, x: Tensor, dispatchers: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        # aggregate resets the attention-map counter, distribute adds to it
        updated, w_agg = self.aggregate(dispatchers, x)
        out, w_dist = self.distribute(x, updated)
        return out, w_agg, w_dist


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dt = cfg.torch_dtype
        self.lin1 = nn.Linear(cfg.d_model, cfg.ffn_dim, dtype=dt)
        self.act = nn.GELU()
        self.drop = nn.Dropout(cfg.dropout)
        self.lin2 = nn.Linear(cfg.ffn_dim, cfg.d_model, dtype=dt)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(self.drop(self.act(self.lin1(x))))


class EncoderBlock(nn.Module):
    """Attention + BatchNorm + FFN + BatchNorm with residual connections."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dt = cfg.torch_dtype
        self.mode = cfg.attention_mode
        if cfg.attention_mode == "dispatcher":
            self.attn = DispatcherAttention(cfg)
        else:
            self.attn = FullAttention(cfg)
        self.norm1 = nn.BatchNorm1d(cfg.d_model, dtype=dt)
        self.norm2 = nn.BatchNorm1d(cfg.d_model, dtype=dt)
        self.ffn = FeedForward(cfg)
        self.drop = nn.Dropout(cfg.dropout)

    def _bn(self, norm: nn.BatchNorm1d, x: Tensor) -> Tensor:
        # BatchNorm1d normalizes each of the d features over batch x tokens
        return norm(x.transpose(1, 2)).transpose(1, 2)

    def forward(
        self, x: Tensor, dispatchers: Tensor | None, capture: bool = False
    ) -> tuple[Tensor, AttentionRecord | None]:
        record = None
        if self.mode == "dispatcher":
            attn_out, w_agg, w_dist = self.attn(x, dispatchers)
            if capture:
                record = AttentionRecord(
                    layer=-1,
                    agg=w_agg.detach().cpu().numpy(),
                    dist=w_dist.detach().cpu().numpy(),
                )
        else:
            attn_out, w_full = self.attn(x)
            if capture:
                record = AttentionRecord(layer=-1, full=w_full.detach().cpu().numpy())
        y = self._bn(self.norm1, x + self.drop(attn_out))
        out = self._bn(self.norm2, y + self.ffn(y))
        return out, record


class Flatformer(nn.Module):
    """Forecaster over the flattened N*p patch-token sequence.

    forward pipeline: instance-normalize (optional) -> segment -> embed ->
    flatten -> n_layers encoder blocks -> per-variate token concat -> shared
    linear head -> denormalize. Deterministic in eval mode.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        dt = cfg.torch_dtype
        p = cfg.n_patches

        self.embed_weight = _fan_in_uniform((cfg.patch_len, cfg.d_model), dt)
        self.embed_pos = nn.Parameter(0.02 * torch.randn(cfg.n_variates, p, cfg.d_model, dtype=dt))
        if cfg.attention_mode == "dispatcher":
            n_sets = cfg.n_layers if cfg.per_layer_dispatchers else 1
            self.dispatchers = nn.ParameterList(
                nn.Parameter(0.02 * torch.randn(cfg.n_dispatchers, cfg.d_model, dtype=dt))
                for _ in range(n_sets)
            )
        else:
            self.dispatchers = nn.ParameterList()
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))
        self.head = nn.Linear(p * cfg.d_model, cfg.horizon, dtype=dt)

        self.last_attn_map_elements = 0

    def _dispatchers_for(self, layer: int, batch: int) -> Tensor | None:
        if not self.dispatchers:
            return None
        d = self.dispatchers[layer if self.config.per_layer_dispatchers else 0]
        return d.unsqueeze(0).expand(batch, *d.shape)

    def forward(
        self, x: Tensor, capture_attention: bool | None = None
    ) -> tuple[Tensor, list[AttentionRecord]]:
        """x: [B, N, L] -> (forecast [B, N, S], attention records).

        Records are captured only in eval mode and only when requested (via
        the argument or ``config.capture_attention``).
        """
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.n_variates or x.shape[2] != cfg.lookback:
            raise ValueError(
                f"expected input [B, {cfg.n_variates}, {cfg.lookback}], got {tuple(x.shape)}"
            )
        x = x.to(cfg.torch_dtype)
        capture = cfg.capture_attention if capture_attention is None else capture_attention
        capture = capture and not self.training

        if cfg.instance_norm:
            mean = x.mean(dim=-1, keepdim=True)
            std = x.std(dim=-1, unbiased=False, keepdim=True)
            x = (x - mean) / (std + INSTANCE_NORM_EPS)

        patches = segment_patches(x, cfg.patch_config())
        tokens = flatten_tokens(embed_patches(patches, self.embed_weight, self.embed_pos))

        records: list[AttentionRecord] = []
        self.last_attn_map_elements = 0
        for i, block in enumerate(self.blocks):
            tokens, record = block(tokens, self._dispatchers_for(i, tokens.shape[0]), capture)
            self.last_attn_map_elements += block.attn.last_attn_numel
            if record is not None:
                record.layer = i
                records.append(record)

        grid = unflatten_tokens(tokens, cfg.n_variates, cfg.n_patches)
        z = grid.reshape(x.shape[0], cfg.n_variates, cfg.n_patches * cfg.d_model)
        forecast = self.head(z)

        if cfg.instance_norm:
            forecast = forecast * (std + INSTANCE_NORM_EPS) + mean
        return forecast, records

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def save_checkpoint(model: Flatformer, path: str | Path) -> None:
    """Write config + parameters as one self-describing, format-tagged file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": dataclasses.asdict(model.config),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> Flatformer:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a recognized checkpoint (format={blob.get('format')!r})")
    model = Flatformer(ModelConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"], strict=True)
    model.eval()
    return model
