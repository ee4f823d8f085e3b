"""Attention-map memory accounting and the dispatcher ablation sweep.

The portable form of the memory claim is an exact activation count: per layer
and batch element the dispatcher path materializes 2*h*k*N*p attention-map
elements versus h*(N*p)^2 for full attention. Wall-clock and peak-RSS numbers
are best-effort extras; device-specific GB figures are out of scope.
"""

from __future__ import annotations

import dataclasses
import resource
import time
from dataclasses import dataclass

import torch

from .data import TimeSeriesDataset, make_windows
from .evaluation import evaluate
from .model import Flatformer, ModelConfig
from .training import TrainConfig, train


@dataclass
class MemReport:
    mode: str
    n_variates: int
    n_patches: int
    n_heads: int
    n_dispatchers: int
    n_layers: int
    batch_size: int
    attn_map_elements: int
    param_count: int | None = None
    peak_rss_bytes: int | None = None
    forward_seconds: float | None = None
    test_mse: float | None = None
    status: str = "ok"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def count_attention_memory(cfg: ModelConfig, batch_size: int) -> MemReport:
    """Closed-form attention-map element count; no model is instantiated."""
    n_tokens = cfg.n_tokens
    per_layer = (
        2 * cfg.n_heads * cfg.n_dispatchers * n_tokens
        if cfg.attention_mode == "dispatcher"
        else cfg.n_heads * n_tokens * n_tokens
    )
    return MemReport(
        mode=cfg.attention_mode,
        n_variates=cfg.n_variates,
        n_patches=cfg.n_patches,
        n_heads=cfg.n_heads,
        n_dispatchers=cfg.n_dispatchers,
        n_layers=cfg.n_layers,
        batch_size=batch_size,
        attn_map_elements=batch_size * cfg.n_layers * per_layer,
    )


def measured_attention_memory(cfg: ModelConfig, batch_size: int) -> MemReport:
    """Run one instrumented forward and report the actually allocated count."""
    report = count_attention_memory(cfg, batch_size)
    model = Flatformer(cfg)
    model.eval()
    x = torch.zeros(batch_size, cfg.n_variates, cfg.lookback, dtype=cfg.torch_dtype)
    t0 = time.perf_counter()
    with torch.no_grad():
        model(x)
    report.forward_seconds = time.perf_counter() - t0
    report.attn_map_elements = model.last_attn_map_elements
    report.param_count = model.parameter_count()
    report.peak_rss_bytes = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    return report


def bench_ablation(
    ds: TimeSeriesDataset,
    base_config: ModelConfig,
    train_config: TrainConfig,
    modes: tuple[str, ...] = ("dispatcher", "full"),
    train_epochs: int = 5,
) -> list[MemReport]:
    """With/without-dispatcher comparison at otherwise identical settings.

    Each mode gets the closed-form count plus a short training run and test
    MSE. Resource exhaustion in full mode is recorded in the report row, not
    raised, mirroring how the quadratic path fails on wide datasets.
    """
    reports: list[MemReport] = []
    for mode in modes:
        cfg = dataclasses.replace(
            base_config, attention_mode=mode, within_variate_only=False
        )
        report = count_attention_memory(cfg, train_config.batch_size)
        try:
            tr = make_windows(ds, "train", cfg.lookback, cfg.horizon)
            va = make_windows(ds, "val", cfg.lookback, cfg.horizon)
            te = make_windows(ds, "test", cfg.lookback, cfg.horizon)
            model = Flatformer(cfg)
            short = dataclasses.replace(train_config, max_epochs=train_epochs)
            t0 = time.perf_counter()
            train(model, tr, va, short)
            report.forward_seconds = (time.perf_counter() - t0) / max(1, len(tr))
            report.test_mse, _ = evaluate(model, te, batch_size=train_config.batch_size)
            report.param_count = model.parameter_count()
            report.peak_rss_bytes = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
        except (MemoryError, RuntimeError) as exc:
            report.status = f"resource-exhausted: {exc}"
        reports.append(report)
    return reports


def ablation_table(reports: list[MemReport]) -> str:
    """Aligned text table pairing MSE with the memory count per mode."""
    lines = [f"{'mode':>12}  {'attn elements':>14}  {'params':>10}  {'test MSE':>10}  status"]
    for r in reports:
        mse = f"{r.test_mse:.4f}" if r.test_mse is not None else "-"
        params = str(r.param_count) if r.param_count is not None else "-"
        lines.append(
            f"{r.mode:>12}  {r.attn_map_elements:>14}  {params:>10}  {mse:>10}  {r.status}"
        )
    return "\n".join(lines)
