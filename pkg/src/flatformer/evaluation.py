"""Test-split metrics and the long-/short-term forecasting protocols.

Metrics are MSE and MAE over all test windows and all N*S elements, computed
on the dataset-level standardized scale (z-score from train-split statistics,
the benchmark convention); the model's internal per-window normalization is
already reversed inside ``forward``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import TimeSeriesDataset, Windows, make_windows
from .model import Flatformer, ModelConfig
from .training import TrainConfig, train

LONG_TERM_HORIZONS = (96, 192, 336, 720)
SHORT_TERM_HORIZONS = (12, 24, 48, 96)
PROTOCOL_HORIZONS = {"long_term": LONG_TERM_HORIZONS, "short_term": SHORT_TERM_HORIZONS}
PROTOCOL_LOOKBACK = 96


@dataclass
class HorizonResult:
    horizon: int
    mse: float | None
    mae: float | None
    n_windows: int
    error: str | None = None


@dataclass
class EvalReport:
    dataset: str
    protocol: str
    rows: list[HorizonResult] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def average(self) -> tuple[float, float] | None:
        """Arithmetic mean of (mse, mae) over horizons that succeeded."""
        ok = [r for r in self.rows if r.error is None]
        if not ok:
            return None
        return (
            float(np.mean([r.mse for r in ok])),
            float(np.mean([r.mae for r in ok])),
        )

    def to_dict(self) -> dict:
        avg = self.average()
        return {
            "dataset": self.dataset,
            "protocol": self.protocol,
            "rows": [dataclasses.asdict(r) for r in self.rows],
            "average": None if avg is None else {"mse": avg[0], "mae": avg[1]},
            "metadata": self.metadata,
        }

    def to_table(self) -> str:
        """Aligned text table: one row per horizon plus the Avg row."""
        lines = [f"{'S':>6}  {'MSE':>10}  {'MAE':>10}  {'windows':>8}"]
        for r in self.rows:
            if r.error is not None:
                lines.append(f"{r.horizon:>6}  {'FAILED':>10}  {'':>10}  {r.error}")
            else:
                lines.append(f"{r.horizon:>6}  {r.mse:>10.4f}  {r.mae:>10.4f}  {r.n_windows:>8}")
        avg = self.average()
        if avg is not None:
            lines.append(f"{'Avg':>6}  {avg[0]:>10.4f}  {avg[1]:>10.4f}")
        return "\n".join(lines)


@torch.no_grad()
def evaluate(model: Flatformer, windows: Windows, batch_size: int = 64) -> tuple[float, float]:
    """(MSE, MAE) of the model over every window, eval mode."""
    if len(windows) == 0:
        raise ValueError("empty window set")
    model.eval()
    dtype = model.config.torch_dtype
    sq_total, abs_total, count = 0.0, 0.0, 0
    for start in range(0, len(windows), batch_size):
        idx = range(start, min(start + batch_size, len(windows)))
        xs, ys = windows.gather(idx)
        pred, _ = model(torch.from_numpy(np.ascontiguousarray(xs)).to(dtype))
        err = pred.numpy() - ys
        sq_total += float((err**2).sum())
        abs_total += float(np.abs(err).sum())
        count += err.size
    return sq_total / count, abs_total / count


def run_protocol(
    ds: TimeSeriesDataset,
    protocol: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset_name: str = "dataset",
    lookback: int = PROTOCOL_LOOKBACK,
    log: bool = False,
) -> EvalReport:
    """Train and evaluate one model per protocol horizon with a fixed lookback.

    A failing horizon is recorded in its row and does not stop the others.
    """
    if protocol not in PROTOCOL_HORIZONS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {sorted(PROTOCOL_HORIZONS)}")
    report = EvalReport(
        dataset=dataset_name,
        protocol=protocol,
        metadata={"lookback": lookback, "seed": train_config.seed},
    )
    for horizon in PROTOCOL_HORIZONS[protocol]:
        cfg = dataclasses.replace(model_config, lookback=lookback, horizon=horizon)
        try:
            tr = make_windows(ds, "train", lookback, horizon)
            va = make_windows(ds, "val", lookback, horizon)
            te = make_windows(ds, "test", lookback, horizon)
            model = Flatformer(cfg)
            train(model, tr, va, train_config, log=log)
            mse, mae = evaluate(model, te, batch_size=train_config.batch_size)
            report.rows.append(HorizonResult(horizon, mse, mae, len(te)))
        except Exception as exc:  # keep the sweep alive, mark the failure
            report.rows.append(HorizonResult(horizon, None, None, 0, error=str(exc)))
    return report
