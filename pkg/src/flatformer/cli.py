"""Command-line entry point.

Subcommands: train, evaluate, forecast, analyze-corr, analyze-attn,
bench-mem, grad-check. Every run writes its artifacts under --out-dir next to
a manifest.json recording the resolved config, its hash, the seeds and the
library versions. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from . import __version__
from .analysis import attn_weight_histogram, corr_heatmap, cross_pair_fraction, multiplied_attention
from .benchmark import ablation_table, bench_ablation, count_attention_memory, measured_attention_memory
from .data import (
    DataError,
    TimeSeriesDataset,
    load_csv_dataset,
    make_windows,
    split_dataset,
    standardize_dataset,
)
from .evaluation import EvalReport, evaluate, run_protocol
from .model import Flatformer, ModelConfig, load_checkpoint, save_checkpoint
from .seeding import derive_seed
from .training import TrainConfig, grad_check, train


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a run needs; serializes losslessly to/from JSON."""

    data: str | None = None
    date_column: str | None = "date"
    split: str = "ratio:0.7,0.1"
    standardize: bool = True
    lookback: int = 96
    horizon: int = 96
    patch_len: int = 16
    stride: int = 8
    pad_last: bool = True
    d_model: int = 128
    heads: int = 8
    dispatchers: int = 10
    layers: int = 2
    d_ff: int | None = None
    dropout: float = 0.1
    attention_mode: str = "dispatcher"
    within_variate_only: bool = False
    instance_norm: bool = True
    dtype: str = "float64"
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seeds: tuple[int, ...] = (0,)
    figures: bool = True

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if "seeds" in d:
            d = dict(d, seeds=tuple(int(s) for s in d["seeds"]))
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def model_config(self, n_variates: int, capture_attention: bool = False) -> ModelConfig:
        return ModelConfig(
            n_variates=n_variates,
            lookback=self.lookback,
            horizon=self.horizon,
            patch_len=self.patch_len,
            stride=self.stride,
            pad_last=self.pad_last,
            d_model=self.d_model,
            n_heads=self.heads,
            n_dispatchers=self.dispatchers,
            n_layers=self.layers,
            d_ff=self.d_ff,
            dropout=self.dropout,
            attention_mode=self.attention_mode,
            within_variate_only=self.within_variate_only,
            capture_attention=capture_attention,
            instance_norm=self.instance_norm,
            dtype=self.dtype,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=seed,
        )


# ---------------------------------------------------------------------------
# argument plumbing

_OVERRIDE_FLAGS: dict[str, dict] = {
    "data": dict(type=str, help="dataset CSV path"),
    "date_column": dict(type=str, help="name of the date column (metadata only)"),
    "split": dict(type=str, help="ratio:R_TRAIN,R_VAL or explicit:T0,T1,T2,T3"),
    "lookback": dict(type=int, help="input window length L (default 96)"),
    "horizon": dict(type=int, help="prediction length S"),
    "patch_len": dict(type=int, help="patch length l"),
    "stride": dict(type=int, help="patch stride s"),
    "d_model": dict(type=int, help="token embedding width d"),
    "heads": dict(type=int, help="attention heads h (must divide d_model)"),
    "dispatchers": dict(type=int, help="dispatcher count k"),
    "layers": dict(type=int, help="encoder block count"),
    "d_ff": dict(type=int, help="FFN hidden width (default 2*d_model)"),
    "dropout": dict(type=float, help="dropout rate"),
    "attention_mode": dict(type=str, choices=["dispatcher", "full"], help="attention path"),
    "dtype": dict(type=str, choices=["float32", "float64"], help="model precision"),
    "lr": dict(type=float, help="Adam learning rate"),
    "batch_size": dict(type=int, help="mini-batch size"),
    "max_epochs": dict(type=int, help="epoch cap (default 100)"),
    "patience": dict(type=int, help="early-stop patience in epochs (default 10)"),
}

_BOOL_FLAGS = ["pad_last", "instance_norm", "standardize", "figures", "within_variate_only"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 for usage errors, not argparse's 2
        raise UsageError(message)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=str, default=None, help="JSON config file; flags override it")
    sub.add_argument("--out-dir", type=str, default=None, help="output directory (default runs/<command>)")
    sub.add_argument("--seed", type=int, default=None, help="single run seed")
    sub.add_argument("--seeds", type=str, default=None, help="comma-separated seed list")
    for name, spec in _OVERRIDE_FLAGS.items():
        sub.add_argument(f"--{name.replace('_', '-')}", default=None, dest=name, **spec)
    for name in _BOOL_FLAGS:
        flag = name.replace("_", "-")
        group = sub.add_mutually_exclusive_group()
        group.add_argument(f"--{flag}", dest=name, action="store_true", default=None)
        group.add_argument(f"--no-{flag}", dest=name, action="store_false", default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="flatformer", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[], help="train one model per seed and checkpoint the best")
    _add_common(p)

    p = sub.add_parser("evaluate", help="test metrics for a checkpoint, or a full protocol run")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, default=None, help="evaluate this checkpoint on the test split")
    p.add_argument("--protocol", type=str, choices=["long_term", "short_term"], default=None,
                   help="train+evaluate one model per protocol horizon")

    p = sub.add_parser("forecast", help="predict the horizon following an input window CSV")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--input", type=str, required=True, help="CSV with at least L rows")

    p = sub.add_parser("analyze-corr", help="cross-variate patch correlation heatmap")
    _add_common(p)
    p.add_argument("--variates", type=str, default="0,1", help="variate pair i,j")

    p = sub.add_parser("analyze-attn", help="attention weight distributions and pair fractions")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--eval-split", type=str, default="test", choices=["train", "val", "test"])
    p.add_argument("--max-windows", type=int, default=64, help="windows to capture attention from")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--quantiles", type=str, default="1.0,0.05,0.005")

    p = sub.add_parser("bench-mem", help="attention memory accounting and dispatcher ablation")
    _add_common(p)
    p.add_argument("--n-variates", type=int, default=None, help="variates for counts-only mode (no --data)")
    p.add_argument("--bench-epochs", type=int, default=2, help="training epochs per ablation arm")
    p.add_argument("--sweep-dispatchers", type=str, default=None, help="comma list of k values to sweep")

    p = sub.add_parser("grad-check", help="finite-difference gradient check on the built-in tiny model")
    _add_common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        base = json.loads(path.read_text())
    cfg = RunConfig.from_dict(base)
    overrides = {}
    for name in list(_OVERRIDE_FLAGS) + _BOOL_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if args.seeds is not None:
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    elif args.seed is not None:
        overrides["seeds"] = (args.seed,)
    return dataclasses.replace(cfg, **overrides)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path("runs") / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": json.loads(cfg.to_json()),
        "config_hash": cfg.config_hash(),
        "seeds": list(cfg.seeds),
        "versions": {
            "flatformer": __version__,
            "python": sys.version.split()[0],
            "torch": torch.__version__,
            "numpy": np.__version__,
            "pandas": pd.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _parse_split(spec: str) -> dict:
    kind, _, rest = spec.partition(":")
    try:
        if kind == "ratio":
            r_train, r_val = (float(v) for v in rest.split(","))
            return {"ratio": (r_train, r_val)}
        if kind == "explicit":
            return {"explicit": tuple(int(v) for v in rest.split(","))}
    except ValueError as exc:
        raise UsageError(f"bad split spec {spec!r}: {exc}") from None
    raise UsageError(f"bad split spec {spec!r}; use ratio:R1,R2 or explicit:T0,T1,T2,T3")


def _load_data(cfg: RunConfig) -> TimeSeriesDataset:
    if not cfg.data:
        raise UsageError("--data (or a config file with a data path) is required")
    ds = load_csv_dataset(cfg.data, date_column=cfg.date_column)
    ds = split_dataset(ds, **_parse_split(cfg.split))
    if cfg.standardize:
        ds, _ = standardize_dataset(ds)
    return ds


def _seeded_model(cfg: RunConfig, n_variates: int, seed: int, capture: bool = False) -> Flatformer:
    torch.manual_seed(derive_seed(seed, "init"))
    return Flatformer(cfg.model_config(n_variates, capture_attention=capture))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    cfg.train_config(cfg.seeds[0])  # validate before loading anything
    out = _out_dir(args)
    ds = _load_data(cfg)
    tr = make_windows(ds, "train", cfg.lookback, cfg.horizon)
    va = make_windows(ds, "val", cfg.lookback, cfg.horizon)
    te = make_windows(ds, "test", cfg.lookback, cfg.horizon)

    per_seed = {}
    for seed in cfg.seeds:
        model = _seeded_model(cfg, ds.n_variates, seed)
        history = train(model, tr, va, cfg.train_config(seed), log=True)
        ckpt = out / f"checkpoint-seed{seed}.pt"
        save_checkpoint(model, ckpt)
        with (out / f"history-seed{seed}.jsonl").open("w") as fh:
            for row in history.to_jsonl_rows():
                fh.write(json.dumps(row) + "\n")
        mse, mae = evaluate(model, te, batch_size=cfg.batch_size)
        per_seed[seed] = {
            "mse": mse,
            "mae": mae,
            "best_epoch": history.best_epoch + 1,
            "stopped_early": history.stopped_early,
            "checkpoint": str(ckpt),
        }
        print(f"seed {seed}: test MSE {mse:.4f}  MAE {mae:.4f}  checkpoint {ckpt}")
        if cfg.figures:
            from .plotting import save_train_history

            save_train_history(history, out / f"history-seed{seed}.png")

    metrics = {
        "per_seed": {str(k): v for k, v in per_seed.items()},
        "mean": {
            "mse": float(np.mean([v["mse"] for v in per_seed.values()])),
            "mae": float(np.mean([v["mae"] for v in per_seed.values()])),
        },
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    _write_manifest(out, "train", cfg)
    print(f"mean test MSE {metrics['mean']['mse']:.4f}  MAE {metrics['mean']['mae']:.4f}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    if (args.checkpoint is None) == (args.protocol is None):
        raise UsageError("evaluate needs exactly one of --checkpoint or --protocol")
    out = _out_dir(args)

    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        mc = model.config
        ds = _load_data(cfg)
        if ds.n_variates != mc.n_variates:
            raise DataError(
                f"dataset has {ds.n_variates} variates but checkpoint expects {mc.n_variates}"
            )
        windows = make_windows(ds, "test", mc.lookback, mc.horizon)
        mse, mae = evaluate(model, windows, batch_size=cfg.batch_size)
        report = {
            "checkpoint": args.checkpoint,
            "horizon": mc.horizon,
            "n_windows": len(windows),
            "mse": mse,
            "mae": mae,
        }
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
        print(f"test MSE {mse:.4f}  MAE {mae:.4f}  ({len(windows)} windows)")
        _write_manifest(out, "evaluate", cfg, {"checkpoint": args.checkpoint})
        return 0

    ds = _load_data(cfg)
    summaries = []
    for seed in cfg.seeds:
        torch.manual_seed(derive_seed(seed, "init"))
        report = run_protocol(
            ds,
            args.protocol,
            cfg.model_config(ds.n_variates),
            cfg.train_config(seed),
            dataset_name=Path(cfg.data).stem,
            lookback=cfg.lookback,
        )
        (out / f"report-seed{seed}.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        (out / f"report-seed{seed}.txt").write_text(report.to_table() + "\n")
        print(f"--- seed {seed}")
        print(report.to_table())
        if cfg.figures:
            from .plotting import save_eval_report

            save_eval_report(report, out / f"report-seed{seed}.png")
        summaries.append(report)
    if len(summaries) > 1:
        avgs = [r.average() for r in summaries if r.average() is not None]
        mean = {
            "mse": float(np.mean([a[0] for a in avgs])),
            "mae": float(np.mean([a[1] for a in avgs])),
        }
        (out / "summary.json").write_text(json.dumps({"mean_over_seeds": mean}, indent=2) + "\n")
    _write_manifest(out, "evaluate", cfg, {"protocol": args.protocol})
    return 0


def cmd_forecast(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    model = load_checkpoint(args.checkpoint)
    mc = model.config
    ds = load_csv_dataset(args.input, date_column=cfg.date_column)
    if ds.n_variates != mc.n_variates:
        raise DataError(f"input has {ds.n_variates} variates, checkpoint expects {mc.n_variates}")
    if ds.n_steps < mc.lookback:
        raise DataError(f"input has {ds.n_steps} rows, need at least lookback={mc.lookback}")
    x = ds.values[:, -mc.lookback :].copy()
    with torch.no_grad():
        pred, _ = model(torch.as_tensor(x, dtype=mc.torch_dtype).unsqueeze(0))
    forecast = pred[0].numpy()
    frame = pd.DataFrame(forecast.T, columns=ds.variate_names)
    csv_path = out / "forecast.csv"
    frame.to_csv(csv_path, index_label="step")
    print(f"wrote {mc.n_variates} x {mc.horizon} forecast to {csv_path}")
    if cfg.figures:
        from .plotting import save_forecast

        save_forecast(x, forecast, ds.variate_names, out / "forecast.png")
    _write_manifest(out, "forecast", cfg, {"checkpoint": args.checkpoint, "input": args.input})
    return 0


def cmd_analyze_corr(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    try:
        variate_i, variate_j = (int(v) for v in args.variates.split(","))
    except ValueError:
        raise UsageError(f"--variates must be i,j, got {args.variates!r}") from None
    if not cfg.data:
        raise UsageError("--data is required")
    ds = load_csv_dataset(cfg.data, date_column=cfg.date_column)
    hm = corr_heatmap(ds, variate_i, variate_j, patch_len=cfg.patch_len)
    frame = pd.DataFrame(
        hm.values,
        index=pd.Index(range(hm.values.shape[0]), name=f"variate{variate_i}_patch"),
        columns=[str(b) for b in range(hm.values.shape[1])],
    )
    frame.to_csv(out / "heatmap.csv")
    print(f"wrote {hm.values.shape[0]}x{hm.values.shape[1]} heatmap to {out / 'heatmap.csv'}")
    if cfg.figures:
        from .plotting import save_corr_heatmap

        save_corr_heatmap(hm, out / "heatmap.png")
    _write_manifest(out, "analyze-corr", cfg, {"variates": [variate_i, variate_j]})
    return 0


def cmd_analyze_attn(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    quantiles = [float(q) for q in args.quantiles.split(",")]
    model = load_checkpoint(args.checkpoint)
    mc = model.config
    ds = _load_data(cfg)
    windows = make_windows(ds, args.eval_split, mc.lookback, mc.horizon)
    take = min(args.max_windows, len(windows))
    xs, _ = windows.gather(range(take))

    model.eval()
    with torch.no_grad():
        _, records = model(torch.as_tensor(xs, dtype=mc.torch_dtype), capture_attention=True)
    if not records:
        raise RuntimeError("no attention records captured")

    # per-layer multiplied (or direct) token-token matrices, averaged over windows
    layer_maps: dict[int, np.ndarray] = {}
    for rec in records:
        if rec.full is not None:
            stacked = rec.full
        else:
            stacked = np.stack(
                [multiplied_attention(rec.dist[b], rec.agg[b]) for b in range(take)]
            )
        layer_maps[rec.layer] = stacked.mean(axis=0)

    top = max(float(m.max()) for m in layer_maps.values())
    hists = [
        attn_weight_histogram(m, n_bins=args.bins, layer=layer, value_range=(0.0, top))
        for layer, m in sorted(layer_maps.items())
    ]
    rows = []
    for h in hists:
        for left, right, count in zip(h.bin_edges[:-1], h.bin_edges[1:], h.counts):
            rows.append({"bin_left": left, "bin_right": right, "count": int(count), "layer": h.layer})
    pd.DataFrame(rows).to_csv(out / "histogram.csv", index=False)

    last_layer = max(layer_maps)
    fractions = cross_pair_fraction(layer_maps[last_layer], quantiles, mc.n_variates, mc.n_patches)
    (out / "pair_fractions.json").write_text(json.dumps(fractions.to_dict(), indent=2) + "\n")
    print(f"cross-variate cross-time fraction, all pairs: {100 * fractions.fractions[quantiles[0]]:.2f}%")
    print(f"structural baseline: {100 * fractions.structural_baseline:.2f}%")

    if cfg.figures:
        from .plotting import save_pair_fractions, save_weight_histograms

        save_weight_histograms(hists, out / "histograms.png")
        save_pair_fractions(fractions, out / "pair_fractions.png")
    _write_manifest(
        out, "analyze-attn", cfg,
        {"checkpoint": args.checkpoint, "windows": take, "split": args.eval_split},
    )
    return 0


def cmd_bench_mem(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    reports = []
    if cfg.data:
        ds = _load_data(cfg)
        reports = bench_ablation(
            ds,
            cfg.model_config(ds.n_variates),
            cfg.train_config(cfg.seeds[0]),
            train_epochs=args.bench_epochs,
        )
    else:
        n_variates = args.n_variates
        if n_variates is None:
            raise UsageError("bench-mem needs --data or --n-variates")
        for mode in ("dispatcher", "full"):
            mc = dataclasses.replace(
                cfg.model_config(n_variates), attention_mode=mode, within_variate_only=False
            )
            reports.append(measured_attention_memory(mc, batch_size=cfg.batch_size))

    sweep = None
    if args.sweep_dispatchers:
        sweep = []
        base_n = reports[0].n_variates
        for k in (int(v) for v in args.sweep_dispatchers.split(",")):
            mc = dataclasses.replace(cfg.model_config(base_n), n_dispatchers=k)
            sweep.append(count_attention_memory(mc, cfg.batch_size).to_dict())

    payload = {"ablation": [r.to_dict() for r in reports], "dispatcher_sweep": sweep}
    (out / "memory.json").write_text(json.dumps(payload, indent=2) + "\n")
    table = ablation_table(reports)
    (out / "memory.txt").write_text(table + "\n")
    print(table)
    if cfg.figures:
        from .plotting import save_memory_report

        save_memory_report(reports, out / "memory.png")
    _write_manifest(out, "bench-mem", cfg)
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    # built-in tiny double-precision config: N=3, p=4, d=8, h=2, k=2, 1 layer
    mc = ModelConfig(
        n_variates=3, lookback=16, horizon=4, patch_len=4, stride=4,
        d_model=8, n_heads=2, n_dispatchers=2, n_layers=1, d_ff=16,
        dropout=0.0, attention_mode=cfg.attention_mode, dtype="float64",
    )
    seed = cfg.seeds[0]
    torch.manual_seed(derive_seed(seed, "init"))
    model = Flatformer(mc)
    gen = torch.Generator().manual_seed(derive_seed(seed, "gradcheck-data"))
    x = torch.randn(2, 3, 16, dtype=torch.float64, generator=gen)
    y = torch.randn(2, 3, 4, dtype=torch.float64, generator=gen)
    result = grad_check(model, x, y, step=args.step)
    report = {
        "max_rel_error": result.max_rel_error,
        "worst_param": result.worst_param,
        "tolerance": args.tolerance,
        "passed": result.max_rel_error < args.tolerance,
        "per_param": result.per_param,
    }
    (out / "grad_check.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"max relative error {result.max_rel_error:.3e} on {result.worst_param} "
          f"(tolerance {args.tolerance:g})")
    _write_manifest(out, "grad-check", cfg)
    return 0 if report["passed"] else 2


_COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "analyze-corr": cmd_analyze_corr,
    "analyze-attn": cmd_analyze_attn,
    "bench-mem": cmd_bench_mem,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
