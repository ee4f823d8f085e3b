"""Diagnostic instruments: cross-variate correlation maps and attention stats.

The correlation between a length-L segment of variate i starting at t and one
of variate j starting at t' is the population Pearson coefficient

    R = (1/L) * sum_k [(a_k - mu_a)/sigma_a] * [(b_k - mu_b)/sigma_b]

so R(a, a) = 1 exactly for any non-constant segment. Attention instruments
operate on the dispatcher maps: multiplying the token->dispatcher and
dispatcher->token matrices yields an (N*p) x (N*p) row-stochastic surrogate
for direct token-pair attention, from which weight histograms and the
fraction of cross-variate cross-time pairs are computed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TimeSeriesDataset


class ConstantSegmentError(ValueError):
    """Correlation is undefined for a zero-variance segment."""


ROW_SUM_TOLERANCE = 1e-4


def cross_corr(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two equal-length segments, in [-1, 1].

    Raises :class:`ConstantSegmentError` instead of returning NaN when either
    segment has zero variance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"segments must be equal-length 1-D, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError(f"segments must have length >= 2, got {a.size}")
    sa = a.std()
    sb = b.std()
    if sa == 0.0 or sb == 0.0:
        raise ConstantSegmentError("correlation undefined for a constant segment")
    r = float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
    return min(1.0, max(-1.0, r))


@dataclass
class CorrHeatmap:
    """Patch-by-patch correlation matrix for one variate pair.

    ``values[a, b]`` correlates patch a of variate i with patch b of variate
    j; patches are non-overlapping (stride = patch_len). Entries involving a
    constant patch are NaN, meaning "undefined", never 0.
    """

    values: np.ndarray
    variate_i: int
    variate_j: int
    patch_len: int
    patch_starts: np.ndarray


def corr_heatmap(
    ds: TimeSeriesDataset, variate_i: int, variate_j: int, patch_len: int
) -> CorrHeatmap:
    """Correlate every non-overlapping patch pair of two variates."""
    n = ds.n_variates
    for v in (variate_i, variate_j):
        if not 0 <= v < n:
            raise ValueError(f"variate index {v} outside [0, {n})")
    if patch_len < 2:
        raise ValueError(f"patch_len must be >= 2, got {patch_len}")
    n_patches = ds.n_steps // patch_len
    if n_patches < 1:
        raise ValueError(f"series too short for one patch of {patch_len} steps")
    starts = np.arange(n_patches) * patch_len
    values = np.full((n_patches, n_patches), np.nan)
    segs_i = [ds.values[variate_i, s : s + patch_len] for s in starts]
    segs_j = [ds.values[variate_j, s : s + patch_len] for s in starts]
    for a in range(n_patches):
        for b in range(n_patches):
            try:
                values[a, b] = cross_corr(segs_i[a], segs_j[b])
            except ConstantSegmentError:
                pass  # stays NaN: undefined, not zero
    return CorrHeatmap(values, variate_i, variate_j, patch_len, starts)


def _check_row_stochastic(m: np.ndarray, name: str) -> None:
    if np.any(m < -ROW_SUM_TOLERANCE):
        raise ValueError(f"{name} has negative entries")
    bad = np.abs(m.sum(axis=-1) - 1.0) > ROW_SUM_TOLERANCE
    if bad.any():
        raise ValueError(f"{name} row {int(np.argmax(bad))} does not sum to 1")


def multiplied_attention(dist: np.ndarray, agg: np.ndarray) -> np.ndarray:
    """Token->token surrogate: dist [(N*p) x k] @ agg [k x (N*p)].

    Both inputs must be row-stochastic; the product then is too.
    """
    _check_row_stochastic(dist, "dist")
    _check_row_stochastic(agg, "agg")
    if dist.shape[1] != agg.shape[0]:
        raise ValueError(f"inner dims mismatch: {dist.shape} @ {agg.shape}")
    return dist @ agg


@dataclass
class WeightHistogram:
    bin_edges: np.ndarray  # [n_bins + 1]
    counts: np.ndarray  # [n_bins]
    layer: int


def attn_weight_histogram(
    m: np.ndarray, n_bins: int, layer: int = 0, value_range: tuple[float, float] | None = None
) -> WeightHistogram:
    """Histogram of all entries of an attention matrix.

    Pass the same ``value_range`` for several layers to make their bins
    comparable (first vs last layer distributions).
    """
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    counts, edges = np.histogram(np.asarray(m).ravel(), bins=n_bins, range=value_range)
    return WeightHistogram(bin_edges=edges, counts=counts, layer=layer)


@dataclass
class PairFractionReport:
    """Share of high-attention token pairs that cross both variate and time.

    For each quantile q, the top q fraction of matrix entries by weight is
    selected (threshold ties included) and the fraction whose (row, col)
    tokens decode to a different variate AND a different patch index is
    reported. The structural baseline is that fraction over all pairs,
    exactly (1 - 1/N) * (1 - 1/p).
    """

    n_variates: int
    n_patches: int
    quantiles: list[float]
    fractions: dict[float, float] = field(default_factory=dict)
    selected_counts: dict[float, int] = field(default_factory=dict)

    @property
    def structural_baseline(self) -> float:
        return (1.0 - 1.0 / self.n_variates) * (1.0 - 1.0 / self.n_patches)

    def to_dict(self) -> dict:
        return {
            "n_variates": self.n_variates,
            "n_patches": self.n_patches,
            "structural_baseline": self.structural_baseline,
            "thresholds": [
                {
                    "quantile": q,
                    "cross_fraction": self.fractions[q],
                    "selected_pairs": self.selected_counts[q],
                }
                for q in self.quantiles
            ],
        }


def cross_pair_fraction(
    m: np.ndarray, top_quantiles: list[float], n_variates: int, n_patches: int
) -> PairFractionReport:
    """Fraction of top-weighted token pairs with distinct variate and patch."""
    n_tokens = n_variates * n_patches
    m = np.asarray(m)
    if m.shape != (n_tokens, n_tokens):
        raise ValueError(f"expected ({n_tokens}, {n_tokens}) matrix, got {m.shape}")
    token_variate = np.arange(n_tokens) // n_patches
    token_patch = np.arange(n_tokens) % n_patches
    is_cross = (token_variate[:, None] != token_variate[None, :]) & (
        token_patch[:, None] != token_patch[None, :]
    )

    flat = m.ravel()
    cross_flat = is_cross.ravel()
    order = np.argsort(flat)[::-1]
    sorted_w = flat[order]
    report = PairFractionReport(n_variates, n_patches, list(top_quantiles))
    for q in top_quantiles:
        if not 0 < q <= 1:
            raise ValueError(f"quantile must lie in (0, 1], got {q}")
        take = max(1, int(np.ceil(q * flat.size)))
        threshold = sorted_w[take - 1]
        selected = flat >= threshold  # includes all entries tied at the threshold
        count = int(selected.sum())
        report.fractions[q] = float(cross_flat[selected].sum() / count)
        report.selected_counts[q] = count
    return report
