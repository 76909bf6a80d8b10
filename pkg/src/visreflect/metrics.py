"""Visual attention weight, Hellinger distance, visual dependency, and decay curves."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence, Union

import numpy as np

from .errors import (
    AlignmentError,
    DegenerateAttention,
    DistributionError,
    EmptyInput,
    MissingDistribution,
    MissingStep,
)
from .trace import PROB_SUM_TOL, AttentionStep, AttentionTrace

# None: every recorded layer; "last": highest recorded layer id; otherwise explicit layer ids.
LayerSelection = Union[None, Literal["last"], Sequence[int]]

DEFAULT_BUCKET_SIZE = 25


def resolve_layers(trace: AttentionTrace, layers: LayerSelection = None) -> list[int]:
    """Map a layer selection to row indices into each step's ``attn``."""
    if layers is None:
        return list(range(trace.num_layers_recorded))
    if isinstance(layers, str):
        if layers != "last":
            raise ValueError(f"unknown layer selection {layers!r}")
        return [trace.num_layers_recorded - 1]
    layers = list(layers)
    if not layers:
        raise ValueError("layer selection must be non-empty")
    return sorted({trace.layer_index(layer) for layer in layers})


def step_attention(step: AttentionStep, layer_rows: Sequence[int]) -> float:
    """Attention from one response token to the visual tokens over the given layer rows.

    Sum of weights divided by the number of strictly positive weights, so
    zero entries (e.g. masked or pruned tokens) do not dilute the mean.
    """
    rows = np.asarray([step.attn[i] for i in layer_rows], dtype=np.float64)
    positive = np.count_nonzero(rows > 0.0)
    if positive == 0:
        raise DegenerateAttention(f"step n={step.n}: no positive attention to visual tokens")
    return float(rows.sum() / positive)


def attn_visual(trace: AttentionTrace, n: int, layers: LayerSelection = None) -> float:
    step = trace.step_at(n)
    if step is None:
        raise MissingStep(f"trace {trace.sample_id!r} has no step n={n}")
    return step_attention(step, resolve_layers(trace, layers))


def _check_distribution(x: np.ndarray, name: str) -> None:
    if np.any(x < 0.0):
        raise DistributionError(f"{name} has negative entries")
    if not np.all(np.isfinite(x)):
        raise DistributionError(f"{name} has non-finite entries")
    if abs(math.fsum(x.tolist()) - 1.0) > PROB_SUM_TOL:
        raise DistributionError(f"{name} does not sum to 1 within {PROB_SUM_TOL}")


def hellinger(p: Sequence[float], q: Sequence[float]) -> float:
    """Hellinger distance between two distributions on the same support, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise AlignmentError(f"distributions not aligned: shapes {p.shape} and {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    d = np.sqrt(np.sum((np.sqrt(p) - np.sqrt(q)) ** 2)) / math.sqrt(2.0)
    # sums may be off by up to 1e-6, which can push the value a hair past 1
    return float(min(d, 1.0))


def vdm(step: AttentionStep) -> float:
    """Visual dependency at one step: Hellinger distance between with/without-image predictions."""
    if step.dist_pair is None:
        raise MissingDistribution(f"step n={step.n} has no distribution pair")
    return hellinger(step.dist_pair.with_visual, step.dist_pair.without_visual)


@dataclass(frozen=True)
class Bootstrap:
    resamples: int = 1000
    level: float = 0.95

    def __post_init__(self) -> None:
        if self.resamples < 1:
            raise ValueError("resamples must be >= 1")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must be in (0, 1)")


@dataclass(frozen=True)
class DecayCurve:
    bucket_centers: tuple[float, ...]
    mean: tuple[float, ...]
    ci_low: tuple[float, ...]
    ci_high: tuple[float, ...]
    n_samples: tuple[int, ...]

    def __post_init__(self) -> None:
        k = len(self.bucket_centers)
        if not (len(self.mean) == len(self.ci_low) == len(self.ci_high) == len(self.n_samples) == k):
            raise ValueError("curve columns differ in length")
        if any(b <= a for a, b in zip(self.bucket_centers, self.bucket_centers[1:])):
            raise ValueError("bucket centers must be strictly increasing")
        for lo, m, hi in zip(self.ci_low, self.mean, self.ci_high):
            if not lo <= m <= hi:
                raise ValueError(f"confidence band [{lo}, {hi}] does not contain mean {m}")

    def __len__(self) -> int:
        return len(self.bucket_centers)


Metric = Literal["attn", "vdm"]


def _metric_values(trace: AttentionTrace, metric: Metric, layers: LayerSelection) -> list[tuple[int, float]]:
    if metric == "attn":
        rows = resolve_layers(trace, layers)
        return [(s.n, step_attention(s, rows)) for s in trace.steps]
    if metric == "vdm":
        return [(s.n, vdm(s)) for s in trace.steps if s.dist_pair is not None]
    raise ValueError(f"unknown metric {metric!r}; expected 'attn' or 'vdm'")


def decay_curve(
    traces: Iterable[AttentionTrace],
    metric: Metric = "attn",
    layers: LayerSelection = None,
    bucket_size: int = DEFAULT_BUCKET_SIZE,
    ci: Bootstrap | None = None,
    rng: np.random.Generator | int | None = 0,
) -> DecayCurve:
    """Aggregate a per-step metric by response position over many traces.

    Positions n fall into bucket ``(n - 1) // bucket_size``. The bucket mean is
    the plain mean of every contributing (trace, step) value. With ``ci`` set,
    the band is a percentile bootstrap that resamples traces within the bucket
    and recomputes the pooled mean, so the statistic matches the point mean.
    Floating error can leave the point mean a few ulps outside the band; the
    band is widened to include it.
    """
    if bucket_size < 1:
        raise ValueError("bucket_size must be >= 1")
    # bucket -> trace index -> [sum, count]
    buckets: dict[int, dict[int, list[float]]] = defaultdict(dict)
    values: dict[int, list[float]] = defaultdict(list)
    seen_traces = 0
    for t_idx, trace in enumerate(traces):
        seen_traces += 1
        for n, value in _metric_values(trace, metric, layers):
            b = (n - 1) // bucket_size
            acc = buckets[b].setdefault(t_idx, [0.0, 0])
            acc[0] += value
            acc[1] += 1
            values[b].append(value)
    if seen_traces == 0:
        raise EmptyInput("no traces given")
    if not values:
        if metric == "vdm":
            raise MissingDistribution("no step in any trace carries a distribution pair")
        raise EmptyInput("no trace contributes any step")

    if ci is not None and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    centers, means, lows, highs, counts = [], [], [], [], []
    for b in sorted(values):
        m = math.fsum(values[b]) / len(values[b])
        lo = hi = m
        per_sample = buckets[b]
        if ci is not None and len(per_sample) > 1:
            sums = np.array([acc[0] for acc in per_sample.values()])
            cnts = np.array([acc[1] for acc in per_sample.values()], dtype=np.float64)
            idx = rng.integers(0, len(sums), size=(ci.resamples, len(sums)))
            stats = sums[idx].sum(axis=1) / cnts[idx].sum(axis=1)
            tail = (1.0 - ci.level) / 2.0 * 100.0
            lo, hi = (float(x) for x in np.percentile(stats, [tail, 100.0 - tail]))
            lo, hi = min(lo, m), max(hi, m)
        centers.append(b * bucket_size + (bucket_size + 1) / 2.0)
        means.append(m)
        lows.append(lo)
        highs.append(hi)
        counts.append(len(per_sample))
    return DecayCurve(tuple(centers), tuple(means), tuple(lows), tuple(highs), tuple(counts))


CSV_HEADER = ("bucket_center", "mean", "ci_low", "ci_high", "n_samples")


def export_curve_csv(curve: DecayCurve) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    rows = sorted(zip(curve.bucket_centers, curve.mean, curve.ci_low, curve.ci_high, curve.n_samples))
    for center, m, lo, hi, count in rows:
        writer.writerow([repr(float(center)), repr(m), repr(lo), repr(hi), int(count)])
    return buf.getvalue().encode("utf-8")


def curve_summary(curve: DecayCurve) -> dict:
    first, last = curve.mean[0], curve.mean[-1]
    return {
        "buckets": len(curve),
        "first_bucket_center": curve.bucket_centers[0],
        "last_bucket_center": curve.bucket_centers[-1],
        "first_bucket_mean": first,
        "last_bucket_mean": last,
        "ratio": last / first if first != 0.0 else None,
    }
