"""Prediction error metrics and round-range summaries.

Predictions and truths are arrays of instances with shape ``(N, O)``; a
flat sequence is read as ``O = 1``.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np


class MetricError(ValueError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if p.shape != y.shape:
        raise MetricError(f"prediction/truth shape mismatch: {p.shape} vs {y.shape}")
    if len(p) == 0:
        raise MetricError("need at least one prediction instance")
    return p, y


def mse(pred, truth) -> float:
    """Mean over instances of each instance's mean squared step error."""
    p, y = _pair(pred, truth)
    return float(np.mean(np.mean((p - y) ** 2, axis=1)))


def mae(pred, truth) -> float:
    p, y = _pair(pred, truth)
    return float(np.mean(np.abs(p - y)))


def rmse(pred, truth) -> float:
    return float(np.sqrt(mse(pred, truth)))


def mre(pred, truth) -> float:
    """Mean relative error; truths of zero are excluded."""
    p, y = _pair(pred, truth)
    nz = y != 0
    if not nz.any():
        raise MetricError("relative error undefined when every truth is zero")
    return float(np.mean(np.abs(p[nz] - y[nz]) / np.abs(y[nz])))


# A device's series: round index -> (aligned predictions, aligned truths).
RoundSeries = Mapping[int, tuple[np.ndarray, np.ndarray]]


def pooled_mse(series: RoundSeries, first: int, last: int) -> float:
    """One MSE over every aligned instance from rounds ``first..last`` inclusive."""
    rounds = [j for j in range(first, last + 1) if j in series]
    if not rounds:
        raise MetricError(f"no rounds recorded in {first}..{last}")
    preds = np.concatenate([np.asarray(series[j][0], dtype=np.float64).reshape(len(series[j][0]), -1) for j in rounds])
    truths = np.concatenate([np.asarray(series[j][1], dtype=np.float64).reshape(len(series[j][1]), -1) for j in rounds])
    return mse(preds, truths)


def device_mse_table(per_device: Mapping[str, RoundSeries], first: int, last: int) -> dict[str, float]:
    return {d: pooled_mse(s, first, last) for d, s in per_device.items()}


def avg_device_mse(per_device: Mapping[str, RoundSeries], first: int, last: int) -> float:
    """Pool each device over the round range, then average across devices."""
    if not per_device:
        raise MetricError("no devices")
    table = device_mse_table(per_device, first, last)
    return float(np.mean(list(table.values())))


def default_ranges(n_rounds: int, first_size: int = 23, size: int = 24) -> list[tuple[int, int]]:
    """Partition rounds ``1..n_rounds`` into a short first range then fixed-size ranges.

    The final range holds whatever remains.
    """
    if n_rounds < 1:
        raise MetricError("need at least one round")
    ranges = [(1, min(first_size, n_rounds))]
    start = ranges[0][1] + 1
    while start <= n_rounds:
        end = min(start + size - 1, n_rounds)
        ranges.append((start, end))
        start = end + 1
    return ranges


def round_range_mse(series: RoundSeries, ranges: Sequence[tuple[int, int]]) -> list[float]:
    _check_tiling(ranges)
    return [pooled_mse(series, a, b) for a, b in ranges]


def _check_tiling(ranges: Sequence[tuple[int, int]]) -> None:
    for (a, b), (c, _) in zip(ranges, ranges[1:]):
        if c != b + 1:
            raise MetricError(f"ranges must tile without gap or overlap: ({a}, {b}) then starts at {c}")
    for a, b in ranges:
        if b < a:
            raise MetricError(f"empty range ({a}, {b})")
