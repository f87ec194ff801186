"""Per-device streaming data window and sensor stream ingestion."""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class StreamError(ValueError):
    """Raised for malformed stream files or exhausted streams."""


class DataWindow:
    """Chronological buffer of readings capped at ``max_size`` points.

    The cap is enforced by :meth:`trim`, not on every append, so a round can
    collect all of its points before the oldest ones are dropped.
    """

    def __init__(self, max_size: int, points: Iterable[float] = ()):
        if max_size < 1:
            raise ValueError("max_size must be >= 1")
        self.max_size = max_size
        self._points: deque[float] = deque(float(p) for p in points)

    def __len__(self) -> int:
        return len(self._points)

    def __repr__(self) -> str:
        return f"DataWindow(len={len(self)}, max_size={self.max_size})"

    def append(self, value: float) -> None:
        self._points.append(float(value))

    def trim(self) -> int:
        """Drop the oldest points beyond ``max_size``; returns how many."""
        excess = len(self._points) - self.max_size
        for _ in range(max(0, excess)):
            self._points.popleft()
        return max(0, excess)

    def to_array(self) -> np.ndarray:
        return np.fromiter(self._points, dtype=np.float64, count=len(self._points))

    def copy(self) -> DataWindow:
        return DataWindow(self.max_size, self._points)


def update_dataset(window: DataWindow, incoming: Sequence[float]) -> DataWindow:
    """Append a round's readings in order, then trim to the retention cap."""
    if len(incoming) < 1:
        raise ValueError("a round must collect at least one reading")
    for value in incoming:
        window.append(value)
    window.trim()
    return window


def num_instances(window_len: int, n_in: int, n_out: int) -> int:
    if n_in < 1 or n_out < 1:
        raise ValueError("input and output lengths must be >= 1")
    return max(0, window_len - n_in - n_out + 1)


@dataclass(frozen=True)
class TrainingInstance:
    x: np.ndarray
    y: np.ndarray


def extract_instance(points: np.ndarray | DataWindow, k: int, n_in: int, n_out: int) -> TrainingInstance:
    """The ``k``-th (1-based) input/target pair of a window."""
    arr = points.to_array() if isinstance(points, DataWindow) else np.asarray(points, dtype=np.float64)
    count = num_instances(len(arr), n_in, n_out)
    if not 1 <= k <= count:
        raise IndexError(f"instance {k} out of range 1..{count}")
    start = k - 1
    return TrainingInstance(arr[start:start + n_in].copy(), arr[start + n_in:start + n_in + n_out].copy())


def instance_matrix(points: np.ndarray, n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """All instances of ``points`` stacked row-wise, in window order."""
    count = num_instances(len(points), n_in, n_out)
    if count == 0:
        return np.empty((0, n_in)), np.empty((0, n_out))
    xs = np.lib.stride_tricks.sliding_window_view(points, n_in + n_out)[:count]
    return np.ascontiguousarray(xs[:, :n_in]), np.ascontiguousarray(xs[:, n_in:])


def extract_latest(window: DataWindow | Sequence[float], n: int) -> np.ndarray:
    arr = window.to_array() if isinstance(window, DataWindow) else np.asarray(window, dtype=np.float64)
    if len(arr) < n:
        raise StreamError(f"need {n} readings, window holds {len(arr)}")
    return arr[len(arr) - n:].copy()


@dataclass(frozen=True)
class MinMaxScaler:
    """Global affine map of readings onto [0, 1]."""

    low: float = 0.0
    high: float = 100.0

    def __post_init__(self) -> None:
        if not self.high > self.low:
            raise ValueError("scaler requires high > low")

    def transform(self, values):
        return (np.asarray(values, dtype=np.float64) - self.low) / (self.high - self.low)

    def inverse(self, values):
        return np.asarray(values, dtype=np.float64) * (self.high - self.low) + self.low


@dataclass
class SensorStream:
    """Time-aligned readings for a set of devices."""

    timestamps: list[str]
    values: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def device_ids(self) -> list[str]:
        return list(self.values)

    def select(self, device_ids: Sequence[str]) -> SensorStream:
        missing = [d for d in device_ids if d not in self.values]
        if missing:
            raise StreamError(f"stream has no column for device(s): {', '.join(missing)}")
        return SensorStream(list(self.timestamps), {d: self.values[d] for d in device_ids})

    def rows_needed(self, rounds: int, tau_first: int, tau_rest: int) -> int:
        return tau_first + (rounds - 1) * tau_rest


def read_stream(path: str | Path, device_ids: Sequence[str] | None = None) -> SensorStream:
    """Read a ``timestamp,<device>,...`` CSV.

    Rows with a missing or non-finite reading in any selected column are
    dropped (with a warning) so every device sees the same time axis.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StreamError(f"{path}: empty stream file") from None
        if not header or header[0].strip() != "timestamp":
            raise StreamError(f"{path}: first column must be 'timestamp'")
        columns = [h.strip() for h in header[1:]]
        wanted = list(device_ids) if device_ids is not None else columns
        missing = [d for d in wanted if d not in columns]
        if missing:
            raise StreamError(f"{path}: stream has no column for device(s): {', '.join(missing)}")
        col_idx = [columns.index(d) + 1 for d in wanted]

        timestamps: list[str] = []
        rows: list[list[float]] = []
        dropped = 0
        for line_no, raw in enumerate(reader, start=2):
            if not raw:
                continue
            try:
                vals = [float(raw[i]) for i in col_idx]
            except (ValueError, IndexError):
                vals = None
            if vals is None or not all(math.isfinite(v) for v in vals):
                dropped += 1
                log.warning("%s:%d: rejected row with missing/non-numeric reading", path, line_no)
                continue
            timestamps.append(raw[0])
            rows.append(vals)
    if dropped:
        log.warning("%s: %d row(s) rejected at ingestion", path, dropped)
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), len(wanted))
    return SensorStream(timestamps, {d: matrix[:, i].copy() for i, d in enumerate(wanted)})


def write_stream(path: str | Path, stream: SensorStream) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", *stream.device_ids])
        cols = [stream.values[d] for d in stream.device_ids]
        for t, ts in enumerate(stream.timestamps):
            writer.writerow([ts, *(repr(float(c[t])) for c in cols)])
