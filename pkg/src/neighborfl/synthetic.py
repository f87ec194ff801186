"""Synthetic sensor networks for tests and demos."""

from __future__ import annotations

import math
from datetime import datetime, timedelta
from typing import Sequence

import numpy as np

from neighborfl.data import SensorStream
from neighborfl.geo import GpsCoord, SensorRegistry

# Device ids of the 26-sensor PEMS-BAY study region.
PEMS_BAY_STUDY_DEVICES = (
    "401816_S", "401817_N", "400911_N", "400863_N", "409526_N", "409529_S",
    "409525_N", "409528_S", "402364_N", "402365_S", "401541_N", "400971_S",
    "400122_N", "404759_S", "400394_S", "404753_N", "400045_N", "400001_N",
    "400922_S", "400479_S", "400030_S", "401560_N", "401440_S", "400965_N",
    "400109_S", "400760_N",
)

_KM_PER_DEG_LAT = 111.195


def timestamps(n: int, start: str = "2017-01-08 00:00:00", step_minutes: int = 5) -> list[str]:
    t0 = datetime.fromisoformat(start)
    return [(t0 + timedelta(minutes=step_minutes * k)).strftime("%Y-%m-%d %H:%M:%S") for k in range(n)]


def _offset(lat: float, lon: float, dx_km: float, dy_km: float) -> GpsCoord:
    dlat = dy_km / _KM_PER_DEG_LAT
    dlon = dx_km / (_KM_PER_DEG_LAT * math.cos(math.radians(lat)))
    return GpsCoord(lat + dlat, lon + dlon)


def clustered_network(
    devices_per_cluster: Sequence[int] = (6, 6),
    rows: int = 400,
    seed: int = 0,
    spread_km: float = 0.6,
    separation_km: float = 25.0,
    noise: float = 2.0,
    origin: tuple[float, float] = (37.33, -121.90),
) -> tuple[SensorRegistry, SensorStream]:
    """Spatial clusters of sensors, each cluster with its own speed regime.

    A regime is a daily-looking sinusoid (distinct mean, amplitude, period
    and phase per cluster) plus independent Gaussian noise per device.
    Clusters sit ``separation_km`` apart on an east-west line; devices are
    scattered within ``spread_km`` of their cluster center.
    """
    rng = np.random.default_rng(seed)
    regimes = [
        (65.0, 8.0, 96.0, 0.0),
        (35.0, 14.0, 60.0, 1.3),
        (50.0, 4.0, 144.0, 2.1),
        (25.0, 10.0, 40.0, 0.4),
    ]
    t = np.arange(rows, dtype=np.float64)
    entries = []
    values = {}
    for c, count in enumerate(devices_per_cluster):
        mean, amp, period, phase = regimes[c % len(regimes)]
        center_x = c * separation_km
        for k in range(count):
            device_id = f"c{c}_d{k:02d}"
            angle = rng.uniform(0, 2 * math.pi)
            r = spread_km * math.sqrt(rng.uniform())
            entries.append((device_id, _offset(origin[0], origin[1], center_x + r * math.cos(angle), r * math.sin(angle))))
            local_amp = amp * rng.uniform(0.9, 1.1)
            signal = mean + local_amp * np.sin(2 * math.pi * t / period + phase + rng.uniform(-0.1, 0.1))
            values[device_id] = signal + rng.normal(0.0, noise, size=rows)
    return SensorRegistry(entries), SensorStream(timestamps(rows), values)


def pems_shaped_network(rows: int, seed: int = 0, device_ids: Sequence[str] = PEMS_BAY_STUDY_DEVICES):
    """Stand-in metadata and speed streams carrying the study-region device ids.

    Coordinates are synthetic (a few km of highway), not the real sensor
    locations.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(rows, dtype=np.float64)
    entries = []
    values = {}
    for k, device_id in enumerate(device_ids):
        along = 0.45 * k
        lane = 0.05 if device_id.endswith("_S") else -0.05
        entries.append((device_id, _offset(37.33, -121.90, lane, along)))
        daily = 62.0 - 12.0 * np.clip(np.sin(2 * math.pi * (t - 90 + 4 * k) / 288.0), 0, None) ** 2
        values[device_id] = daily + rng.normal(0.0, 1.5, size=rows)
    return SensorRegistry(entries), SensorStream(timestamps(rows), values)
