"""Sensor registry, great-circle distances and candidate neighbor maps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

# Mean Earth radius (IUGG), kilometers.
EARTH_RADIUS_KM = 6371.0088
KM_PER_MILE = 1.609344


class RegistryError(ValueError):
    """Raised for malformed sensor metadata or unknown device ids."""


@dataclass(frozen=True)
class GpsCoord:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


def haversine_distance(a: GpsCoord, b: GpsCoord) -> float:
    """Great-circle distance in kilometers between two coordinates.

    The squared sines and the cosine product are both symmetric in (a, b),
    so swapping the arguments yields a bitwise-identical result.
    """
    phi_a = math.radians(a.lat)
    phi_b = math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + (math.cos(phi_a) * math.cos(phi_b)) * math.sin(dlmb / 2) ** 2
    h = min(1.0, max(0.0, h))
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))


class SensorRegistry:
    """Immutable, insertion-ordered map of device id to coordinate."""

    def __init__(self, entries: Iterable[tuple[str, GpsCoord]]):
        self._entries: dict[str, GpsCoord] = {}
        for device_id, coord in entries:
            if device_id in self._entries:
                raise RegistryError(f"duplicate device id {device_id!r}")
            self._entries[device_id] = coord

    @classmethod
    def from_csv(cls, path: str | Path) -> SensorRegistry:
        """Load a ``device_id,lat,lon`` metadata file."""
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"device_id", "lat", "lon"} - set(reader.fieldnames or ())
            if missing:
                raise RegistryError(f"{path}: missing column(s) {sorted(missing)}")
            rows = []
            for line_no, row in enumerate(reader, start=2):
                try:
                    coord = GpsCoord(float(row["lat"]), float(row["lon"]))
                except ValueError as exc:
                    raise RegistryError(f"{path}:{line_no}: {exc}") from exc
                rows.append((row["device_id"].strip(), coord))
        return cls(rows)

    def __getitem__(self, device_id: str) -> GpsCoord:
        try:
            return self._entries[device_id]
        except KeyError:
            raise RegistryError(f"unknown device id {device_id!r}") from None

    def __contains__(self, device_id: object) -> bool:
        return device_id in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def ids(self) -> list[str]:
        return list(self._entries)

    def subset(self, device_ids: Iterable[str]) -> SensorRegistry:
        return SensorRegistry((d, self[d]) for d in device_ids)


def form_cfn(owner: str, registry: SensorRegistry, radius_km: float) -> list[tuple[str, float]]:
    """Candidate favorite neighbors of ``owner``, nearest first.

    Devices at exactly ``radius_km`` are kept. Equal distances are ordered by
    device id so evaluation order never depends on registry order.
    """
    if radius_km <= 0:
        raise ValueError(f"radius must be positive, got {radius_km}")
    home = registry[owner]
    found = []
    for device_id in registry:
        if device_id == owner:
            continue
        distance = haversine_distance(home, registry[device_id])
        if distance > radius_km:
            continue
        found.append((device_id, distance))
    found.sort(key=lambda item: (item[1], item[0]))
    return found


def miles_to_km(miles: float) -> float:
    return miles * KM_PER_MILE
