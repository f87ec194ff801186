"""Simulation configuration, validation and file loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from neighborfl.geo import miles_to_km

MODES = ("neighborfl", "central", "naivefl", "r_naivefl")
REMOVAL_POLICIES = ("by_reputation", "last_added")
FN_INITS = ("empty", "cfn", "all")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModeSpec:
    """How a method seeds and evolves each device's favorite-neighbor set."""

    fn_init: str
    dynamic: bool


def configure_mode(mode: str) -> ModeSpec:
    """Map a method name to its favorite-neighbor behaviour.

    ``central`` never federates, ``naivefl`` federates with every other
    device, ``r_naivefl`` with every candidate in radius; only
    ``neighborfl`` selects, evaluates and removes neighbors.
    """
    if mode == "neighborfl":
        return ModeSpec("empty", True)
    if mode == "central":
        return ModeSpec("empty", False)
    if mode == "naivefl":
        return ModeSpec("all", False)
    if mode == "r_naivefl":
        return ModeSpec("cfn", False)
    raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")


@dataclass(frozen=True)
class SimConfig:
    mode: str = "neighborfl"
    removal_policy: str = "last_added"
    nu: int = 1
    radius: float = 1.0
    radius_unit: str = "miles"
    n_in: int = 12
    n_out: int = 1
    tau_first: int = 24
    tau_rest: int = 12
    max_data_size: int = 72
    epochs: int = 5
    rounds: int = 250
    learner: str = "lstm"
    hidden: int = 128
    layers: int = 2
    dropout: float = 0.2
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    reset_optimizer: bool = False
    seed: int = 40
    normalize: bool = False
    norm_low: float = 0.0
    norm_high: float = 100.0
    # Override the mode's favorite-neighbor behaviour (None keeps the mode default).
    fn_init: str | None = None
    dynamic_fn: bool | None = None
    summary_last: int = 24
    jobs: int = 1
    label: str | None = None
    metadata_csv: str | None = None
    stream_csv: str | None = None
    pretrain_csv: str | None = None
    checkpoint_dir: str | None = None
    output_dir: str | None = None
    devices: tuple[str, ...] | None = field(default=None)

    def __post_init__(self) -> None:
        if self.devices is not None and not isinstance(self.devices, tuple):
            object.__setattr__(self, "devices", tuple(self.devices))
        self.validate()

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.mode in MODES, f"mode must be one of {MODES}, got {self.mode!r}")
        need(self.removal_policy in REMOVAL_POLICIES,
             f"removal_policy must be one of {REMOVAL_POLICIES}, got {self.removal_policy!r}")
        need(self.radius_unit in ("miles", "km"), f"radius_unit must be 'miles' or 'km', got {self.radius_unit!r}")
        need(self.fn_init is None or self.fn_init in FN_INITS, f"fn_init must be one of {FN_INITS}")
        need(self.n_in >= 1, "I (n_in) must be >= 1")
        need(self.n_out >= 1, "O (n_out) must be >= 1")
        need(self.radius > 0, "radius must be > 0")
        need(self.tau_first >= self.n_in + self.n_out,
             f"tau_first >= I + O violated: {self.tau_first} < {self.n_in + self.n_out}")
        need(self.tau_rest >= self.n_out, f"tau_rest >= O violated: {self.tau_rest} < {self.n_out}")
        need(self.max_data_size >= self.n_in + self.n_out,
             f"max_data_size >= I + O violated: {self.max_data_size} < {self.n_in + self.n_out}")
        need(self.rounds >= 1, "rounds >= 1 violated")
        need(self.nu >= 1, "nu >= 1 violated")
        need(self.epochs >= 0, "epochs >= 0 violated")
        need(self.learner in ("lstm", "linear"), f"learner must be 'lstm' or 'linear', got {self.learner!r}")
        need(self.lr > 0 and 0 <= self.rho < 1 and self.eps > 0, "optimizer requires lr > 0, 0 <= rho < 1, eps > 0")
        need(self.norm_high > self.norm_low, "norm_high > norm_low violated")
        need(self.summary_last >= 1, "summary_last >= 1 violated")
        need(self.jobs >= 1, "jobs >= 1 violated")

    @property
    def radius_km(self) -> float:
        return miles_to_km(self.radius) if self.radius_unit == "miles" else self.radius

    @property
    def mode_spec(self) -> ModeSpec:
        base = configure_mode(self.mode)
        return ModeSpec(
            self.fn_init if self.fn_init is not None else base.fn_init,
            self.dynamic_fn if self.dynamic_fn is not None else base.dynamic,
        )

    @property
    def method_label(self) -> str:
        if self.label:
            return self.label
        if self.mode == "neighborfl":
            return f"NeighborFL {'L' if self.removal_policy == 'last_added' else 'R'}{self.nu}"
        return {"central": "Central", "naivefl": "NaiveFL", "r_naivefl": "r-NaiveFL"}[self.mode]

    def replace(self, **changes: Any) -> SimConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if d["devices"] is not None:
            d["devices"] = list(d["devices"])
        return d

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> SimConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> SimConfig:
    """Read a TOML or JSON config; a run manifest (with a ``config`` key) also works."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        raw = tomllib.loads(text)
    else:
        raw = json.loads(text)
    if "config" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]
    return SimConfig.from_dict(raw)
