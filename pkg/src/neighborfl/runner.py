"""Experiment harness: run, pretrain, persist artifacts, summarize and chart."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from neighborfl import __version__
from neighborfl.config import ConfigError, SimConfig, load_config
from neighborfl.data import MinMaxScaler, SensorStream, read_stream
from neighborfl.geo import SensorRegistry
from neighborfl.io import git_blob_hash, read_jsonl, write_csv, write_json, write_jsonl, write_text, fmt_float
from neighborfl.learner import ModelParams, RMSProp, load_checkpoint, make_learner, save_checkpoint, train_local
from neighborfl.metrics import avg_device_mse, default_ranges, device_mse_table, round_range_mse
from neighborfl.protocol import DeviceRound, RoundLog, Simulation, device_seed
from neighborfl.svg import line_chart

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "NEIGHBORFL_OUTPUT_ROOT"
ROUNDS_FILE = "rounds.jsonl"
MANIFEST_FILE = "manifest.json"


class HarnessError(RuntimeError):
    pass


def slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower()


def resolve_output_dir(config: SimConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / slug(config.method_label)


def load_inputs(config: SimConfig) -> tuple[SensorRegistry, SensorStream]:
    if not config.metadata_csv or not config.stream_csv:
        raise ConfigError("metadata_csv and stream_csv are required")
    registry = SensorRegistry.from_csv(config.metadata_csv)
    if config.devices:
        registry = registry.subset(config.devices)
    stream = read_stream(config.stream_csv, registry.ids)
    return registry, stream


def load_initial_models(config: SimConfig, device_ids: Sequence[str]) -> dict[str, ModelParams] | None:
    if not config.checkpoint_dir:
        return None
    folder = Path(config.checkpoint_dir)
    missing = [d for d in device_ids if not (folder / f"{d}.npz").exists()]
    if missing:
        raise HarnessError(f"{folder}: no checkpoint for device(s): {', '.join(missing)}")
    return {d: load_checkpoint(folder / f"{d}.npz") for d in device_ids}


def pretrain(config: SimConfig) -> dict[str, Path]:
    """Train one initial model per device on historical data, starting from the shared seed model."""
    if not config.pretrain_csv or not config.checkpoint_dir:
        raise ConfigError("pretrain needs pretrain_csv and checkpoint_dir")
    if not config.metadata_csv:
        raise ConfigError("metadata_csv is required")
    registry = SensorRegistry.from_csv(config.metadata_csv)
    if config.devices:
        registry = registry.subset(config.devices)
    history = read_stream(config.pretrain_csv, registry.ids)
    learner = make_learner(config.learner, config.n_in, config.n_out, config.hidden, config.layers, config.dropout)
    a0 = learner.init_params(config.seed)
    scaler = MinMaxScaler(config.norm_low, config.norm_high) if config.normalize else None
    out = {}
    for index, d in enumerate(registry.ids):
        series = history.values[d] if scaler is None else scaler.transform(history.values[d])
        rng = np.random.default_rng(device_seed(config.seed, index, 0))
        model = train_local(learner, a0, series, config.epochs, RMSProp(config.lr, config.rho, config.eps), rng,
                            context=f"pretraining device {d}")
        path = Path(config.checkpoint_dir) / f"{d}.npz"
        save_checkpoint(path, model)
        out[d] = path
        log.info("pretrained %s -> %s", d, path)
    return out


@dataclass
class RunResult:
    output_dir: Path
    logs: list[RoundLog]
    device_ids: list[str]

    def series(self, n_out: int) -> dict[str, dict[int, tuple[np.ndarray, np.ndarray]]]:
        return {d: {entry.round: entry.devices[d].aligned(n_out) for entry in self.logs} for d in self.device_ids}


def run(config: SimConfig, registry: SensorRegistry | None = None, stream: SensorStream | None = None) -> RunResult:
    """Simulate every round and write logs, prediction CSVs, summaries and a manifest."""
    if registry is None or stream is None:
        registry, stream = load_inputs(config)
    out = resolve_output_dir(config)
    initial = load_initial_models(config, registry.ids)
    sim = Simulation(config, registry, stream, initial_models=initial)
    logs = sim.run()
    write_run_artifacts(out, config, logs, registry.ids)
    return RunResult(out, logs, registry.ids)


def _input_hashes(config: SimConfig) -> dict[str, str]:
    hashes = {}
    for key in ("metadata_csv", "stream_csv", "pretrain_csv"):
        path = getattr(config, key)
        if path and Path(path).exists():
            hashes[key] = git_blob_hash(path)
    if config.checkpoint_dir and Path(config.checkpoint_dir).is_dir():
        for ckpt in sorted(Path(config.checkpoint_dir).glob("*.npz")):
            hashes[f"checkpoint:{ckpt.name}"] = git_blob_hash(ckpt)
    return hashes


def _absolute(config: SimConfig) -> SimConfig:
    changes = {}
    for key in ("metadata_csv", "stream_csv", "pretrain_csv", "checkpoint_dir", "output_dir"):
        value = getattr(config, key)
        if value:
            changes[key] = str(Path(value).resolve())
    return config.replace(**changes)


def summary_window(config: SimConfig, n_rounds: int) -> tuple[int, int]:
    return max(1, n_rounds - config.summary_last + 1), n_rounds


def write_run_artifacts(out: Path, config: SimConfig, logs: Sequence[RoundLog], device_ids: Sequence[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    n_out = config.n_out
    write_jsonl(out / ROUNDS_FILE, (entry.devices[d].to_record() for entry in logs for d in device_ids))

    series = {d: {e.round: e.devices[d].aligned(n_out) for e in logs} for d in device_ids}
    for d in device_ids:
        rows = []
        for j, (p, y) in sorted(series[d].items()):
            for k in range(len(p)):
                if n_out == 1:
                    rows.append((j, k + 1, fmt_float(p[k][0]), fmt_float(y[k][0])))
                else:
                    rows.extend((j, k + 1, h + 1, fmt_float(p[k][h]), fmt_float(y[k][h])) for h in range(n_out))
        header = ("round", "step", "prediction", "truth") if n_out == 1 else ("round", "step", "horizon", "prediction", "truth")
        write_csv(out / "predictions" / f"{d}.csv", header, rows)

    n_rounds = len(logs)
    label = config.method_label
    setting = "Pretrain MSE" if config.checkpoint_dir else "Non-Pretrain MSE"
    first, last = summary_window(config, n_rounds)
    last_table = device_mse_table(series, first, last)
    write_csv(out / "device_mse_last.csv", ("device_id", label), ((d, fmt_float(last_table[d])) for d in device_ids))
    write_csv(out / "avg_device_mse_last.csv", ("Methods", setting), [(label, fmt_float(avg_device_mse(series, first, last)))])
    write_csv(out / "avg_device_mse_all.csv", ("Methods", setting), [(label, fmt_float(avg_device_mse(series, 1, n_rounds)))])

    ranges = default_ranges(n_rounds)
    smooth_rows = []
    for d in device_ids:
        for (a, b), v in zip(ranges, round_range_mse(series[d], ranges)):
            smooth_rows.append((d, a, b, fmt_float(v)))
    write_csv(out / "smoothed_mse.csv", ("device_id", "first_round", "last_round", "mse"), smooth_rows)

    resolved = _absolute(config)
    write_json(out / MANIFEST_FILE, {
        "package": "neighborfl",
        "version": __version__,
        "method": label,
        "setting": setting,
        "seed": config.seed,
        "rounds": n_rounds,
        "devices": list(device_ids),
        "summary_rounds": [first, last],
        "inputs": _input_hashes(resolved),
        "config": resolved.to_dict(),
    })


# -- reading finished runs ----------------------------------------------------

@dataclass
class StoredRun:
    path: Path
    manifest: dict
    records: list[DeviceRound]

    @classmethod
    def load(cls, path: str | Path) -> StoredRun:
        path = Path(path)
        if not (path / MANIFEST_FILE).exists() or not (path / ROUNDS_FILE).exists():
            raise HarnessError(f"{path}: not a completed run (missing {MANIFEST_FILE} or {ROUNDS_FILE})")
        manifest = json.loads((path / MANIFEST_FILE).read_text(encoding="utf-8"))
        records = [DeviceRound.from_record(r) for r in read_jsonl(path / ROUNDS_FILE)]
        return cls(path, manifest, records)

    @property
    def config(self) -> SimConfig:
        return SimConfig.from_dict(self.manifest["config"])

    @property
    def label(self) -> str:
        return self.manifest["method"]

    @property
    def device_ids(self) -> list[str]:
        return list(self.manifest["devices"])

    @property
    def n_rounds(self) -> int:
        return int(self.manifest["rounds"])

    def series(self) -> dict[str, dict[int, tuple[np.ndarray, np.ndarray]]]:
        n_out = self.config.n_out
        out: dict[str, dict] = {d: {} for d in self.device_ids}
        for rec in self.records:
            out[rec.device][rec.round] = rec.aligned(n_out)
        return out


def parse_round_window(text: str | None, n_rounds: int, default_last: int = 24) -> tuple[int, int]:
    if not text:
        return max(1, n_rounds - default_last + 1), n_rounds
    m = re.fullmatch(r"\s*(\d+)\s*[:-]\s*(\d+)\s*", text)
    if not m:
        raise HarnessError(f"round window must look like FIRST:LAST, got {text!r}")
    a, b = int(m.group(1)), int(m.group(2))
    a, b = max(a, 1), min(b, n_rounds)
    if a > b:
        raise HarnessError(f"round window {text!r} selects no rounds; valid range is 1:{n_rounds}")
    return a, b


def chart_run(run_dir: str | Path, window: str | None = None, devices: Sequence[str] | None = None,
              out_dir: str | Path | None = None) -> list[Path]:
    """Per-device prediction-vs-truth SVGs over a round window."""
    stored = StoredRun.load(run_dir)
    first, last = parse_round_window(window, stored.n_rounds)
    wanted = list(devices) if devices else stored.device_ids
    unknown = [d for d in wanted if d not in stored.device_ids]
    if unknown:
        raise HarnessError(f"unknown device(s) {', '.join(unknown)}")
    target = Path(out_dir) if out_dir else stored.path / "charts"
    series = stored.series()
    paths = []
    for d in wanted:
        xs, pred, truth = [], [], []
        for j in range(first, last + 1):
            if j not in series[d]:
                continue
            p, y = series[d][j]
            for k in range(len(p)):
                xs.append(j - 1 + k / len(p))
                pred.append(float(p[k][0]))
                truth.append(float(y[k][0]))
        svg = line_chart({"Truth": (xs, truth), stored.label: (xs, pred)},
                         title=f"{d}: rounds {first}-{last}", xlabel="communication round", ylabel="reading",
                         colors={"Truth": "#1f77b4", stored.label: "#d62728"})
        path = target / f"prediction_{d}_r{first}-{last}.svg"
        write_text(path, svg)
        paths.append(path)
    return paths


def compare_runs(run_dirs: Sequence[str | Path], out_dir: str | Path) -> dict[str, Path]:
    """Method-level and device-level MSE tables plus smoothed-MSE charts across runs."""
    runs = [StoredRun.load(p) for p in run_dirs]
    if not runs:
        raise HarnessError("compare needs at least one run directory")
    devices = runs[0].device_ids
    for r in runs[1:]:
        if r.device_ids != devices:
            raise HarnessError(f"{r.path}: device set differs from {runs[0].path}")
    out = Path(out_dir)
    series = {id(r): r.series() for r in runs}

    labels = []
    for r in runs:
        name = r.label
        if name in labels:
            name = f"{name} ({r.manifest['setting'].replace(' MSE', '')})"
        labels.append(name)

    settings = ("Pretrain MSE", "Non-Pretrain MSE")
    methods: dict[str, dict[str, dict[str, str]]] = {"last": {}, "all": {}}
    for r in runs:
        s = series[id(r)]
        first, last = summary_window(r.config, r.n_rounds)
        methods["last"].setdefault(r.label, {})[r.manifest["setting"]] = fmt_float(avg_device_mse(s, first, last))
        methods["all"].setdefault(r.label, {})[r.manifest["setting"]] = fmt_float(avg_device_mse(s, 1, r.n_rounds))
    paths = {}
    for key, table in methods.items():
        path = out / f"avg_device_mse_{key}.csv"
        write_csv(path, ("Methods", *settings), [(m, *(v.get(st, "") for st in settings)) for m, v in table.items()])
        paths[f"avg_device_mse_{key}"] = path

    per_run = []
    for r in runs:
        first, last = summary_window(r.config, r.n_rounds)
        per_run.append(device_mse_table(series[id(r)], first, last))
    path = out / "device_mse_last.csv"
    write_csv(path, ("device_id", *labels), ((d, *(fmt_float(t[d]) for t in per_run)) for d in devices))
    paths["device_mse_last"] = path

    for d in devices:
        lines = {}
        for r, name in zip(runs, labels):
            ranges = default_ranges(r.n_rounds)
            vals = round_range_mse(series[id(r)][d], ranges)
            lines[name] = (list(range(1, len(vals) + 1)), vals)
        svg = line_chart(lines, title=f"{d}: smoothed MSE", xlabel="round range", ylabel="MSE")
        path = out / "charts" / f"smoothed_mse_{d}.svg"
        write_text(path, svg)
        paths[f"smoothed_{d}"] = path
    return paths


def rerun_from_manifest(manifest_path: str | Path, output_dir: str | Path) -> RunResult:
    config = load_config(manifest_path).replace(output_dir=str(output_dir))
    return run(config)
