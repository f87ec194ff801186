"""Favorite-neighbor federation: device state machine and round orchestration."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from neighborfl.config import SimConfig
from neighborfl.data import DataWindow, MinMaxScaler, SensorStream, StreamError, extract_latest
from neighborfl.geo import SensorRegistry, form_cfn
from neighborfl.learner import (
    Learner,
    ModelParams,
    RMSProp,
    TrainingError,
    aggregate,
    make_learner,
    train_local,
)
from neighborfl.metrics import mse

log = logging.getLogger(__name__)

TAG_A = "A"
TAG_EVAL = "A_eval"


class AlignmentError(ValueError):
    pass


class StreamExhausted(StreamError):
    """The stream ran out of rows before a round could complete."""


@dataclass
class DeviceState:
    id: str
    cfn: list[tuple[str, float]]
    window: DataWindow
    model_a: ModelParams
    optimizer: RMSProp = field(default_factory=RMSProp)
    fn: list[str] = field(default_factory=list)
    rep_book: dict[str, float] = field(default_factory=dict)
    last_try_round: dict[str, int] = field(default_factory=dict)
    retry_interval: dict[str, int] = field(default_factory=dict)
    model_eval: ModelParams | None = None
    pending_eval: str | None = None
    error_history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        for d, _ in self.cfn:
            self.rep_book.setdefault(d, 0.0)
            self.last_try_round.setdefault(d, 0)
            self.retry_interval.setdefault(d, 0)

    @property
    def cfn_ids(self) -> list[str]:
        return [d for d, _ in self.cfn]


def select_candidate(state: DeviceState, j: int) -> str | None:
    """Nearest non-favorite candidate whose retry back-off has expired by round ``j``."""
    if len(state.fn) >= len(state.cfn):
        return None
    members = set(state.fn)
    for cand, _ in state.cfn:
        if cand in members:
            continue
        if state.last_try_round[cand] + state.retry_interval[cand] < j:
            return cand
    return None


@dataclass
class Step:
    """One collection step of a round: what was predicted, then what was observed."""

    m: int
    collected: float
    truth: np.ndarray | None
    predictions: list[np.ndarray | None]


def predict_round(
    window: DataWindow,
    predictors: Sequence[Callable[[np.ndarray], np.ndarray]],
    incoming: Sequence[float],
    j: int,
    n_in: int,
    n_out: int,
) -> list[Step]:
    """Interleave predict-then-collect over one round's readings.

    Each step first asks every predictor for the next ``n_out`` values from
    the latest ``n_in`` readings, then ingests the true reading and records
    the latest ``n_out`` readings as a truth instance. In round 1 the first
    ``n_in`` steps only collect, and truths start once ``n_in + n_out``
    readings exist. ``window`` is updated in place and trimmed at the end.
    """
    steps = []
    for m, value in enumerate(incoming, start=1):
        if j == 1 and m <= n_in:
            preds: list[np.ndarray | None] = [None] * len(predictors)
        else:
            x = extract_latest(window, n_in)
            preds = [np.asarray(p(x), dtype=np.float64) for p in predictors]
        window.append(value)
        truth = None
        if j > 1 or m >= n_in + n_out:
            truth = extract_latest(window, n_out)
        steps.append(Step(m, float(value), truth, preds))
    window.trim()
    return steps


def split_steps(steps: Sequence[Step], n_predictors: int) -> tuple[list[list[np.ndarray]], list[np.ndarray]]:
    preds = [[s.predictions[k] for s in steps if s.predictions[k] is not None] for k in range(n_predictors)]
    truths = [s.truth for s in steps if s.truth is not None]
    return preds, truths


def align_round(preds: Sequence[Sequence], truths: Sequence, n_out: int, first_round: bool = False):
    """Pair each prediction instance with the truth instance covering the same points.

    The last ``n_out - 1`` predictions of a round cover points not yet
    observed and are dropped. From round 2 on, the first ``n_out - 1`` truths
    belong to predictions made in the previous round and are dropped too; in
    round 1 truths only start once they line up.
    """
    drop = n_out - 1
    aligned_preds = [list(p[:len(p) - drop]) for p in preds]
    aligned_truths = list(truths if first_round else truths[drop:])
    for p in aligned_preds:
        if len(p) != len(aligned_truths):
            raise AlignmentError(f"cannot align {len(p)} predictions with {len(aligned_truths)} truths (O={n_out})")
    if not aligned_truths:
        raise AlignmentError(f"nothing left to compare after alignment (O={n_out})")
    return aligned_preds, aligned_truths


def align_for_eval(p_eval: Sequence, p: Sequence, y: Sequence, n_out: int):
    if not (len(p_eval) == len(p) == len(y)) or len(y) < n_out:
        raise AlignmentError(f"evaluation needs equal-length lists of at least O={n_out} entries, "
                             f"got {len(p_eval)}/{len(p)}/{len(y)}")
    (pe, pa), ya = align_round([p_eval, p], y, n_out)
    return pe, pa, ya


@dataclass(frozen=True)
class EvalOutcome:
    candidate: str
    error: float
    error_eval: float
    admitted: bool

    @property
    def chosen(self) -> str:
        return TAG_EVAL if self.admitted else TAG_A


def evaluate_candidate(state: DeviceState, d_eval: str, p_eval, p, y, n_out: int, j: int) -> EvalOutcome:
    """Admit ``d_eval`` if the model including it beat the current model this round."""
    pe, pa, ya = align_for_eval(p_eval, p, y, n_out)
    e_eval = mse(pe, ya)
    e = mse(pa, ya)
    state.rep_book[d_eval] = state.rep_book.get(d_eval, 0.0) + (e - e_eval)
    admitted = e_eval < e
    if admitted:
        state.fn.append(d_eval)
    else:
        state.last_try_round[d_eval] = j
        state.retry_interval[d_eval] = state.retry_interval.get(d_eval, 0) + 1
    return EvalOutcome(d_eval, e, e_eval, admitted)


def remove_by_reputation(state: DeviceState) -> str | None:
    if not state.fn:
        return None
    worst = min(state.fn, key=lambda d: (state.rep_book.get(d, 0.0), d))
    state.fn.remove(worst)
    return worst


def remove_last_added(state: DeviceState) -> str | None:
    if not state.fn:
        return None
    return state.fn.pop()


REMOVAL_METHODS: dict[str, Callable[[DeviceState], str | None]] = {
    "by_reputation": remove_by_reputation,
    "last_added": remove_last_added,
}


def removal_triggered(errors: Sequence[float], nu: int) -> bool:
    """True when the last ``nu + 1`` errors rise strictly at every step."""
    if len(errors) < nu + 1:
        return False
    tail = errors[-(nu + 1):]
    return all(b > a for a, b in zip(tail, tail[1:]))


def maybe_remove(state: DeviceState, nu: int, j: int, policy: str = "last_added") -> str | None:
    """Drop one favorite neighbor after ``nu`` consecutive error increases.

    The removed device is backed off exactly like a rejected candidate.
    """
    if j <= nu or not removal_triggered(state.error_history, nu):
        return None
    removed = REMOVAL_METHODS[policy](state)
    if removed is not None:
        state.last_try_round[removed] = j
        state.retry_interval[removed] = state.retry_interval.get(removed, 0) + 1
    return removed


@dataclass
class DeviceRound:
    device: str
    round: int
    predictions: list[list[float]]
    truths: list[list[float]]
    error: float
    chosen: str
    fn: list[str]
    predictions_eval: list[list[float]] | None = None
    evaluated: str | None = None
    error_eval: float | None = None
    added: str | None = None
    removed: str | None = None
    selected: str | None = None

    def aligned(self, n_out: int) -> tuple[np.ndarray, np.ndarray]:
        (p,), y = align_round([self.predictions], self.truths, n_out, first_round=self.round == 1)
        return np.array(p, dtype=np.float64), np.array(y, dtype=np.float64)

    def to_record(self) -> dict:
        return {
            "round": self.round,
            "device": self.device,
            "P": self.predictions,
            "P_eval": self.predictions_eval,
            "Y": self.truths,
            "E": self.error,
            "E_eval": self.error_eval,
            "evaluated": self.evaluated,
            "chosen": self.chosen,
            "fn": self.fn,
            "added": self.added,
            "removed": self.removed,
            "selected": self.selected,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> DeviceRound:
        return cls(
            device=rec["device"], round=rec["round"], predictions=rec["P"], truths=rec["Y"],
            error=rec["E"], chosen=rec["chosen"], fn=list(rec["fn"]), predictions_eval=rec.get("P_eval"),
            evaluated=rec.get("evaluated"), error_eval=rec.get("E_eval"), added=rec.get("added"),
            removed=rec.get("removed"), selected=rec.get("selected"),
        )


@dataclass
class RoundLog:
    round: int
    devices: dict[str, DeviceRound]


def device_seed(master: int, index: int, *extra: int) -> np.random.SeedSequence:
    """Independent seed stream per device index (and optionally per round)."""
    return np.random.SeedSequence(entropy=master, spawn_key=(index, *extra))


class Simulation:
    """Round-synchronous federation over a fixed set of devices.

    Devices are simulated in registry order. Within a round, the
    predict/evaluate/train phase of each device is independent and may run on
    a thread pool; aggregation waits for every local model.
    """

    def __init__(
        self,
        config: SimConfig,
        registry: SensorRegistry,
        stream: SensorStream,
        learner: Learner | None = None,
        initial_models: Mapping[str, ModelParams] | None = None,
    ):
        self.config = config
        self.registry = registry
        self.device_ids = registry.ids
        self.stream = stream.select(self.device_ids)
        self.learner = learner or make_learner(
            config.learner, config.n_in, config.n_out, config.hidden, config.layers, config.dropout)
        self.scaler = MinMaxScaler(config.norm_low, config.norm_high) if config.normalize else None
        self.spec = config.mode_spec
        self.cursor = 0
        self.round = 0
        self.aggregation_sizes: list[int] = []

        a0 = self.learner.init_params(config.seed)
        self.states: dict[str, DeviceState] = {}
        radius = config.radius_km
        for d in self.device_ids:
            cfn = form_cfn(d, registry, radius)
            model = initial_models[d] if initial_models is not None else a0
            self.learner.check(model)
            state = DeviceState(
                id=d, cfn=cfn, window=DataWindow(config.max_data_size), model_a=model,
                optimizer=RMSProp(config.lr, config.rho, config.eps),
            )
            if self.spec.fn_init == "cfn":
                state.fn = state.cfn_ids
            elif self.spec.fn_init == "all":
                state.fn = [o for o in self.device_ids if o != d]
            for o in state.fn:
                state.rep_book.setdefault(o, 0.0)
                state.last_try_round.setdefault(o, 0)
                state.retry_interval.setdefault(o, 0)
            self.states[d] = state

    # -- helpers -----------------------------------------------------------

    def _tau(self, j: int) -> int:
        return self.config.tau_first if j == 1 else self.config.tau_rest

    def _predictor(self, params: ModelParams):
        learner = self.learner
        return lambda x: learner.forward(params, x)

    def _to_units(self, values) -> list[list[float]]:
        arr = np.asarray(values, dtype=np.float64)
        if self.scaler is not None:
            arr = self.scaler.inverse(arr)
        return arr.reshape(len(arr), -1).tolist()

    def _aggregate(self, local: Mapping[str, ModelParams], members: list[str]) -> ModelParams:
        self.aggregation_sizes.append(len(set(members)))
        return aggregate(local, members)

    # -- phases ------------------------------------------------------------

    def _local_phase(self, index: int, d: str, j: int, incoming: np.ndarray):
        cfg = self.config
        state = self.states[d]
        predictors = [self._predictor(state.model_a)]
        evaluating = state.pending_eval
        if evaluating is not None:
            predictors.append(self._predictor(state.model_eval))
        steps = predict_round(state.window, predictors, incoming, j, cfg.n_in, cfg.n_out)
        raw_preds, raw_truths = split_steps(steps, len(predictors))
        preds = [self._to_units(p) for p in raw_preds]
        truths = self._to_units(raw_truths)

        (p_aligned,), y_aligned = align_round([preds[0]], truths, cfg.n_out, first_round=j == 1)
        error = mse(p_aligned, y_aligned)

        chosen_tag, chosen = TAG_A, state.model_a
        outcome = None
        if evaluating is not None:
            outcome = evaluate_candidate(state, evaluating, preds[1], preds[0], truths, cfg.n_out, j)
            if outcome.admitted:
                chosen_tag, chosen = TAG_EVAL, state.model_eval
        state.error_history.append(error)

        if cfg.reset_optimizer:
            state.optimizer.reset()
        rng = np.random.default_rng(device_seed(cfg.seed, index, j))
        try:
            local = train_local(self.learner, chosen, state.window.to_array(), cfg.epochs, state.optimizer, rng,
                                context=f"device {d}, round {j}")
        except TrainingError:
            log.error("training failed on device %s in round %d", d, j)
            raise
        record = DeviceRound(
            device=d, round=j, predictions=preds[0], truths=truths, error=error, chosen=chosen_tag, fn=[],
            predictions_eval=preds[1] if evaluating is not None else None,
            evaluated=evaluating, error_eval=outcome.error_eval if outcome else None,
            added=evaluating if outcome is not None and outcome.admitted else None,
        )
        return local, record

    def run_round(self) -> RoundLog:
        cfg = self.config
        j = self.round + 1
        tau = self._tau(j)
        if self.cursor + tau > len(self.stream):
            raise StreamExhausted(
                f"round {j} needs {tau} rows from row {self.cursor}, stream has {len(self.stream)}")
        rows = slice(self.cursor, self.cursor + tau)
        incoming = {d: self.stream.values[d][rows] for d in self.device_ids}
        if self.scaler is not None:
            incoming = {d: self.scaler.transform(v) for d, v in incoming.items()}

        def work(item):
            index, d = item
            return self._local_phase(index, d, j, incoming[d])

        items = list(enumerate(self.device_ids))
        if cfg.jobs > 1:
            with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                results = list(pool.map(work, items))
        else:
            results = [work(item) for item in items]
        # barrier: every round-j local model is published before aggregation
        local = {d: res[0] for d, res in zip(self.device_ids, results)}
        records = {d: res[1] for d, res in zip(self.device_ids, results)}

        for d in self.device_ids:
            state = self.states[d]
            record = records[d]
            state.model_a = self._aggregate(local, [d, *state.fn])
            state.model_eval = None
            state.pending_eval = None
            if self.spec.dynamic:
                record.removed = maybe_remove(state, cfg.nu, j, cfg.removal_policy)
                state.pending_eval = select_candidate(state, j)
                if state.pending_eval is not None:
                    state.model_eval = self._aggregate(local, [d, state.pending_eval, *state.fn])
            record.selected = state.pending_eval
            record.fn = list(state.fn)

        self.cursor += tau
        self.round = j
        return RoundLog(j, records)

    def run(self, rounds: int | None = None, on_round: Callable[[RoundLog], None] | None = None) -> list[RoundLog]:
        rounds = self.config.rounds if rounds is None else rounds
        needed = self.stream.rows_needed(rounds, self.config.tau_first, self.config.tau_rest)
        if len(self.stream) < needed:
            raise StreamExhausted(f"{rounds} rounds need {needed} stream rows, stream has {len(self.stream)}")
        logs = []
        for _ in range(rounds):
            entry = self.run_round()
            logs.append(entry)
            if on_round is not None:
                on_round(entry)
        return logs


def alignment_trace(n_in: int, n_out: int, tau_first: int, tau_rest: int, rounds: int) -> list[dict]:
    """Global point indices seen by one device, step by step.

    The stream carries each point's 1-based global index as its value and
    the predictor returns the indices it would forecast, so every recorded
    prediction and truth instance is a list of point indices. Entries
    removed by alignment are flagged.
    """
    window = DataWindow(max(n_in + n_out, tau_first + tau_rest * rounds))
    oracle = lambda x: x[-1] + np.arange(1, n_out + 1)  # noqa: E731
    rows = []
    next_point = 1
    for j in range(1, rounds + 1):
        tau = tau_first if j == 1 else tau_rest
        incoming = np.arange(next_point, next_point + tau, dtype=np.float64)
        next_point += tau
        steps = predict_round(window, [oracle], incoming, j, n_in, n_out)
        preds, truths = split_steps(steps, 1)
        drop = n_out - 1
        dropped_preds = {id(p) for p in preds[0][len(preds[0]) - drop:]} if drop else set()
        dropped_truths = {id(t) for t in truths[:drop]} if drop and j > 1 else set()
        for s in steps:
            pred = s.predictions[0]
            rows.append({
                "round": j,
                "m": s.m,
                "collected": int(s.collected),
                "truth": None if s.truth is None else [int(v) for v in s.truth],
                "prediction": None if pred is None else [int(v) for v in pred],
                "truth_dropped": s.truth is not None and id(s.truth) in dropped_truths,
                "prediction_dropped": pred is not None and id(pred) in dropped_preds,
            })
    return rows
