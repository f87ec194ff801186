"""Online learners, RMSProp, local training and FedAvg aggregation.

Every learner exposes its parameters as one flat float64 vector wrapped in
:class:`ModelParams`; that vector is what devices exchange and average.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from neighborfl.data import instance_matrix

CHECKPOINT_VERSION = 1


class ArchError(ValueError):
    """Shape or architecture mismatch."""


class AggregationError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass(frozen=True, eq=False)
class ModelParams:
    values: np.ndarray
    arch_tag: str

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, copy=True).ravel()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch_tag == other.arch_tag and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash((self.arch_tag, self.values.tobytes()))


class Learner(abc.ABC):
    """A differentiable sequence-to-horizon regressor over a flat parameter vector."""

    n_in: int
    n_out: int

    @property
    @abc.abstractmethod
    def arch_tag(self) -> str: ...

    @abc.abstractmethod
    def num_params(self) -> int: ...

    @abc.abstractmethod
    def init_params(self, seed: int) -> ModelParams: ...

    @abc.abstractmethod
    def _forward(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def _loss_grad(self, theta: np.ndarray, x: np.ndarray, y: np.ndarray, mask) -> tuple[float, np.ndarray]: ...

    def dropout_mask(self, rng: np.random.Generator | None):
        """Train-time dropout mask, or None when the learner has no dropout."""
        return None

    def check(self, params: ModelParams) -> np.ndarray:
        if params.arch_tag != self.arch_tag or len(params) != self.num_params():
            raise ArchError(f"parameters tagged {params.arch_tag!r} ({len(params)} values) "
                            f"do not fit {self.arch_tag!r} ({self.num_params()} values)")
        return params.values

    def forward(self, params: ModelParams, x: Sequence[float]) -> np.ndarray:
        """Inference: predict the next ``n_out`` readings from ``n_in`` readings."""
        theta = self.check(params)
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_in,):
            raise ArchError(f"expected {self.n_in} input readings, got shape {x.shape}")
        return self._forward(theta, x)

    def loss(self, params: ModelParams, x, y) -> float:
        pred = self.forward(params, x)
        return float(np.mean((pred - np.asarray(y, dtype=np.float64)) ** 2))

    def loss_gradient(self, params: ModelParams, x, y) -> np.ndarray:
        """Gradient of the instance MSE with dropout disabled."""
        theta = self.check(params)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != (self.n_in,) or y.shape != (self.n_out,):
            raise ArchError(f"instance shapes {x.shape}/{y.shape} do not match ({self.n_in},)/({self.n_out},)")
        return self._loss_grad(theta, x, y, None)[1]


class LinearLearner(Learner):
    """Linear autoregressor: ``y = W x + b`` with ``W`` of shape (n_out, n_in)."""

    def __init__(self, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        self._nw = n_in * n_out

    @property
    def arch_tag(self) -> str:
        return f"linear-i{self.n_in}-o{self.n_out}"

    def num_params(self) -> int:
        return self._nw + self.n_out

    def init_params(self, seed: int) -> ModelParams:
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(self.n_in)
        w = rng.uniform(-bound, bound, size=self._nw)
        return ModelParams(np.concatenate([w, np.zeros(self.n_out)]), self.arch_tag)

    def _forward(self, theta, x):
        w = theta[:self._nw].reshape(self.n_out, self.n_in)
        return w @ x + theta[self._nw:]

    def _loss_grad(self, theta, x, y, mask):
        nw = self._nw
        err = theta[:nw].reshape(self.n_out, self.n_in) @ x + theta[nw:] - y
        scale = err * (2.0 / self.n_out)
        grad = np.empty(nw + self.n_out)
        if self.n_out == 1:
            np.multiply(x, scale[0], out=grad[:nw])
        else:
            grad[:nw] = np.outer(scale, x).ravel()
        grad[nw:] = scale
        return float(err @ err) / self.n_out, grad


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


class LstmLearner(Learner):
    """Stacked LSTM over the scalar input sequence, dense head on the last step.

    Gate order inside each layer's weight block is (input, forget, cell, output).
    Each layer's kernel acts on ``[input_t; h_{t-1}]``. Hidden state is reset for
    every instance. Dropout sits between the last LSTM layer and the dense head.
    """

    def __init__(self, n_in: int, n_out: int, hidden: int = 128, layers: int = 2, dropout: float = 0.2):
        if layers < 1 or hidden < 1:
            raise ArchError("LSTM needs at least one layer of at least one unit")
        if not 0.0 <= dropout < 1.0:
            raise ArchError("dropout must lie in [0, 1)")
        self.n_in = n_in
        self.n_out = n_out
        self.hidden = hidden
        self.layers = layers
        self.dropout = dropout
        self._slices = []
        offset = 0
        for layer in range(layers):
            in_dim = 1 if layer == 0 else hidden
            w_size = 4 * hidden * (in_dim + hidden)
            self._slices.append((in_dim, slice(offset, offset + w_size), slice(offset + w_size, offset + w_size + 4 * hidden)))
            offset += w_size + 4 * hidden
        self._dense_w = slice(offset, offset + n_out * hidden)
        offset += n_out * hidden
        self._dense_b = slice(offset, offset + n_out)
        self._size = offset + n_out

    @property
    def arch_tag(self) -> str:
        return f"lstm-i{self.n_in}-h{self.hidden}x{self.layers}-o{self.n_out}-d{self.dropout:g}"

    def num_params(self) -> int:
        return self._size

    def init_params(self, seed: int) -> ModelParams:
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(self.hidden)
        theta = rng.uniform(-bound, bound, size=self._size)
        return ModelParams(theta, self.arch_tag)

    def _unpack(self, theta):
        H = self.hidden
        layers = []
        for in_dim, ws, bs in self._slices:
            layers.append((in_dim, theta[ws].reshape(4 * H, in_dim + H), theta[bs]))
        return layers, theta[self._dense_w].reshape(self.n_out, H), theta[self._dense_b]

    def _run(self, theta, x, keep_cache):
        H = self.hidden
        layers, wd, bd = self._unpack(theta)
        h = [np.zeros(H) for _ in layers]
        c = [np.zeros(H) for _ in layers]
        cache = []
        for t in range(len(x)):
            inp = x[t:t + 1]
            step = []
            for l, (_, w, b) in enumerate(layers):
                z = np.concatenate([inp, h[l]])
                a = w @ z + b
                i = _sigmoid(a[:H])
                f = _sigmoid(a[H:2 * H])
                g = np.tanh(a[2 * H:3 * H])
                o = _sigmoid(a[3 * H:])
                c_prev = c[l]
                c[l] = f * c_prev + i * g
                tc = np.tanh(c[l])
                h[l] = o * tc
                if keep_cache:
                    step.append((z, i, f, g, o, c_prev, tc))
                inp = h[l]
            if keep_cache:
                cache.append(step)
        return h[-1], cache, layers, wd, bd

    def _forward(self, theta, x):
        top, _, _, wd, bd = self._run(theta, x, keep_cache=False)
        return wd @ top + bd

    def dropout_mask(self, rng):
        if rng is None or self.dropout == 0.0:
            return None
        keep = 1.0 - self.dropout
        return (rng.random(self.hidden) < keep) / keep

    def _loss_grad(self, theta, x, y, mask):
        H = self.hidden
        top, cache, layers, wd, bd = self._run(theta, x, keep_cache=True)
        feat = top if mask is None else top * mask
        err = wd @ feat + bd - y
        dy = 2.0 * err / self.n_out

        grad = np.zeros(self._size)
        grad[self._dense_w] = np.outer(dy, feat).ravel()
        grad[self._dense_b] = dy
        dfeat = wd.T @ dy
        dh_top = dfeat if mask is None else dfeat * mask

        n_layers, T = len(layers), len(x)
        das = [np.empty((T, 4 * H)) for _ in layers]
        dh_rec = [np.zeros(H) for _ in layers]
        dc_rec = [np.zeros(H) for _ in layers]
        for t in range(len(x) - 1, -1, -1):
            dh_from_above = dh_top if t == len(x) - 1 else np.zeros(H)
            for l in range(n_layers - 1, -1, -1):
                in_dim, w, _ = layers[l]
                z, i, f, g, o, c_prev, tc = cache[t][l]
                dh = dh_rec[l] + dh_from_above
                do = dh * tc
                dc = dc_rec[l] + dh * o * (1.0 - tc * tc)
                da = np.concatenate([
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - g * g),
                    do * o * (1.0 - o),
                ])
                dc_rec[l] = dc * f
                das[l][t] = da
                dz = w.T @ da
                dh_rec[l] = dz[in_dim:]
                dh_from_above = dz[:in_dim]
        for l, (_, ws, bs) in enumerate(self._slices):
            zs = np.stack([cache[t][l][0] for t in range(T)])
            grad[ws] = (das[l].T @ zs).ravel()
            grad[bs] = das[l].sum(axis=0)
        return float(np.mean(err * err)), grad


def make_learner(kind: str, n_in: int, n_out: int, hidden: int = 128, layers: int = 2, dropout: float = 0.2) -> Learner:
    if kind == "linear":
        return LinearLearner(n_in, n_out)
    if kind == "lstm":
        return LstmLearner(n_in, n_out, hidden=hidden, layers=layers, dropout=dropout)
    raise ArchError(f"unknown learner {kind!r} (expected 'linear' or 'lstm')")


@dataclass
class RMSProp:
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    accumulator: np.ndarray | None = field(default=None, repr=False)

    def reset(self) -> None:
        self.accumulator = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        """In-place update of ``theta``."""
        if self.accumulator is None or self.accumulator.shape != theta.shape:
            self.accumulator = np.zeros_like(theta)
        acc = self.accumulator
        tmp = np.multiply(grad, grad)
        tmp *= 1.0 - self.rho
        acc *= self.rho
        acc += tmp
        np.sqrt(acc, out=tmp)
        tmp += self.eps
        np.divide(grad, tmp, out=tmp)
        tmp *= self.lr
        theta -= tmp


def train_local(
    learner: Learner,
    params: ModelParams,
    points: np.ndarray,
    epochs: int,
    opt: RMSProp,
    rng: np.random.Generator | None = None,
    context: str = "",
) -> ModelParams:
    """Run ``epochs`` passes of batch-size-1 RMSProp over every instance of ``points``.

    Returns ``params`` itself when there is no full instance or no epoch to run.
    """
    xs, ys = instance_matrix(np.asarray(points, dtype=np.float64), learner.n_in, learner.n_out)
    if len(xs) == 0 or epochs <= 0:
        return params
    theta = np.array(learner.check(params), copy=True)
    for _ in range(epochs):
        for k in range(len(xs)):
            loss, grad = learner._loss_grad(theta, xs[k], ys[k], learner.dropout_mask(rng))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at instance {k + 1}{_ctx(context)}")
            opt.step(theta, grad)
    if not np.all(np.isfinite(theta)):
        raise TrainingError(f"non-finite parameters after training{_ctx(context)}")
    return ModelParams(theta, params.arch_tag)


def _ctx(context: str) -> str:
    return f" ({context})" if context else ""


def fedavg(models: Sequence[ModelParams]) -> ModelParams:
    """Unweighted elementwise mean, summed in the given order.

    Computed as ``first + mean(model - first)`` so averaging copies of one
    model returns it bit for bit.
    """
    if not models:
        raise AggregationError("cannot aggregate an empty model list")
    tag = models[0].arch_tag
    size = len(models[0])
    for m in models[1:]:
        if m.arch_tag != tag or len(m) != size:
            raise AggregationError(f"mixed architectures: {tag!r} vs {m.arch_tag!r}")
    if len(models) == 1:
        return models[0]
    base = models[0].values
    offset = np.zeros(size)
    for m in models[1:]:
        offset += m.values - base
    return ModelParams(base + offset / len(models), tag)


def aggregate(local_models: Mapping[str, ModelParams], members: Iterable[str]) -> ModelParams:
    """FedAvg over ``members`` in ascending device-id order."""
    ids = sorted(set(members))
    return fedavg([local_models[d] for d in ids])


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    from neighborfl.io import atomic_path

    with atomic_path(path) as tmp:
        with open(tmp, "wb") as fh:
            np.savez(fh, version=np.array(CHECKPOINT_VERSION), arch_tag=np.array(params.arch_tag),
                     values=params.values)


def load_checkpoint(path: str | Path) -> ModelParams:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ArchError(f"{path}: unsupported checkpoint version {version}")
        return ModelParams(data["values"], str(data["arch_tag"]))
