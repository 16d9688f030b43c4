"""Fully connected networks trained with mini-batch Adam.

A regressor maps demand to generation (ReLU hidden layers, linear output,
MSE). A classifier maps features to independent per-label activity
probabilities (sigmoid hidden layers, elementwise sigmoid output, BCE).
Inputs, and regression targets, are z-scored on the training split.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TASKS = ('regression', 'classification')
PROB_CLAMP = 1e-12
HIDDEN_ACTIVATION = {'regression': 'relu', 'classification': 'sigmoid'}
OUTPUT_ACTIVATION = {'regression': 'linear', 'classification': 'sigmoid'}


class TrainingError(RuntimeError):
    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history = list(history or [])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


ACTIVATIONS = {
    'relu': (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(float)),
    'sigmoid': (_sigmoid, lambda z, a: a * (1.0 - a)),
    'linear': (lambda z: z, lambda z, a: np.ones_like(z)),
}


@dataclass(frozen=True)
class TrainConfig:
    task: str = 'regression'
    hidden_layers: int = 1
    hidden_width: int = 256
    epochs: int = 1000
    batch_size: int = 100
    validation_split: float = 0.20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f'unknown task {self.task!r}')
        if not 0 < self.validation_split < 1:
            raise ValueError(f'validation_split must be in (0, 1), got {self.validation_split}')
        if self.hidden_layers < 0 or self.hidden_width <= 0:
            raise ValueError('hidden_layers must be >= 0 and hidden_width > 0')
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError('epochs and batch_size must be positive')

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class MlpParams:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activations: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, 'weights', tuple(np.asarray(w, dtype=float) for w in self.weights))
        object.__setattr__(self, 'biases', tuple(np.asarray(b, dtype=float) for b in self.biases))
        object.__setattr__(self, 'activations', tuple(self.activations))
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ValueError('weights, biases and activations must have the same non-zero length')
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f'layer {i}: unknown activation {act!r}')
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f'layer {i}: weight {w.shape} and bias {b.shape} disagree')
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f'layer {i}: input width {w.shape[0]} != previous output '
                                 f'{self.weights[i - 1].shape[1]}')

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def arrays(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def with_arrays(self, arrays: list[np.ndarray]) -> 'MlpParams':
        n = len(self.weights)
        return MlpParams(tuple(arrays[:n]), tuple(arrays[n:]), self.activations)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays)


@dataclass(frozen=True)
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # features whose std was replaced by 1

    @classmethod
    def fit(cls, X: np.ndarray) -> 'ScalerStats':
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        constant = ~(std > 0)
        std = np.where(constant, 1.0, std)
        return cls(mean, std, constant)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {'mean': self.mean.tolist(), 'std': self.std.tolist(),
                'constant': self.constant.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> 'ScalerStats':
        return cls(np.array(d['mean'], dtype=float), np.array(d['std'], dtype=float),
                   np.array(d['constant'], dtype=bool))


@dataclass(frozen=True)
class TrainReport:
    train_loss: tuple[float, ...]
    val_loss: tuple[float, ...]
    wall_time: float = 0.0
    constant_features: tuple[int, ...] = ()

    @property
    def final_val_loss(self) -> float:
        return self.val_loss[-1] if self.val_loss else float('nan')


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: MlpParams) -> 'AdamState':
        return cls(tuple(np.zeros_like(a) for a in params.arrays),
                   tuple(np.zeros_like(a) for a in params.arrays), 0)


@dataclass(frozen=True)
class TrainedModel:
    params: MlpParams
    x_scaler: ScalerStats
    y_scaler: ScalerStats | None
    config: TrainConfig
    report: TrainReport = field(default_factory=lambda: TrainReport((), ()))

    @property
    def task(self) -> str:
        return self.config.task

    @property
    def input_width(self) -> int:
        return self.params.layer_sizes[0]

    @property
    def output_width(self) -> int:
        return self.params.layer_sizes[-1]


def init_params(sizes: tuple[int, ...] | list[int], task: str, rng: np.random.Generator) -> MlpParams:
    """He-uniform weights for ReLU layers, Xavier-uniform otherwise; zero biases."""
    n_layers = len(sizes) - 1
    acts = tuple([HIDDEN_ACTIVATION[task]] * (n_layers - 1) + [OUTPUT_ACTIVATION[task]])
    weights, biases = [], []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], acts):
        if act == 'relu':
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases), acts)


def _forward_pass(params: MlpParams, X: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    if X.shape[1] != params.layer_sizes[0]:
        raise ValueError(f'input width {X.shape[1]} != network input width {params.layer_sizes[0]}')
    cache = []
    a = X
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = a @ w + b
        a = ACTIVATIONS[act][0](z)
        cache.append((z, a))
    return cache


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = _forward_pass(params, np.atleast_2d(x))[-1][1]
    return out[0] if x.ndim == 1 else out


def loss(task: str, predictions: np.ndarray, targets: np.ndarray) -> float:
    """MSE or BCE averaged over samples and outputs."""
    P, Y = np.asarray(predictions, dtype=float), np.asarray(targets, dtype=float)
    if P.shape != Y.shape:
        raise ValueError(f'prediction shape {P.shape} != target shape {Y.shape}')
    if task == 'regression':
        return float(np.mean((P - Y) ** 2))
    if task == 'classification':
        P = np.clip(P, PROB_CLAMP, 1 - PROB_CLAMP)
        return float(-np.mean(Y * np.log(P) + (1 - Y) * np.log(1 - P)))
    raise ValueError(f'unknown task {task!r}')


def backprop(params: MlpParams, X: np.ndarray, Y: np.ndarray, task: str) -> MlpParams:
    """Exact gradient of `loss(task, forward(params, X), Y)`, shaped like params."""
    X, Y = np.atleast_2d(np.asarray(X, dtype=float)), np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] == 0:
        raise ValueError('empty batch')
    cache = _forward_pass(params, X)
    P = cache[-1][1]
    if P.shape != Y.shape:
        raise ValueError(f'output shape {P.shape} != target shape {Y.shape}')
    if task == 'regression':
        delta = 2.0 * (P - Y) / P.size * ACTIVATIONS[params.activations[-1]][1](cache[-1][0], P)
    elif task == 'classification':
        # sigmoid output with BCE: d loss / d z collapses to (p - y)
        if params.activations[-1] != 'sigmoid':
            raise ValueError('classification requires a sigmoid output layer')
        delta = (P - Y) / P.size
    else:
        raise ValueError(f'unknown task {task!r}')

    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        a_prev = X if i == 0 else cache[i - 1][1]
        gw[i] = a_prev.T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            z_prev, a_prev_act = cache[i - 1]
            delta = (delta @ params.weights[i].T) * ACTIVATIONS[params.activations[i - 1]][1](z_prev, a_prev_act)
    return MlpParams(tuple(gw), tuple(gb), params.activations)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState,
              config: TrainConfig) -> tuple[MlpParams, AdamState]:
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    new_arrays, ms, vs = [], [], []
    for p, g, m, v in zip(params.arrays, grads.arrays, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f'gradient shape {g.shape} != parameter shape {p.shape}')
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_arrays.append(p - config.lr * m_hat / (np.sqrt(v_hat) + config.eps_adam))
        ms.append(m)
        vs.append(v)
    return params.with_arrays(new_arrays), AdamState(tuple(ms), tuple(vs), t)


def split_rows(n: int, validation_split: float) -> int:
    """Number of leading training rows; the trailing rows are validation."""
    if n < 2:
        raise ValueError(f'need at least 2 rows to train, got {n}')
    return min(max(int(n * (1 - validation_split)), 1), n - 1)


def train(X: np.ndarray, Y: np.ndarray, config: TrainConfig) -> TrainedModel:
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f'{X.shape[0]} feature rows but {Y.shape[0]} target rows')
    n_train = split_rows(X.shape[0], config.validation_split)
    Xtr, Xval = X[:n_train], X[n_train:]
    Ytr, Yval = Y[:n_train], Y[n_train:]

    x_scaler = ScalerStats.fit(Xtr)
    if np.any(x_scaler.constant):
        log.info('%d constant input features left unscaled', int(x_scaler.constant.sum()))
    y_scaler = ScalerStats.fit(Ytr) if config.task == 'regression' else None
    Xtr, Xval = x_scaler.transform(Xtr), x_scaler.transform(Xval)
    if y_scaler is not None:
        Ytr, Yval = y_scaler.transform(Ytr), y_scaler.transform(Yval)

    batch = config.batch_size
    if batch > n_train:
        log.warning('batch size %d exceeds %d training rows; using %d', batch, n_train, n_train)
        batch = n_train

    rng = np.random.default_rng(config.seed)
    sizes = (X.shape[1],) + (config.hidden_width,) * config.hidden_layers + (Y.shape[1],)
    params = init_params(sizes, config.task, rng)
    state = AdamState.zeros_like(params)

    train_hist: list[float] = []
    val_hist: list[float] = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(n_train)
        for lo in range(0, n_train, batch):
            idx = order[lo:lo + batch]
            grads = backprop(params, Xtr[idx], Ytr[idx], config.task)
            params, state = adam_step(params, grads, state, config)
        tl = loss(config.task, forward(params, Xtr), Ytr)
        vl = loss(config.task, forward(params, Xval), Yval)
        if not (np.isfinite(tl) and np.isfinite(vl)):
            raise TrainingError(f'{config.task} loss became non-finite at epoch {epoch + 1}', train_hist)
        train_hist.append(tl)
        val_hist.append(vl)
        if (epoch + 1) % 100 == 0:
            log.debug('%s epoch %d: train %.6g val %.6g', config.task, epoch + 1, tl, vl)

    report = TrainReport(tuple(train_hist), tuple(val_hist), time.perf_counter() - start,
                         tuple(np.flatnonzero(x_scaler.constant).tolist()))
    return TrainedModel(params, x_scaler, y_scaler, config, report)


def predict(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    """Raw features in, outputs in target units (or probabilities) out."""
    X = np.asarray(X, dtype=float)
    width = X.shape[-1]
    if width != model.input_width:
        raise ValueError(f'feature width {width} != model input width {model.input_width}')
    out = forward(model.params, model.x_scaler.transform(X))
    if model.y_scaler is not None:
        out = model.y_scaler.inverse(out)
    return out


def validation_rmse(model: TrainedModel, X: np.ndarray, Y: np.ndarray) -> float:
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float).reshape(len(X), -1)
    n_train = split_rows(len(X), model.config.validation_split)
    return float(np.sqrt(np.mean((predict(model, X[n_train:]) - Y[n_train:]) ** 2)))


def depth_sweep(X: np.ndarray, Y: np.ndarray, depths=(1, 2, 3),
                config: TrainConfig | None = None) -> dict[int, float]:
    """Validation RMSE (target units) of regressors with each hidden-layer count."""
    config = config or TrainConfig()
    out = {}
    for depth in depths:
        model = train(X, Y, replace(config, hidden_layers=depth))
        out[depth] = validation_rmse(model, X, Y)
        print(f"hidden_layers={depth}: validation RMSE {out[depth]:.6g}")
    return out


def model_to_dict(model: TrainedModel) -> dict:
    p = model.params
    return {
        'schema_version': SCHEMA_VERSION,
        'task': model.task,
        'layer_sizes': list(p.layer_sizes),
        'activations': list(p.activations),
        'weights': [w.tolist() for w in p.weights],
        'biases': [b.tolist() for b in p.biases],
        'x_scaler': model.x_scaler.to_dict(),
        'y_scaler': None if model.y_scaler is None else model.y_scaler.to_dict(),
        'config': asdict(model.config),
        'config_hash': model.config.digest(),
        # wall time is left out so reruns produce identical files
        'report': {'train_loss': list(model.report.train_loss), 'val_loss': list(model.report.val_loss),
                   'constant_features': list(model.report.constant_features)},
    }


def model_from_dict(d: dict) -> TrainedModel:
    if d.get('schema_version') != SCHEMA_VERSION:
        raise ValueError(f'unsupported model schema_version {d.get("schema_version")}')
    config = TrainConfig(**d['config'])
    if d.get('config_hash') != config.digest():
        raise ValueError('model config hash does not match its config')
    params = MlpParams(tuple(np.array(w, dtype=float).reshape(a, b) for w, a, b in
                             zip(d['weights'], d['layer_sizes'][:-1], d['layer_sizes'][1:])),
                       tuple(np.array(b, dtype=float) for b in d['biases']),
                       tuple(d['activations']))
    y = d.get('y_scaler')
    rep = d.get('report', {})
    return TrainedModel(params, ScalerStats.from_dict(d['x_scaler']),
                        None if y is None else ScalerStats.from_dict(y), config,
                        TrainReport(tuple(rep.get('train_loss', ())), tuple(rep.get('val_loss', ())),
                                    0.0, tuple(rep.get('constant_features', ()))))


def save_model(model: TrainedModel, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_dict(model), sort_keys=True) + '\n')
    return path


def load_model(path: str | os.PathLike) -> TrainedModel:
    return model_from_dict(json.loads(Path(path).read_text()))
