"""Datasets, normalisation, Adam training and gradient checking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import PARAM_NAMES, FastKernel, PredictorConfig, backward, backward_last, forward, forward_last, \
    init_params, positional_encode

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass
class SeriesDataset:
    """Windows ``inputs`` (N, W), next-step ``targets`` (N,) and the time index of each target."""

    inputs: np.ndarray
    targets: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.times = np.asarray(self.times)
        if not (len(self.inputs) == len(self.targets) == len(self.times)):
            raise ValueError("inputs, targets and times must have equal length")

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, mask) -> "SeriesDataset":
        return SeriesDataset(self.inputs[mask], self.targets[mask], self.times[mask])


def windows_from_series(series, window: int) -> SeriesDataset:
    """Sliding windows over one long series; sample k predicts ``series[k + window]``."""
    s = np.asarray(series, dtype=np.float64)
    if len(s) <= window:
        raise ValueError("series shorter than window + 1")
    idx = np.arange(len(s) - window)
    inputs = np.lib.stride_tricks.sliding_window_view(s, window)[: len(idx)].copy()
    return SeriesDataset(inputs, s[window:], idx + window)


def windows_from_history(mat: np.ndarray, window: int, default: np.ndarray, min_history: int = 1) -> SeriesDataset:
    """Samples from an (intervals, links) history.

    For every link and interval t >= ``min_history`` the input is the padded
    window ending at t-1 and the target the value at t.
    """
    from ..network import pad_windows

    mat = np.asarray(mat, dtype=np.float64)
    n_t = mat.shape[0]
    xs, ys, ts = [], [], []
    for t in range(min_history, n_t):
        xs.append(pad_windows(mat[:t], window, default))
        ys.append(mat[t])
        ts.append(np.full(mat.shape[1], t))
    if not xs:
        raise ValueError("history too short for any sample")
    return SeriesDataset(np.concatenate(xs), np.concatenate(ys), np.concatenate(ts))


def chronological_split(ds: SeriesDataset, train_fraction: float = 0.8) -> tuple[SeriesDataset, SeriesDataset]:
    """Split on target time so every training time precedes every test time."""
    if len(ds) < 2:
        raise ValueError("need at least two samples")
    times = np.unique(ds.times)
    if len(times) < 2:
        raise ValueError("need at least two distinct time stamps")
    order = np.sort(ds.times)
    cut = order[min(int(np.floor(train_fraction * len(order))), len(order) - 1)]
    if cut == times[0]:
        cut = times[1]
    train = ds.times < cut
    return ds.subset(train), ds.subset(~train)


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    @classmethod
    def fit(cls, ds: SeriesDataset) -> "Normalizer":
        vals = np.concatenate([ds.inputs.ravel(), ds.targets])
        mean = float(vals.mean())
        std = float(vals.std())
        return cls(mean, max(std, STD_FLOOR * max(1.0, abs(mean))))

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


@dataclass
class TrainResult:
    params: dict
    normalizer: Normalizer
    config: PredictorConfig
    loss_history: list = field(default_factory=list)
    train_rmse: float = float("nan")
    test_rmse: float = float("nan")
    persistence_rmse: float = float("nan")
    steps: int = 0


def loss_and_grads(params, x, y, cfg: PredictorConfig, pe=None):
    """Mean squared error and its gradients for one normalised batch."""
    if cfg.pooling == "last":
        yhat, cache = forward_last(params, x, cfg, FastKernel(params, cfg, pe), return_cache=True)
        grads = backward_last(params, cache, 2.0 * (yhat - y) / len(y), cfg)
    else:
        yhat, cache = forward(params, x, cfg, pe, return_cache=True)
        grads = backward(params, cache, 2.0 * (yhat - y) / len(y), cfg)
    return float(np.mean((yhat - y) ** 2)), grads


class Adam:
    def __init__(self, params, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in PARAM_NAMES:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def predict_normalized(params, x, cfg, pe=None, batch: int = 512) -> np.ndarray:
    out = np.empty(len(x))
    kern = FastKernel(params, cfg, pe) if cfg.pooling == "last" else None
    for s in range(0, len(x), batch):
        xb = x[s: s + batch]
        out[s: s + batch] = forward_last(params, xb, cfg, kern) if kern else forward(params, xb, cfg, pe)
    return out


def rmse(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.sqrt(np.mean((a - b) ** 2))) if len(a) else float("nan")


def train(dataset: SeriesDataset, cfg: PredictorConfig, params: dict | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Fit the model with MSE, Adam and per-epoch exponential LR decay.

    The split is chronological; normalisation statistics come from the
    training part only. Shuffling inside the training part is seeded.
    Raises TrainingError as soon as the loss stops being finite.
    """
    if len(dataset) < 2:
        raise ValueError("dataset needs at least 2 samples")
    train_ds, test_ds = chronological_split(dataset, cfg.train_fraction)
    norm = Normalizer.fit(train_ds)
    xtr, ytr = norm.normalize(train_ds.inputs), norm.normalize(train_ds.targets)
    params = init_params(cfg) if params is None else params
    pe = positional_encode(cfg.window, cfg.embed_dim)
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 99])
    history = []
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(xtr))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s: s + cfg.batch_size]
            loss, grads = loss_and_grads(params, xtr[b], ytr[b], cfg, pe)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged in epoch {epoch}")
            if cfg.clip_norm:
                norm2 = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm2 > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / norm2) for k, g in grads.items()}
            opt.step(params, grads)
            total += loss * len(b)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        history.append(total / len(xtr))
        log.info("epoch %d loss %.6f lr %.2e", epoch, history[-1], opt.lr)
        opt.lr *= cfg.lr_decay
        if max_steps is not None and steps >= max_steps:
            break
    res = TrainResult(params, norm, cfg, history, steps=steps)
    res.train_rmse = rmse(norm.denormalize(predict_normalized(params, xtr, cfg, pe)), train_ds.targets)
    if len(test_ds):
        pred = norm.denormalize(predict_normalized(params, norm.normalize(test_ds.inputs), cfg, pe))
        res.test_rmse = rmse(pred, test_ds.targets)
        res.persistence_rmse = rmse(test_ds.inputs[:, -1], test_ds.targets)
    return res


def gradient_check(params, x, y, cfg: PredictorConfig, n_params: int = 120, h: float = 1e-5,
                   seed: int = 0, fast: bool | None = None, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks ``n_params`` randomly chosen scalar parameters of the MSE loss on
    the batch ``(x, y)``. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    The floor keeps exactly-zero gradients (the key bias cancels in the
    softmax) from turning difference round-off, ~1e-11, into large ratios.
    """
    fast = cfg.pooling == "last" if fast is None else fast
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    pe = positional_encode(cfg.window, cfg.embed_dim)

    def loss(pp):
        yhat = forward_last(pp, x, cfg, FastKernel(pp, cfg, pe)) if fast else forward(pp, x, cfg, pe)
        return float(np.mean((yhat - y) ** 2))

    if fast:
        yhat, cache = forward_last(params, x, cfg, FastKernel(params, cfg, pe), return_cache=True)
        grads = backward_last(params, cache, 2.0 * (yhat - y) / len(y), cfg)
    else:
        yhat, cache = forward(params, x, cfg, pe, return_cache=True)
        grads = backward(params, cache, 2.0 * (yhat - y) / len(y), cfg)
    sizes = np.array([params[k].size for k in PARAM_NAMES])
    rng = np.random.default_rng(seed)
    # every tensor is sampled at least once, the rest proportionally to size
    picks = [(k, int(rng.integers(params[k].size))) for k in PARAM_NAMES]
    flat = rng.choice(sizes.sum(), size=max(0, n_params - len(picks)), replace=False)
    bounds = np.cumsum(sizes)
    for f in flat:
        t = int(np.searchsorted(bounds, f, side="right"))
        picks.append((PARAM_NAMES[t], int(f - (bounds[t] - sizes[t]))))
    worst = 0.0
    for name, idx in picks:
        arr = params[name].reshape(-1)
        old = arr[idx]
        arr[idx] = old + h
        lp = loss(params)
        arr[idx] = old - h
        lm = loss(params)
        arr[idx] = old
        num = (lp - lm) / (2 * h)
        ana = float(grads[name].reshape(-1)[idx])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst
