"""Checkpoints, per-link forecasts and the simulation-side forecaster."""

from __future__ import annotations

import io
import json
import logging
import os
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..network import CHANNELS, NetworkGraph, StateHistory
from .model import PARAM_NAMES, FastKernel, PredictorConfig, positional_encode, predict
from .train import Normalizer

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SPEED_CAP = 1.05  # forecasts never exceed this multiple of free-flow speed


@dataclass
class ChannelModel:
    channel: str
    params: dict
    config: PredictorConfig
    normalizer: Normalizer
    metrics: dict | None = None

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")
        self._kernel = None

    def kernel(self) -> FastKernel | None:
        if self.config.pooling != "last":
            return None
        if self._kernel is None:
            self._kernel = FastKernel(self.params, self.config, positional_encode(self.config.window,
                                                                                   self.config.embed_dim))
        return self._kernel

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Denormalised next-step predictions for (N, window) raw inputs."""
        z = self.normalizer.normalize(windows)
        return self.normalizer.denormalize(predict(self.params, z, self.config, self.kernel()))


def save_checkpoint(model: ChannelModel, path: str | os.PathLike) -> None:
    """Write parameters plus JSON metadata into one ``.npz`` archive."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "channel": model.channel,
        "config": asdict(model.config),
        "config_hash": model.config.digest(),
        "normalizer": {"mean": model.normalizer.mean, "std": model.normalizer.std},
        "metrics": model.metrics or {},
    }
    arrays = {k: model.params[k] for k in PARAM_NAMES}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | os.PathLike) -> ChannelModel:
    try:
        with np.load(Path(path)) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            params = {k: z[k].copy() for k in PARAM_NAMES}
    except (KeyError, zipfile.BadZipFile, ValueError) as exc:
        raise ValueError(f"{path}: not a predictor checkpoint ({exc})") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    cfg = PredictorConfig(**meta["config"])
    if cfg.digest() != meta["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{path}: non-finite values in {k}")
    norm = Normalizer(meta["normalizer"]["mean"], meta["normalizer"]["std"])
    return ChannelModel(meta["channel"], params, cfg, norm, meta.get("metrics"))


@dataclass(frozen=True)
class LinkForecast:
    link_id: int
    ghg_er: float
    nox_er: float
    speed: float
    fallback: tuple = ()  # channels answered by persistence
    clamped: tuple = ()  # channels whose raw output was clipped


def _clamp(channel: str, raw: np.ndarray, ffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = np.maximum(raw, 0.0)
    out = np.minimum(lo, SPEED_CAP * ffs) if channel == "speed" else lo
    return out, out != raw


def _tail(windows: np.ndarray, model: ChannelModel) -> np.ndarray:
    """The most recent ``model.config.window`` steps of each history window."""
    w = model.config.window
    if windows.shape[1] < w:
        raise ValueError(f"model window {w} exceeds the {windows.shape[1]} intervals of history kept")
    return windows[:, windows.shape[1] - w:]


def predict_link_state(models: dict, link_id: int, now: int, history: StateHistory) -> LinkForecast:
    """Next-interval forecast for one link.

    Channels without a model fall back to persistence (the last value) and
    are listed in ``fallback``; clipped outputs are listed in ``clamped``.
    """
    g = history.graph
    k = g.link_index[link_id]
    vals, fb, cl = {}, [], []
    for ch in CHANNELS:
        series = history.get_state_series(link_id, ch, now)
        m = models.get(ch) if models else None
        if m is None:
            raw = np.array([series[-1]])
            fb.append(ch)
        else:
            raw = m.predict(_tail(series[None, :], m))
        out, c = _clamp(ch, raw, g.ffs[k: k + 1])
        if c[0]:
            cl.append(ch)
        vals[ch] = float(out[0])
    return LinkForecast(int(link_id), vals["ghg_er"], vals["nox_er"], vals["speed"], tuple(fb), tuple(cl))


class Forecaster:
    """Batch next-interval forecasts for every link, used by anticipatory routing.

    A window that is constant over its whole length carries no dynamics
    (never-used link, or a zero-emission fleet); such links keep their
    constant value instead of the model's bias.
    """

    def __init__(self, models: dict):
        self.models = {ch: m for ch, m in (models or {}).items() if m is not None}
        self.calls = 0
        self.fallbacks = 0

    def available(self) -> bool:
        return bool(self.models)

    def forecast(self, history: StateHistory, now: int | None = None) -> dict | None:
        if not self.models:
            self.fallbacks += 1
            return None
        self.calls += 1
        g: NetworkGraph = history.graph
        out = {}
        for ch in CHANNELS:
            win = history.series_batch(ch, now)
            last = win[:, -1].copy()
            m = self.models.get(ch)
            if m is None:
                out[ch] = last
                continue
            win = _tail(win, m)
            const = np.all(win == win[:, :1], axis=1)
            pred = last
            live = ~const
            if live.any():
                pred = last.copy()
                pred[live] = m.predict(win[live])
            out[ch], _ = _clamp(ch, pred, g.ffs)
        return out

    def __call__(self, world, interval: int):
        return self.forecast(world.history, interval)
