"""Noise-prediction training for the toy denoiser, plus the sample-quality metric.

Gradients are hand-derived reverse-mode through the fixed dense/silu/concat
graph; a finite-difference check in the test suite gates their correctness.
All randomness (noise draws, timestep draws, batch indices) flows from
generators the caller seeds, so training runs are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .schedule import NoiseSchedule
from .tensor_core import Tensor, _wrap
from .unet import UNetConfig, UNetParams, param_specs, time_embedding

DATASET_KINDS = ("gmm8", "swissroll", "checker")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class ToyDataset:
    kind: str
    points: np.ndarray
    seed: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError("dataset points must be a 2-D array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("dataset contains non-finite points")
        pts = np.ascontiguousarray(pts)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("learning_rate and adam_eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")


def make_toy_dataset(kind: str, n: int, seed: int) -> ToyDataset:
    """Deterministic 2-D sample sets: 8-mode ring, swiss roll, or checkerboard."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "gmm8":
        angles = rng.integers(0, 8, n) * (2.0 * math.pi / 8.0)
        centers = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        pts = centers + 0.1 * rng.standard_normal((n, 2))
    elif kind == "swissroll":
        theta = 1.5 * math.pi * (1.0 + 2.0 * rng.uniform(0.0, 1.0, n))
        radius = theta / (4.5 * math.pi)
        pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
        pts += 0.02 * rng.standard_normal((n, 2))
    elif kind == "checker":
        x = rng.uniform(-2.0, 2.0, n)
        y = rng.uniform(0.0, 1.0, n) + np.floor(x) % 2
        pts = np.stack([x / 2.0, (y % 2.0) - 1.0], axis=1)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return ToyDataset(kind=kind, points=pts, seed=seed)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _dsilu(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _embedding_table(T: int, dim: int) -> np.ndarray:
    return np.concatenate([time_embedding(t, dim, T).data for t in range(1, T + 1)], axis=0)


def _forward_batch(cfg: UNetConfig, w: dict[str, np.ndarray], z: np.ndarray, temb: np.ndarray):
    """Batched network evaluation caching everything backprop needs."""
    S = cfg.num_stages
    h = z @ w["lift.w"] + w["lift.b"]
    enc_in, enc_pre, enc_out = [], [], []
    for i in range(S):
        enc_in.append(h)
        a = h @ w[f"enc{i}.w"] + w[f"enc{i}.b"] + temb @ w[f"enc{i}.t"]
        enc_pre.append(a)
        h = a * _sigmoid(a)
        enc_out.append(h)
    bot_pre = h @ w["bot.w"] + w["bot.b"] + temb @ w["bot.t"]
    bot_out = bot_pre * _sigmoid(bot_pre)
    h = bot_out
    dec_in, dec_pre = [], []
    for i in range(S):
        inp = np.concatenate([enc_out[S - 1 - i], h], axis=1)
        dec_in.append(inp)
        a = inp @ w[f"dec{i}.w"] + w[f"dec{i}.b"] + temb @ w[f"dec{i}.t"]
        dec_pre.append(a)
        h = a * _sigmoid(a)
    eps_hat = h @ w["head.w"] + w["head.b"]
    cache = {
        "z": z,
        "temb": temb,
        "enc_in": enc_in,
        "enc_pre": enc_pre,
        "enc_out": enc_out,
        "bot_pre": bot_pre,
        "dec_in": dec_in,
        "dec_pre": dec_pre,
        "head_in": h,
    }
    return eps_hat, cache


def _backward_batch(cfg: UNetConfig, w: dict[str, np.ndarray], cache: dict, g_eps: np.ndarray):
    """Reverse-mode pass; returns gradients keyed like the parameters."""
    S = cfg.num_stages
    temb = cache["temb"]
    grads: dict[str, np.ndarray] = {}

    grads["head.w"] = cache["head_in"].T @ g_eps
    grads["head.b"] = g_eps.sum(axis=0)
    g = g_eps @ w["head.w"].T

    skip_grads = [None] * S
    for i in range(S - 1, -1, -1):
        da = g * _dsilu(cache["dec_pre"][i])
        grads[f"dec{i}.w"] = cache["dec_in"][i].T @ da
        grads[f"dec{i}.b"] = da.sum(axis=0)
        grads[f"dec{i}.t"] = temb.T @ da
        g_in = da @ w[f"dec{i}.w"].T
        skip_w = cfg.stage_widths[S - 1 - i]
        skip_grads[S - 1 - i] = g_in[:, :skip_w]
        g = g_in[:, skip_w:]

    da = g * _dsilu(cache["bot_pre"])
    grads["bot.w"] = cache["enc_out"][S - 1].T @ da
    grads["bot.b"] = da.sum(axis=0)
    grads["bot.t"] = temb.T @ da
    g = da @ w["bot.w"].T

    for i in range(S - 1, -1, -1):
        g_total = g + skip_grads[i]
        da = g_total * _dsilu(cache["enc_pre"][i])
        grads[f"enc{i}.w"] = cache["enc_in"][i].T @ da
        grads[f"enc{i}.b"] = da.sum(axis=0)
        grads[f"enc{i}.t"] = temb.T @ da
        g = da @ w[f"enc{i}.w"].T

    grads["lift.w"] = cache["z"].T @ g
    grads["lift.b"] = g.sum(axis=0)
    return grads


def _loss_and_grads_arrays(
    cfg: UNetConfig,
    w: dict[str, np.ndarray],
    batch: np.ndarray,
    s: NoiseSchedule,
    rng: np.random.Generator,
    emb_table: np.ndarray,
):
    B = batch.shape[0]
    t = rng.integers(1, s.T + 1, B)
    eps = rng.standard_normal((B, cfg.data_dim))
    abar = np.asarray(s.alpha_bar)[t - 1][:, None]
    z_t = np.sqrt(abar) * batch + np.sqrt(1.0 - abar) * eps
    temb = emb_table[t - 1]
    eps_hat, cache = _forward_batch(cfg, w, z_t, temb)
    resid = eps_hat - eps
    loss = float(np.sum(resid * resid) / B)
    grads = _backward_batch(cfg, w, cache, 2.0 * resid / B)
    return loss, grads


def loss_and_grads(p: UNetParams, batch, s: NoiseSchedule, rng: np.random.Generator):
    """Mean squared noise-prediction error over a batch plus its gradients.

    Per example, a timestep is drawn uniformly from 1..T and a standard
    normal noise target from ``rng`` (timesteps first, then noise); the
    loss is the batch mean of the squared prediction error summed over
    coordinates.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("batch must be a nonempty (n, data_dim) array")
    if batch.shape[1] != p.cfg.data_dim:
        raise ValueError(f"batch width {batch.shape[1]} != data_dim {p.cfg.data_dim}")
    w = {name: p.weights[name].data for name, _ in param_specs(p.cfg)}
    emb = _embedding_table(s.T, p.cfg.time_embed_dim)
    return _loss_and_grads_arrays(p.cfg, w, batch, s, rng, emb)


def train(p: UNetParams, ds: ToyDataset, tc: TrainConfig, s: NoiseSchedule):
    """Adam on the noise-prediction objective; returns (params, loss curve).

    The loss curve is a list of (step, loss) pairs, one per step, suitable
    for the ``step,loss`` CSV.
    """
    if ds.points.shape[1] != p.cfg.data_dim:
        raise ValueError("dataset dimensionality does not match the model")
    if tc.steps == 0:
        return p, []
    names = [name for name, _ in param_specs(p.cfg)]
    w = {name: np.array(p.weights[name].data) for name in names}
    m = {name: np.zeros_like(w[name]) for name in names}
    v = {name: np.zeros_like(w[name]) for name in names}
    rng = np.random.default_rng(tc.seed)
    emb = _embedding_table(s.T, p.cfg.time_embed_dim)
    n = ds.points.shape[0]
    losses: list[tuple[int, float]] = []
    with threadpool_limits(limits=1):
        for step in range(1, tc.steps + 1):
            idx = rng.integers(0, n, tc.batch_size)
            loss, grads = _loss_and_grads_arrays(p.cfg, w, ds.points[idx], s, rng, emb)
            if not math.isfinite(loss):
                raise TrainingDiverged(step)
            b1c = 1.0 - tc.beta1**step
            b2c = 1.0 - tc.beta2**step
            for name in names:
                g = grads[name]
                m[name] = tc.beta1 * m[name] + (1.0 - tc.beta1) * g
                v[name] = tc.beta2 * v[name] + (1.0 - tc.beta2) * (g * g)
                w[name] -= tc.learning_rate * (m[name] / b1c) / (np.sqrt(v[name] / b2c) + tc.adam_eps)
            losses.append((step, loss))
    weights = {name: _wrap(w[name]) for name in names}
    return UNetParams(cfg=p.cfg, weights=weights), losses


def _as_points(x) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("point set must be a nonempty (n, d) array")
    return pts


def _mean_pairwise(x: np.ndarray, y: np.ndarray) -> float:
    total = 0.0
    rows = max(1, 4_000_000 // max(1, y.shape[0]))
    for i in range(0, x.shape[0], rows):
        diff = x[i : i + rows, None, :] - y[None, :, :]
        total += float(np.sqrt(np.sum(diff * diff, axis=-1)).sum())
    return total / (x.shape[0] * y.shape[0])


def energy_distance(a, b) -> float:
    """2 E|x - y| - E|x - x'| - E|y - y'| over all index pairs (self included).

    The all-pairs population form makes energy_distance(a, a) exactly zero
    and keeps the statistic nonnegative. Cost is quadratic in set size.
    """
    xa, xb = _as_points(a), _as_points(b)
    return 2.0 * _mean_pairwise(xa, xb) - _mean_pairwise(xa, xa) - _mean_pairwise(xb, xb)
