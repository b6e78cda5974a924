"""Split denoiser: encoder with per-stage skip taps, bottleneck, decoder.

The decoder never sees the latent; its only inputs are cached encoder
features, the time embedding, and the weights. That independence is what
lets a sampler reuse one encoder pass for several decode calls and run
the decodes concurrently.

Layout: stage widths shrink through the encoder (each block's weight
matrix does the down-projection) and mirror back up through the decoder,
whose blocks consume ``[skip || upstream]`` concatenations. All tensors
follow the row-vector convention: activations are (n, width) with n
latents per row.

Checkpoints are JSON with the config header first and flat weight arrays
listed under ``field_order`` in declaration order:
lift.w, lift.b, enc{i}.w/.b/.t, bot.w/.b/.t, dec{i}.w/.b/.t, head.w, head.b.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule
from .tensor_core import ShapeError, Tensor, _silu_raw, _wrap, _wrap_trusted

CHECKPOINT_FORMAT = "encprop-checkpoint-v1"


@dataclass(frozen=True)
class UNetConfig:
    data_dim: int = 2
    stage_widths: tuple[int, ...] = (64, 32, 16)
    bottleneck_width: int = 16
    time_embed_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if len(self.stage_widths) < 2:
            raise ValueError("need at least 2 encoder stages")
        if any(w < 2 for w in self.stage_widths) or self.bottleneck_width < 2:
            raise ValueError("all widths must be >= 2")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be a positive even integer")
        if self.data_dim < 1:
            raise ValueError("data_dim must be >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    def to_dict(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "stage_widths": list(self.stage_widths),
            "bottleneck_width": self.bottleneck_width,
            "time_embed_dim": self.time_embed_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(
            data_dim=d["data_dim"],
            stage_widths=tuple(d["stage_widths"]),
            bottleneck_width=d["bottleneck_width"],
            time_embed_dim=d["time_embed_dim"],
            seed=d.get("seed", 0),
        )


def param_specs(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """(name, shape) for every weight in declaration order.

    Weight matrices are (in_width, out_width) for the row-vector
    convention; ``*.t`` entries project the time embedding into a block.
    """
    widths = cfg.stage_widths
    ted = cfg.time_embed_dim
    specs: list[tuple[str, tuple[int, ...]]] = [
        ("lift.w", (cfg.data_dim, widths[0])),
        ("lift.b", (widths[0],)),
    ]
    prev = widths[0]
    for i, w in enumerate(widths):
        specs += [(f"enc{i}.w", (prev, w)), (f"enc{i}.b", (w,)), (f"enc{i}.t", (ted, w))]
        prev = w
    bw = cfg.bottleneck_width
    specs += [("bot.w", (widths[-1], bw)), ("bot.b", (bw,)), ("bot.t", (ted, bw))]
    inc = bw
    for i in range(cfg.num_stages):
        w = widths[cfg.num_stages - 1 - i]
        specs += [(f"dec{i}.w", (w + inc, w)), (f"dec{i}.b", (w,)), (f"dec{i}.t", (ted, w))]
        inc = w
    specs += [("head.w", (widths[0], cfg.data_dim)), ("head.b", (cfg.data_dim,))]
    return specs


@dataclass(frozen=True)
class UNetParams:
    cfg: UNetConfig
    weights: dict[str, Tensor]

    def __post_init__(self):
        expected = param_specs(self.cfg)
        if [n for n, _ in expected] != list(self.weights):
            raise ValueError("weights do not match the declared parameter order")
        for name, shape in expected:
            if self.weights[name].shape != shape:
                raise ValueError(
                    f"weight {name} has shape {self.weights[name].shape}, expected {shape}"
                )

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]


@dataclass(frozen=True)
class EncoderCache:
    """Skip and bottleneck features captured at one encoder evaluation."""

    source_key_t: int | None
    skips: tuple[Tensor, ...]
    bot: Tensor


@dataclass(frozen=True)
class FeatureBundle:
    """All per-block taps of one full network evaluation."""

    t: int
    enc: tuple[Tensor, ...]
    bot: Tensor
    dec: tuple[Tensor, ...]
    eps: Tensor


def init_params(cfg: UNetConfig) -> UNetParams:
    """Glorot-uniform matrices, zero biases, drawn in declaration order."""
    rng = np.random.default_rng(cfg.seed)
    weights: dict[str, Tensor] = {}
    for name, shape in param_specs(cfg):
        if len(shape) == 2:
            fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            weights[name] = _wrap(rng.uniform(-bound, bound, size=shape))
        else:
            weights[name] = _wrap(np.zeros(shape))
    return UNetParams(cfg=cfg, weights=weights)


def parameter_counts(cfg: UNetConfig) -> dict[str, int]:
    """Scalar parameter totals split by component."""
    counts = {"encoder": 0, "bottleneck": 0, "decoder": 0}
    for name, shape in param_specs(cfg):
        n = int(np.prod(shape))
        if name.startswith(("lift", "enc")):
            counts["encoder"] += n
        elif name.startswith("bot"):
            counts["bottleneck"] += n
        else:
            counts["decoder"] += n
    counts["total"] = sum(counts.values())
    return counts


def time_embedding(t: int, dim: int, T: int) -> Tensor:
    """Sinusoidal embedding row: pairs (sin(t*w_k), cos(t*w_k)), w_k = 10000^(-2k/dim)."""
    if not 1 <= t <= T:
        raise ValueError(f"timestep {t} out of range 1..{T}")
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be positive and even, got {dim}")
    vals = np.empty(dim, dtype=np.float64)
    for k in range(dim // 2):
        omega = 10000.0 ** (-2.0 * k / dim)
        vals[2 * k] = math.sin(t * omega)
        vals[2 * k + 1] = math.cos(t * omega)
    return _wrap(vals.reshape(1, dim))


def _check_temb(t_emb: Tensor, cfg: UNetConfig, n_rows: int):
    if len(t_emb.shape) != 2 or t_emb.shape[1] != cfg.time_embed_dim:
        raise ShapeError(
            f"time embedding shape {t_emb.shape} incompatible with dim {cfg.time_embed_dim}"
        )
    if t_emb.shape[0] not in (1, n_rows):
        raise ShapeError(f"time embedding rows {t_emb.shape[0]} do not match batch {n_rows}")


def _block(h: np.ndarray, t_emb: np.ndarray, p: UNetParams, prefix: str) -> np.ndarray:
    """silu(h @ W + b + t_emb @ U) with row-broadcast bias and time terms.

    Layer products go through numpy's matmul: one deterministic call per
    layer keeps the per-step Python overhead small enough for the thread
    pool to pay off, and repeated evaluation of the same inputs is still
    bit-identical, which is all the sampler equivalences rely on.
    """
    lin = h @ p.weights[f"{prefix}.w"].data
    lin += p.weights[f"{prefix}.b"].data
    lin += t_emb @ p.weights[f"{prefix}.t"].data
    return _silu_raw(lin)


def encode(z: Tensor, t_emb: Tensor, p: UNetParams, t: int | None = None) -> EncoderCache:
    """Run the encoder stages and bottleneck; returns the cacheable features."""
    cfg = p.cfg
    if len(z.shape) != 2 or z.shape[1] != cfg.data_dim:
        raise ShapeError(f"latent shape {z.shape} incompatible with data_dim {cfg.data_dim}")
    _check_temb(t_emb, cfg, z.shape[0])
    te = t_emb.data
    h = z.data @ p.weights["lift.w"].data
    h += p.weights["lift.b"].data
    skips = []
    for i in range(cfg.num_stages):
        h = _block(h, te, p, f"enc{i}")
        skips.append(_wrap_trusted(h))
    bot = _block(h, te, p, "bot")
    return EncoderCache(source_key_t=t, skips=tuple(skips), bot=_wrap_trusted(bot))


def decode(cache: EncoderCache, t_emb: Tensor, p: UNetParams) -> tuple[Tensor, tuple[Tensor, ...]]:
    """Predict noise from cached encoder features; never reads a latent.

    Each stage applies its (skip_width + upstream_width, out) matrix to the
    ``[skip || upstream]`` concatenation; the product is evaluated as two
    row-block matmuls of the same stored matrix, which avoids materializing
    the concatenation on every call.
    """
    cfg = p.cfg
    _check_temb(t_emb, cfg, cache.bot.shape[0])
    te = t_emb.data
    h = cache.bot.data
    feats = []
    for i in range(cfg.num_stages):
        skip = cache.skips[cfg.num_stages - 1 - i].data
        w_all = p.weights[f"dec{i}.w"].data
        brow = te @ p.weights[f"dec{i}.t"].data
        brow += p.weights[f"dec{i}.b"].data
        lin = skip @ w_all[: skip.shape[1]]
        lin += h @ w_all[skip.shape[1] :]
        lin += brow
        h = _silu_raw(lin)
        feats.append(_wrap_trusted(h))
    eps = h @ p.weights["head.w"].data
    eps += p.weights["head.b"].data
    return _wrap_trusted(eps), tuple(feats)


def forward(z: Tensor, t: int, p: UNetParams, s: NoiseSchedule) -> FeatureBundle:
    """One full evaluation with every per-block tap recorded."""
    t_emb = time_embedding(t, p.cfg.time_embed_dim, s.T)
    cache = encode(z, t_emb, p, t)
    eps, dec_feats = decode(cache, t_emb, p)
    return FeatureBundle(t=t, enc=cache.skips, bot=cache.bot, dec=dec_feats, eps=eps)


def save_params(p: UNetParams, path: str):
    names = [n for n, _ in param_specs(p.cfg)]
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": p.cfg.to_dict(),
        "field_order": names,
        "weights": {n: p.weights[n].data.reshape(-1).tolist() for n in names},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def load_params(path: str) -> UNetParams:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {path}")
    cfg = UNetConfig.from_dict(payload["config"])
    weights = {}
    for name, shape in param_specs(cfg):
        flat = np.asarray(payload["weights"][name], dtype=np.float64)
        weights[name] = _wrap(flat.reshape(shape))
    return UNetParams(cfg=cfg, weights=weights)
