"""Feature-evolution statistics and exact FLOPs accounting.

MACs are counted analytically from layer shapes (one MAC per scalar
multiply-accumulate of a dense layer; 1 MAC = 2 FLOPs), which keeps the
report exact, platform-independent, and comparable across strategies.

CSV schemas (UTF-8, LF, '.' decimal separator; '#' lines are comments):
  deltas: block_id,t,delta
  norms:  block_id,min,q1,median,q3,max,mean,std
  flops:  component,macs_per_call,calls,total_macs
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import frobenius_norm, mse
from .unet import FeatureBundle, UNetConfig, param_specs

STRATEGIES = frozenset(
    {"full", "encoder_prop", "encoder_prop_parallel", "decoder_prop", "both_prop", "alternating_drop"}
)

_STAT_KEYS = ("min", "q1", "median", "q3", "max", "mean", "std")


@dataclass(frozen=True)
class DeltaSeries:
    """Per-block mean squared feature change between adjacent timesteps.

    ``values[block][t]`` compares features at t against t - 1, so entries
    exist for t in T..2.
    """

    T: int
    block_ids: tuple[str, ...]
    values: dict[str, dict[int, float]]

    def __post_init__(self):
        for block in self.block_ids:
            for t, v in self.values[block].items():
                if v < 0.0:
                    raise ValueError(f"negative delta at block {block}, t={t}")


@dataclass(frozen=True)
class NormStats:
    """Distribution summary of per-block feature norms over all timesteps."""

    block_ids: tuple[str, ...]
    stats: dict[str, dict[str, float]]

    def __post_init__(self):
        for block in self.block_ids:
            s = self.stats[block]
            if not s["min"] <= s["q1"] <= s["median"] <= s["q3"] <= s["max"]:
                raise ValueError(f"unordered quantiles for block {block}")
            if s["std"] < 0.0:
                raise ValueError(f"negative std for block {block}")


@dataclass(frozen=True)
class FlopsReport:
    """Exact per-component MAC accounting for one (strategy, plan) pair."""

    strategy: str
    macs_encoder_per_call: int
    macs_bottleneck_per_call: int
    macs_decoder_per_call: int
    calls_encoder: int
    calls_bottleneck: int
    calls_decoder: int
    total_macs: int
    total_macs_full: int
    savings_fraction: float

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "macs_encoder_per_call": self.macs_encoder_per_call,
            "macs_bottleneck_per_call": self.macs_bottleneck_per_call,
            "macs_decoder_per_call": self.macs_decoder_per_call,
            "calls_encoder": self.calls_encoder,
            "calls_bottleneck": self.calls_bottleneck,
            "calls_decoder": self.calls_decoder,
            "total_macs": self.total_macs,
            "total_macs_full": self.total_macs_full,
            "savings_fraction": self.savings_fraction,
        }


def block_ids_for(num_stages: int) -> tuple[str, ...]:
    """Canonical block order: encoder stages, bottleneck, decoder stages."""
    return tuple(
        [f"enc{i}" for i in range(num_stages)] + ["bot"] + [f"dec{i}" for i in range(num_stages)]
    )


def _block_features(b: FeatureBundle) -> dict:
    S = len(b.enc)
    feats = {f"enc{i}": b.enc[i] for i in range(S)}
    feats["bot"] = b.bot
    feats.update({f"dec{i}": b.dec[i] for i in range(S)})
    return feats


def _check_full_trajectory(bundles) -> int:
    if not bundles:
        raise ValueError("no feature bundles given")
    T = bundles[0].t
    expected = list(range(T, 0, -1))
    got = [b.t for b in bundles]
    if got != expected:
        raise ValueError(f"bundles must cover t={T}..1 in descending order, got {got}")
    return T


def feature_delta_series(bundles) -> DeltaSeries:
    """Adjacent-step MSE per block from a full run's taps (t = T..1)."""
    T = _check_full_trajectory(bundles)
    if T < 2:
        raise ValueError("need at least two timesteps to form deltas")
    blocks = block_ids_for(len(bundles[0].enc))
    values: dict[str, dict[int, float]] = {b: {} for b in blocks}
    for later, earlier in zip(bundles, bundles[1:]):
        f_later = _block_features(later)
        f_earlier = _block_features(earlier)
        for b in blocks:
            values[b][later.t] = mse(f_later[b], f_earlier[b])
    return DeltaSeries(T=T, block_ids=blocks, values=values)


def frobenius_stats(bundles) -> NormStats:
    """min/q1/median/q3/max/mean/std of per-block feature norms over timesteps.

    Quartiles use linear interpolation between order statistics (type 7);
    std is the population standard deviation.
    """
    if len(bundles) < 2:
        raise ValueError("need at least two bundles for norm statistics")
    blocks = block_ids_for(len(bundles[0].enc))
    norms = {b: [] for b in blocks}
    for bundle in bundles:
        feats = _block_features(bundle)
        for b in blocks:
            norms[b].append(frobenius_norm(feats[b]))
    stats = {}
    for b in blocks:
        arr = np.asarray(norms[b])
        q1, med, q3 = np.percentile(arr, [25.0, 50.0, 75.0])
        stats[b] = {
            "min": float(arr.min()),
            "q1": float(q1),
            "median": float(med),
            "q3": float(q3),
            "max": float(arr.max()),
            "mean": float(arr.mean()),
            "std": float(arr.std()),
        }
    return NormStats(block_ids=blocks, stats=stats)


def component_macs(cfg: UNetConfig) -> dict[str, int]:
    """Per-call MAC counts for one latent row, split by component."""
    macs = {"encoder": 0, "bottleneck": 0, "decoder": 0}
    for name, shape in param_specs(cfg):
        if len(shape) != 2:
            continue
        n = shape[0] * shape[1]
        if name.startswith(("lift", "enc")):
            macs["encoder"] += n
        elif name.startswith("bot"):
            macs["bottleneck"] += n
        else:
            macs["decoder"] += n
    return macs


def _calls_for(strategy: str, T: int, n_keys: int) -> tuple[int, int, int]:
    n_non = T - n_keys
    if strategy == "full":
        return T, T, T
    if strategy in ("encoder_prop", "encoder_prop_parallel"):
        return n_keys, n_keys, T
    if strategy == "decoder_prop":
        return T, T, n_keys
    if strategy == "both_prop":
        return n_keys, n_keys, n_keys
    if strategy == "alternating_drop":
        enc_only = (n_non + 1) // 2
        dec_only = n_non // 2
        return n_keys + enc_only, n_keys + enc_only, n_keys + dec_only
    raise ValueError(f"unknown strategy {strategy!r}")


def flops_report(cfg: UNetConfig, plan, strategy) -> FlopsReport:
    """Exact MAC totals and savings versus the full baseline."""
    strategy = str(getattr(strategy, "value", strategy))
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    macs = component_macs(cfg)
    per_step_full = macs["encoder"] + macs["bottleneck"] + macs["decoder"]
    total_full = plan.T * per_step_full
    ce, cb, cd = _calls_for(strategy, plan.T, len(plan.key_steps))
    total = ce * macs["encoder"] + cb * macs["bottleneck"] + cd * macs["decoder"]
    return FlopsReport(
        strategy=strategy,
        macs_encoder_per_call=macs["encoder"],
        macs_bottleneck_per_call=macs["bottleneck"],
        macs_decoder_per_call=macs["decoder"],
        calls_encoder=ce,
        calls_bottleneck=cb,
        calls_decoder=cd,
        total_macs=total,
        total_macs_full=total_full,
        savings_fraction=1.0 - total / total_full,
    )


def _fmt(v: float) -> str:
    return format(v, ".17g")


def export_csv(report, path: str):
    """Write a DeltaSeries, NormStats, or FlopsReport to its CSV schema.

    Rows are ordered block-id first (canonical network order), then
    timestep descending, so repeated exports are byte-identical.
    """
    lines: list[str] = []
    if isinstance(report, DeltaSeries):
        lines.append("block_id,t,delta")
        for b in report.block_ids:
            for t in sorted(report.values[b], reverse=True):
                lines.append(f"{b},{t},{_fmt(report.values[b][t])}")
    elif isinstance(report, NormStats):
        lines.append("# quartiles: linear interpolation between order statistics (type 7); std: population (ddof=0)")
        lines.append("block_id,min,q1,median,q3,max,mean,std")
        for b in report.block_ids:
            s = report.stats[b]
            lines.append(b + "," + ",".join(_fmt(s[k]) for k in _STAT_KEYS))
    elif isinstance(report, FlopsReport):
        lines.append("# 1 MAC = 2 FLOPs; per-call counts are for one latent row")
        lines.append(
            f"# strategy={report.strategy} total_macs={report.total_macs}"
            f" total_macs_full={report.total_macs_full}"
            f" savings_fraction={_fmt(report.savings_fraction)}"
        )
        lines.append("component,macs_per_call,calls,total_macs")
        for comp, per_call, calls in (
            ("encoder", report.macs_encoder_per_call, report.calls_encoder),
            ("bottleneck", report.macs_bottleneck_per_call, report.calls_bottleneck),
            ("decoder", report.macs_decoder_per_call, report.calls_decoder),
        ):
            lines.append(f"{comp},{per_call},{calls},{per_call * calls}")
    else:
        raise TypeError(f"cannot export {type(report).__name__} to CSV")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise OSError(f"failed to write CSV to {path}: {e}") from e


def read_delta_series_csv(path: str) -> DeltaSeries:
    """Parse a deltas CSV back into a DeltaSeries (inverse of export_csv)."""
    values: dict[str, dict[int, float]] = {}
    blocks: list[str] = []
    with open(path, encoding="utf-8") as f:
        rows = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    if not rows or rows[0] != "block_id,t,delta":
        raise ValueError(f"{path} is not a deltas CSV")
    for row in rows[1:]:
        b, t, d = row.split(",")
        if b not in values:
            values[b] = {}
            blocks.append(b)
        values[b][int(t)] = float(d)
    T = max((max(ts) for ts in values.values()), default=1)
    return DeltaSeries(T=T, block_ids=tuple(blocks), values=values)
