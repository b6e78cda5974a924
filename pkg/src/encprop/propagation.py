"""Key/non-key timestep planning and the sampler family built on it.

A plan splits the reverse trajectory {T..1} into key steps, where the
encoder runs, and non-key steps, where the decoder reuses the features
cached at the governing key step. Because the decoder never reads the
current latent, every noise prediction of one key-run is known as soon
as the run's encoder pass finishes; the parallel sampler exploits that
by decoding a whole run across a worker pool while the latent update
remains a cheap sequential scan.

Strategies:
  full                  -- encoder + decoder at every step (baseline)
  encoder_prop          -- encoder at key steps only, decoder everywhere
  encoder_prop_parallel -- same math, per-run decodes fanned out to workers
  decoder_prop          -- decoder at key steps only; non-key steps reuse
                           the previous noise prediction (encoder still runs
                           so analysis taps stay available)
  both_prop             -- non-key steps reuse the previous prediction with
                           no network evaluation at all
  alternating_drop      -- non-key steps alternate encoder-only and
                           decoder-only evaluations; this is a documented
                           interpretation of an ablation whose step rule is
                           only depicted, never written out, and it is
                           excluded from the acceptance suite
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis
from .schedule import NoiseSchedule, ddim_step, inject_prior_noise
from .tensor_core import ShapeError, Tensor, _wrap_trusted
from .unet import EncoderCache, FeatureBundle, UNetParams, decode, encode, time_embedding

# The non-uniform key set used as the default plan for T=50.
DEFAULT_KEY_STEPS = (50, 49, 48, 47, 45, 40, 35, 25, 15)


class Strategy(str, Enum):
    FULL = "full"
    ENCODER_PROP = "encoder_prop"
    ENCODER_PROP_PARALLEL = "encoder_prop_parallel"
    DECODER_PROP = "decoder_prop"
    BOTH_PROP = "both_prop"
    ALTERNATING_DROP = "alternating_drop"


@dataclass(frozen=True)
class PropagationPlan:
    """Ordered timesteps split into key steps and governed non-key steps."""

    T: int
    key_steps: tuple[int, ...]
    _key_set: frozenset = field(init=False, repr=False, compare=False)
    _key_of: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "key_steps", tuple(int(k) for k in self.key_steps))
        ks = self.key_steps
        if self.T < 1:
            raise ValueError(f"plan needs T >= 1, got {self.T}")
        if not ks or ks[0] != self.T:
            raise ValueError(f"key_steps must start at T={self.T}, got {ks[:1]}")
        for a, b in zip(ks, ks[1:]):
            if b >= a:
                raise ValueError("key_steps must be strictly decreasing")
        if ks[-1] < 1:
            raise ValueError("key_steps must lie in 1..T")
        key_set = frozenset(ks)
        key_of: dict[int, int] = {}
        current = ks[0]
        for t in range(self.T, 0, -1):
            if t in key_set:
                current = t
            else:
                key_of[t] = current
        object.__setattr__(self, "_key_set", key_set)
        object.__setattr__(self, "_key_of", key_of)

    def is_key(self, t: int) -> bool:
        return t in self._key_set

    def key_of(self, t: int) -> int:
        """Governing key step (nearest key strictly greater) for a non-key t."""
        if t not in self._key_of:
            raise ValueError(f"{t} is a key step or out of range 1..{self.T}")
        return self._key_of[t]

    @property
    def non_key_steps(self) -> tuple[int, ...]:
        key_set = set(self.key_steps)
        return tuple(t for t in range(self.T, 0, -1) if t not in key_set)

    def runs(self) -> list[tuple[int, list[int]]]:
        """(key step, its governed non-key steps in descending order), per run."""
        out = []
        for k in self.key_steps:
            out.append((k, [t for t, g in self._key_of.items() if g == k]))
        for _, governed in out:
            governed.sort(reverse=True)
        return out

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "key_steps": list(self.key_steps)})

    @classmethod
    def from_json(cls, text: str) -> "PropagationPlan":
        obj = json.loads(text)
        return cls(T=obj["T"], key_steps=tuple(obj["key_steps"]))


def uniform_plan(T: int, stride: int) -> PropagationPlan:
    """Key steps at {T, T-stride, T-2*stride, ...} down to 1."""
    if T < 2:
        raise ValueError(f"uniform_plan needs T >= 2, got {T}")
    if stride < 2:
        raise ValueError(f"stride must be >= 2 (stride 1 is the full strategy), got {stride}")
    return PropagationPlan(T=T, key_steps=tuple(range(T, 0, -stride)))


def nonuniform_plan(T: int, keys) -> PropagationPlan:
    """Plan with an explicit key set; must contain T, lie in 1..T, no duplicates."""
    keys = [int(k) for k in keys]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate key steps")
    if any(not 1 <= k <= T for k in keys):
        raise ValueError(f"key steps must lie in 1..{T}")
    if T not in keys:
        raise ValueError(f"key steps must include T={T}")
    return PropagationPlan(T=T, key_steps=tuple(sorted(keys, reverse=True)))


def suggest_plan(deltas: "analysis.DeltaSeries", budget: int) -> PropagationPlan:
    """Greedy key selection from measured encoder feature change.

    Always keeps T, then repeatedly adds the unselected step whose summed
    encoder delta is largest, larger t winning ties, until the budget is
    spent. Step 1 has no measured delta and scores zero.
    """
    T = deltas.T
    if not 1 <= budget <= T:
        raise ValueError(f"budget must lie in 1..{T}, got {budget}")
    enc_blocks = [b for b in deltas.block_ids if b.startswith("enc")]
    scores = {t: sum(deltas.values[b][t] for b in enc_blocks) for t in range(2, T + 1)}
    scores[1] = 0.0
    candidates = sorted((t for t in range(1, T)), key=lambda t: (-scores[t], -t))
    keys = [T] + candidates[: budget - 1]
    return PropagationPlan(T=T, key_steps=tuple(sorted(keys, reverse=True)))


@dataclass(frozen=True)
class SampleRun:
    """Everything one sampling run produced, plus its accounting."""

    z0: Tensor
    strategy: Strategy
    plan: PropagationPlan
    encoder_calls: int
    decoder_calls: int
    timings_ns: dict[str, int]
    flops: "analysis.FlopsReport"
    trajectory: tuple[Tensor, ...] | None = None
    bundles: tuple[FeatureBundle, ...] | None = None
    eps_by_t: dict[int, Tensor] | None = None


class _Counters:
    __slots__ = ("enc", "dec", "enc_ns", "dec_ns", "scan_ns")

    def __init__(self):
        self.enc = 0
        self.dec = 0
        self.enc_ns = 0
        self.dec_ns = 0
        self.scan_ns = 0


def _timed_encode(z, t_emb, p, t, c: _Counters) -> EncoderCache:
    t0 = time.perf_counter_ns()
    cache = encode(z, t_emb, p, t)
    c.enc_ns += time.perf_counter_ns() - t0
    c.enc += 1
    return cache


def _timed_decode(cache, t_emb, p, c: _Counters):
    t0 = time.perf_counter_ns()
    out = decode(cache, t_emb, p)
    c.dec_ns += time.perf_counter_ns() - t0
    c.dec += 1
    return out


def sample(
    strategy: Strategy | str,
    plan: PropagationPlan,
    z_T: Tensor,
    p: UNetParams,
    s: NoiseSchedule,
    inject: tuple[float, int] | None = None,
    workers: int = 1,
    record_trajectory: bool = False,
    record_bundles: bool = False,
    record_eps: bool = False,
) -> SampleRun:
    """Run the reverse process T..1 under one strategy.

    ``z_T`` is a (n, data_dim) batch of start latents; every latent in the
    batch advances together. ``inject`` is an (alpha, tau) pair enabling
    prior-noise injection after each update. ``workers`` only affects
    encoder_prop_parallel.
    """
    strategy = Strategy(strategy)
    if plan.T != s.T:
        raise ValueError(f"plan T={plan.T} does not match schedule T={s.T}")
    if len(z_T.shape) != 2 or z_T.shape[1] != p.cfg.data_dim:
        raise ShapeError(f"z_T shape {z_T.shape} incompatible with data_dim {p.cfg.data_dim}")
    if record_bundles and strategy is not Strategy.FULL:
        raise ValueError("feature bundles are recorded for the full strategy only")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")

    ted = p.cfg.time_embed_dim
    c = _Counters()
    total_t0 = time.perf_counter_ns()
    z = z_T
    z_start = z_T
    trajectory = [z] if record_trajectory else None
    bundles: list[FeatureBundle] = []
    eps_by_t: dict[int, Tensor] = {}

    def advance(z_cur: Tensor, eps: Tensor, t: int) -> Tensor:
        t0 = time.perf_counter_ns()
        z_next = ddim_step(z_cur, eps, t, t - 1, s)
        if inject is not None:
            alpha, tau = inject
            z_next = inject_prior_noise(z_next, z_start, t - 1, alpha, tau)
        c.scan_ns += time.perf_counter_ns() - t0
        if record_trajectory:
            trajectory.append(z_next)
        if record_eps:
            eps_by_t[t] = eps
        return z_next

    # Desk-scale layers are below the size where BLAS threading pays for
    # itself; pinning the pools to one thread keeps strategy timings
    # comparable and stops oversubscription against the decode workers.
    with threadpool_limits(limits=1):
        if strategy is Strategy.FULL:
            for t in range(s.T, 0, -1):
                t_emb = time_embedding(t, ted, s.T)
                cache = _timed_encode(z, t_emb, p, t, c)
                eps, dec_feats = _timed_decode(cache, t_emb, p, c)
                if record_bundles:
                    bundles.append(
                        FeatureBundle(t=t, enc=cache.skips, bot=cache.bot, dec=dec_feats, eps=eps)
                    )
                z = advance(z, eps, t)

        elif strategy is Strategy.ENCODER_PROP:
            cache = None
            for t in range(s.T, 0, -1):
                t_emb = time_embedding(t, ted, s.T)
                if plan.is_key(t):
                    cache = _timed_encode(z, t_emb, p, t, c)
                eps, _ = _timed_decode(cache, t_emb, p, c)
                z = advance(z, eps, t)

        elif strategy is Strategy.ENCODER_PROP_PARALLEL:
            pool = _worker_pool(workers) if workers > 1 else None
            for key_t, governed in plan.runs():
                run_steps = [key_t] + governed
                t_emb_key = time_embedding(key_t, ted, s.T)
                cache = _timed_encode(z, t_emb_key, p, key_t, c)
                eps_slots = _decode_run(cache, run_steps, p, s.T, pool, workers, c)
                for t in run_steps:
                    z = advance(z, eps_slots[t], t)

        elif strategy is Strategy.DECODER_PROP:
            prev_eps = None
            for t in range(s.T, 0, -1):
                t_emb = time_embedding(t, ted, s.T)
                cache = _timed_encode(z, t_emb, p, t, c)
                if plan.is_key(t):
                    prev_eps, _ = _timed_decode(cache, t_emb, p, c)
                z = advance(z, prev_eps, t)

        elif strategy is Strategy.BOTH_PROP:
            prev_eps = None
            for t in range(s.T, 0, -1):
                if plan.is_key(t):
                    t_emb = time_embedding(t, ted, s.T)
                    cache = _timed_encode(z, t_emb, p, t, c)
                    prev_eps, _ = _timed_decode(cache, t_emb, p, c)
                z = advance(z, prev_eps, t)

        elif strategy is Strategy.ALTERNATING_DROP:
            prev_eps = None
            cache = None
            nk_index = 0
            for t in range(s.T, 0, -1):
                t_emb = time_embedding(t, ted, s.T)
                if plan.is_key(t):
                    cache = _timed_encode(z, t_emb, p, t, c)
                    prev_eps, _ = _timed_decode(cache, t_emb, p, c)
                elif nk_index % 2 == 0:
                    cache = _timed_encode(z, t_emb, p, t, c)
                    nk_index += 1
                else:
                    prev_eps, _ = _timed_decode(cache, t_emb, p, c)
                    nk_index += 1
                z = advance(z, prev_eps, t)

    total_ns = time.perf_counter_ns() - total_t0
    report = analysis.flops_report(p.cfg, plan, strategy.value)
    return SampleRun(
        z0=z,
        strategy=strategy,
        plan=plan,
        encoder_calls=c.enc,
        decoder_calls=c.dec,
        timings_ns={
            "encoder_ns": c.enc_ns,
            "decoder_ns": c.dec_ns,
            "scan_ns": c.scan_ns,
            "total_ns": total_ns,
        },
        flops=report,
        trajectory=tuple(trajectory) if record_trajectory else None,
        bundles=tuple(bundles) if record_bundles else None,
        eps_by_t=eps_by_t if record_eps else None,
    )


# Steps per batched decode task. Fixed (never derived from the worker
# count) so the set of array operations, and therefore every bit of the
# result, is identical no matter how many workers execute them.
_GROUP_STEPS = 8

# Decode worker pools, one per requested size, shared across sampling runs
# so threads (and their scratch buffers) stay warm. Workers only ever run
# pure functions of their arguments, so sharing is safe.
_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()


def _worker_pool(workers: int) -> ThreadPoolExecutor:
    with _pools_lock:
        pool = _pools.get(workers)
        if pool is None:
            pool = _pools[workers] = ThreadPoolExecutor(
                max_workers=workers, thread_name_prefix=f"decode-{workers}"
            )
        return pool


# Scratch buffers for the batched decoder, reused per thread: every slot is
# fully overwritten before it is read, so reuse cannot change results, and
# recycling keeps large blocks out of the allocator's unmap path.
_scratch = threading.local()


def _scratch_buffer(tag: str, shape: tuple[int, ...]) -> np.ndarray:
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    # One live buffer per (tag, width): replacing on batch-size changes keeps
    # the per-thread footprint bounded no matter how many sizes a process sees.
    key = (tag, shape[-1])
    buf = pool.get(key)
    if buf is None or buf.shape != shape:
        buf = pool[key] = np.empty(shape)
    return buf


def _decode_run(
    cache: EncoderCache,
    run_steps: list[int],
    p: UNetParams,
    T: int,
    pool: ThreadPoolExecutor | None,
    workers: int,
    c: _Counters,
) -> dict[int, Tensor]:
    """Noise predictions for every step of one key-run.

    Steps are decoded in fixed-size groups, each group as one stacked
    decoder evaluation over (steps x batch) rows: the skip and bottleneck
    contributions are constant across a run, so only the time-conditioned
    part varies per step. Workers each fill their own slots of the
    per-timestep buffer; there is no reduction across workers, so the
    result is independent of worker count and completion order. The
    per-element operation order matches the sequential decoder, leaving
    only the matmul row-blocking as a possible (sub-1e-10) difference.
    """
    t0 = time.perf_counter_ns()
    cfg = p.cfg
    S = cfg.num_stages
    n = cache.bot.shape[0]
    ted = cfg.time_embed_dim
    w = p.weights

    # Per-run constants: stage 0 sees only cached inputs, so its whole
    # pre-activation short of the time term is fixed; later stages keep
    # their skip product only.
    consts: list[np.ndarray] = []
    up_blocks: list[np.ndarray] = []
    for i in range(S):
        skip = cache.skips[S - 1 - i].data
        mat = w[f"dec{i}.w"].data
        split = skip.shape[1]
        const = skip @ mat[:split]
        if i == 0:
            const += cache.bot.data @ mat[split:]
        consts.append(const)
        up_blocks.append(mat[split:])

    def eval_group(group: list[int]) -> list[tuple[int, Tensor]]:
        # All array work runs in place on reusable per-thread buffers; the
        # element operation order matches the sequential decoder bit for
        # bit (commuted operands only, and float addition commutes exactly).
        g = len(group)
        tm = np.concatenate([time_embedding(t, ted, T).data for t in group], axis=0)
        h = None
        with np.errstate(over="ignore"):
            for i in range(S):
                width = cfg.stage_widths[S - 1 - i]
                brows = tm @ w[f"dec{i}.t"].data
                brows += w[f"dec{i}.b"].data
                lin = _scratch_buffer("lin", (_GROUP_STEPS, n, width))[:g]
                if i == 0:
                    np.add(consts[0][None, :, :], brows[:, None, :], out=lin)
                else:
                    np.matmul(h.reshape(g * n, h.shape[2]), up_blocks[i], out=lin.reshape(g * n, width))
                    lin += consts[i]
                    lin += brows[:, None, :]
                scr = _scratch_buffer("scr", (_GROUP_STEPS, n, width))[:g]
                np.negative(lin, out=scr)
                np.exp(scr, out=scr)
                scr += 1.0
                np.divide(lin, scr, out=lin)
                h = lin
        eps = np.empty((g * n, cfg.data_dim))
        np.matmul(h.reshape(g * n, h.shape[2]), w["head.w"].data, out=eps)
        eps += w["head.b"].data
        eps = eps.reshape(g, n, cfg.data_dim)
        return [(t, _wrap_trusted(eps[j].copy())) for j, t in enumerate(group)]

    groups = [run_steps[j : j + _GROUP_STEPS] for j in range(0, len(run_steps), _GROUP_STEPS)]
    slots: dict[int, Tensor] = {}
    if pool is None or len(groups) == 1:
        results = [eval_group(gr) for gr in groups]
    else:
        results = [f.result() for f in [pool.submit(eval_group, gr) for gr in groups]]
    for pairs in results:
        for t, eps in pairs:
            slots[t] = eps
    c.dec += len(run_steps)
    c.dec_ns += time.perf_counter_ns() - t0
    return slots
