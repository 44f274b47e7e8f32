"""Latency microbenchmarks: sketch coder vs attention over growing sequence lengths.

Each subject maps a ``T x width`` input to a global representation (or, for
full self-attention, to ``T x width`` outputs). Timings are taken in eval mode
with no tape, one BLAS thread and the garbage collector paused; medians over
repeats are fitted on a log-log scale to recover the cost exponent in ``T``.
"""

from __future__ import annotations

import gc
import platform
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from temde.attention import GlobalSimilarity, full_self_attention
from temde.coder import TemdeCoder, TemdeConfig, aggregate
from temde.errors import ContractError
from temde.tensor import Tensor, no_grad

SUBJECTS = ("temde", "global_sim_attention", "full_self_attention")
DEFAULT_T = (64, 128, 256, 512, 1024, 2048, 4096)
MIN_SAMPLE_NS = 1_000_000  # calls faster than this are batched into one sample


@dataclass
class BenchSpec:
    subject: str
    t_values: Sequence[int] = DEFAULT_T
    width: int = 256
    repeats: int = 10
    warmup: int = 3
    seed: int = 0
    n_divisions: int = 20
    n_centroids: int = 8
    inner_dim: int = 8

    def __post_init__(self):
        if self.subject not in SUBJECTS:
            raise ContractError(f"subject must be one of {SUBJECTS}, got {self.subject!r}")
        if self.repeats < 10:
            raise ContractError(f"repeats must be >= 10, got {self.repeats}")
        if self.warmup < 3:
            raise ContractError(f"warmup must be >= 3, got {self.warmup}")
        if not self.t_values or min(self.t_values) < 1:
            raise ContractError("sequence lengths must be positive")


@dataclass
class BenchRow:
    t: int
    median_ns: float
    p10: float
    p90: float
    inner: int = 1


@dataclass
class BenchResult:
    spec: BenchSpec
    rows: list[BenchRow] = field(default_factory=list)

    def fit(self) -> tuple[float, float]:
        return fit_exponent([(r.t, r.median_ns) for r in self.rows])


def bench_input(t: int, width: int, seed: int) -> Tensor:
    """The input every subject sees at length ``t``; depends only on (seed, t)."""
    rng = np.random.default_rng([seed, t])
    return Tensor(rng.normal(0.0, 1.0, (t, width)).astype(np.float32))


def make_subject(spec: BenchSpec) -> Callable[[Tensor], Tensor]:
    rng = np.random.default_rng(spec.seed)
    if spec.subject == "temde":
        coder = TemdeCoder(
            TemdeConfig(spec.n_divisions, spec.n_centroids, spec.inner_dim, spec.width), rng
        ).eval()
        return lambda x: aggregate(coder.encode(x))
    if spec.subject == "global_sim_attention":
        # unit gamma so the timed attention is not trivially uniform
        module = GlobalSimilarity(spec.width, spec.width, 2, rng, global_gamma_init=1.0).eval()
        return module
    return full_self_attention


clock: Callable[[], int] = time.perf_counter_ns  # swappable for deterministic tests


def _time_call(fn: Callable[[Tensor], Tensor], x: Tensor, inner: int) -> int:
    start = clock()
    for _ in range(inner):
        fn(x)
    return clock() - start


def run_bench(spec: BenchSpec) -> BenchResult:
    """Median/p10/p90 nanoseconds per call for every ``T`` in the spec.

    Calls shorter than ``MIN_SAMPLE_NS`` are repeated ``inner`` times per
    sample and the sample divided back down; ``inner`` is reported per row.
    Each repeat sweeps every ``T`` once, after all lengths have warmed up.
    """
    fn = make_subject(spec)
    result = BenchResult(spec)
    gc_was_enabled = gc.isenabled()
    with threadpool_limits(limits=1), no_grad():
        gc.disable()
        try:
            inputs, inners = [], []
            for t in spec.t_values:
                x = bench_input(t, spec.width, spec.seed)
                for _ in range(spec.warmup):
                    fn(x)
                single = max(_time_call(fn, x, 1), 1)
                inputs.append(x)
                inners.append(max(1, -(-MIN_SAMPLE_NS // single)))
            # round-robin over T so a burst of host noise is shared by every row
            samples = np.empty((spec.repeats, len(inputs)))
            for r in range(spec.repeats):
                for i, (x, inner) in enumerate(zip(inputs, inners)):
                    samples[r, i] = _time_call(fn, x, inner) / inner
            for i, t in enumerate(spec.t_values):
                p10, med, p90 = np.percentile(samples[:, i], [10, 50, 90])
                result.rows.append(BenchRow(t, float(med), float(p10), float(p90), int(inners[i])))
        finally:
            if gc_was_enabled:
                gc.enable()
    return result


def fit_exponent(table: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares slope of log(time) against log(T), with its R^2."""
    ts = np.array([float(t) for t, _ in table])
    times = np.array([float(v) for _, v in table])
    if len(np.unique(ts)) < 4:
        raise ContractError("need at least 4 distinct sequence lengths to fit an exponent")
    if np.any(times <= 0) or np.any(ts <= 0):
        raise ContractError("times and lengths must be positive")
    x, y = np.log(ts), np.log(times)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(r2)


def machine_descriptor() -> str:
    return (
        f"machine={platform.machine()} system={platform.system()} "
        f"processor={platform.processor() or 'unknown'} python={platform.python_version()} "
        f"numpy={np.__version__}"
    )


def format_results(results: Sequence[BenchResult]) -> str:
    lines = [f"# {machine_descriptor()}"]
    if results:
        s = results[0].spec
        lines.append(
            f"# width={s.width} repeats={s.repeats} warmup={s.warmup} seed={s.seed} "
            f"N={s.n_divisions} K={s.n_centroids} D={s.inner_dim} threads=1"
        )
    lines.append("# subject\tT\tmedian_ns\tp10\tp90")
    for res in results:
        name = res.spec.subject
        for r in res.rows:
            if r.inner > 1:
                lines.append(f"# inner_loops subject={name} T={r.t} n={r.inner}")
            lines.append(f"{name}\t{r.t}\t{r.median_ns:.0f}\t{r.p10:.0f}\t{r.p90:.0f}")
        if len({r.t for r in res.rows}) >= 4:
            slope, r2 = res.fit()
            lines.append(f"# slope={slope:.4f} r2={r2:.4f}")
    return "\n".join(lines) + "\n"


def parse_results(text: str) -> dict[str, list[tuple[int, float]]]:
    """Read the data rows of :func:`format_results` back as ``subject -> [(T, median_ns)]``."""
    out: dict[str, list[tuple[int, float]]] = {}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        name, t, med, *_ = line.split("\t")
        out.setdefault(name, []).append((int(t), float(med)))
    return out
