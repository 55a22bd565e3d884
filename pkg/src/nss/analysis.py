"""Pareto fronts, EDFs, FLOPs bands, baselines and elite-space statistics."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from nss.errors import CapExhaustedError
from nss.objectives import Oracle, evaluate_many, percent_gap
from nss.sampling import sample_architecture_uniform
from nss.space_model import ExpandedSpaceConfig, NetworkConfig, NetworkSpace, network_flops


@dataclass(frozen=True)
class EvalRecord:
    config: NetworkConfig
    flops: int
    error: float


def record_header(num_stages: int) -> list[str]:
    return [f"d{i}" for i in range(1, num_stages + 1)] + [f"w{i}" for i in range(1, num_stages + 1)] + [
        "flops",
        "error",
    ]


def records_to_csv(records: Sequence[EvalRecord], num_stages: int, provenance: str | None = None) -> str:
    buf = io.StringIO()
    if provenance:
        buf.write(provenance.rstrip("\n") + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(record_header(num_stages))
    for r in records:
        writer.writerow([*r.config.as_row(), r.flops, repr(float(r.error))])
    return buf.getvalue()


def records_from_csv(text: str, cfg: ExpandedSpaceConfig | None = None) -> list[EvalRecord]:
    """Parse ``d1..dN,w1..wN,flops,error`` rows; ``#`` lines are comments.

    With ``cfg``, each row's FLOPs must equal the analytic model's count.
    """
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError("no records: input is empty")
    rows = list(csv.reader(lines))
    header = rows[0]
    if len(header) < 4 or len(header) % 2 or header[-2:] != ["flops", "error"]:
        raise ValueError(f"bad records header: {header}")
    n = (len(header) - 2) // 2
    if header != record_header(n):
        raise ValueError(f"bad records header: {header}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            if len(row) != len(header):
                raise ValueError("wrong column count")
            config = NetworkConfig(tuple(int(v) for v in row[:n]), tuple(int(v) for v in row[n : 2 * n]))
            rec = EvalRecord(config, int(row[-2]), float(row[-1]))
        except ValueError as exc:
            raise ValueError(f"malformed record row {lineno}: {','.join(row)} ({exc})") from None
        if cfg is not None and network_flops(cfg, config).total != rec.flops:
            raise ValueError(f"row {lineno}: flops {rec.flops} disagree with the FLOPs model")
        out.append(rec)
    if not out:
        raise ValueError("no records: only a header")
    return out


def pareto_front(records: Sequence[EvalRecord]) -> list[EvalRecord]:
    """Non-dominated records under joint minimization of (error, flops), sorted by flops.

    Records equal on both axes do not dominate each other; only the first
    of such duplicates is kept.
    """
    if not records:
        raise ValueError("pareto_front of an empty record list")
    order = sorted(range(len(records)), key=lambda i: (records[i].flops, records[i].error, i))
    front = []
    best_error = np.inf
    for i in order:
        if records[i].error < best_error:
            front.append(records[i])
            best_error = records[i].error
    return front


@dataclass(frozen=True)
class EdfCurve:
    values: np.ndarray
    fractions: np.ndarray

    def __call__(self, x):
        idx = np.searchsorted(self.values, x, side="right")
        return np.where(idx > 0, self.fractions[np.maximum(idx - 1, 0)], 0.0)

    def to_csv(self, provenance: str | None = None) -> str:
        buf = io.StringIO()
        if provenance:
            buf.write(provenance.rstrip("\n") + "\n")
        buf.write("value,fraction\n")
        for v, f in zip(self.values, self.fractions):
            buf.write(f"{float(v)!r},{float(f)!r}\n")
        return buf.getvalue()


def edf(values: Iterable[float]) -> EdfCurve:
    """Empirical CDF ``F(x) = #{v_i <= x} / n`` as (value, fraction) breakpoints."""
    arr = np.sort(np.asarray(list(values), dtype=float))
    if arr.size == 0:
        raise ValueError("edf of an empty sample")
    uniq, counts = np.unique(arr, return_counts=True)
    return EdfCurve(uniq, np.cumsum(counts) / arr.size)


def deviation(flops: float, target: float) -> float:
    """Percent distance from the target, ``100 * |flops / target - 1|``."""
    if not target > 0:
        raise ValueError("target must be positive")
    return percent_gap(flops, target)


def in_band(flops: float, target: float, band: float) -> bool:
    return abs(flops / target - 1.0) <= band + 1e-12


def flops_band_filter(records: Sequence[EvalRecord], target: float, band: float) -> list[EvalRecord]:
    if band < 0:
        raise ValueError("band must be nonnegative")
    return [r for r in records if in_band(r.flops, target, band)]


def random_baseline(
    cfg: ExpandedSpaceConfig, space: NetworkSpace, oracle: Oracle, k: int, rng: np.random.Generator
) -> list[EvalRecord]:
    """``k`` uniform architectures of ``space`` with their FLOPs and oracle error."""
    if k < 1:
        raise ValueError("k must be >= 1")
    archs = [sample_architecture_uniform(cfg, space, rng) for _ in range(k)]
    errors = evaluate_many(oracle, archs)
    return [EvalRecord(a, network_flops(cfg, a).total, float(e)) for a, e in zip(archs, errors)]


def samples_to_constraint(
    sampler: Callable[[np.random.Generator], object],
    target: float,
    band: float,
    cap: int,
    rng: np.random.Generator,
    flops_fn: Callable[[object], float] = float,
) -> int:
    """Number of draws until the first one whose FLOPs is within ``band`` of ``target``."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    for n in range(1, cap + 1):
        if in_band(flops_fn(sampler(rng)), target, band):
            return n
    raise CapExhaustedError(f"no in-band draw within {cap} samples", draws=cap)


# --- elite-space shape statistics ------------------------------------------


@dataclass(frozen=True)
class SpaceStats:
    depth_midpoints: np.ndarray
    width_midpoints: np.ndarray
    depth_patterns: tuple[str, ...]
    width_patterns: tuple[str, ...]
    depth_frequencies: dict[str, float]
    width_frequencies: dict[str, float]


def order_pattern(values: Sequence[float], symbol: str) -> str:
    """Weak ordering of stage summaries, e.g. ``d1<=d3<=d2`` or ``d1=d2<=d3``."""
    order = sorted(range(len(values)), key=lambda i: (values[i], i))
    out = f"{symbol}{order[0] + 1}"
    for prev, cur in zip(order, order[1:]):
        sep = "=" if values[cur] == values[prev] else "<="
        out += f"{sep}{symbol}{cur + 1}"
    return out


def space_ordering_stats(cfg: ExpandedSpaceConfig, spaces: Sequence[NetworkSpace]) -> SpaceStats:
    if not spaces:
        raise ValueError("no spaces given")
    dm = np.array([[sum(s.depth_range(cfg, i)) / 2 for i in range(cfg.num_stages)] for s in spaces])
    wm = np.array([[sum(s.width_range(cfg, i)) / 2 for i in range(cfg.num_stages)] for s in spaces])
    dp = tuple(order_pattern(row, "d") for row in dm)
    wp = tuple(order_pattern(row, "w") for row in wm)
    freq = lambda pats: {k: v / len(pats) for k, v in sorted(Counter(pats).items())}  # noqa: E731
    return SpaceStats(dm, wm, dp, wp, freq(dp), freq(wp))


# --- complexity sweep -------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    variant: ExpandedSpaceConfig
    nas_samples_to_constraint: int | None
    nas_band_fraction: float
    nas_band_edf: EdfCurve | None
    elite: object
    elite_band_fraction: float
    elite_band_edf: EdfCurve | None


def _band_edf(flops: np.ndarray, target: float, band: float) -> tuple[float, EdfCurve | None]:
    mask = np.abs(flops / target - 1.0) <= band + 1e-12
    return float(mask.mean()), (edf(flops[mask]) if mask.any() else None)


def complexity_sweep(
    variants: Sequence[ExpandedSpaceConfig],
    oracle_factory: Callable[[ExpandedSpaceConfig], Oracle],
    search,
    n_eval: int = 1000,
) -> list[SweepRow]:
    """Full-space NAS and NSS on each universe variant, with FLOPs-band EDFs of their samples.

    NAS samples come from the final architecture distribution; NSS samples
    are uniform draws from the elite space.
    """
    from nss.search import run_nas_in_space, run_nss
    from nss.space_model import full_space, sample_space_configs, network_flops_batch

    rows = []
    for cfg in variants:
        oracle = oracle_factory(cfg)
        rng = np.random.default_rng(search.seed)
        wide, whole = full_space(cfg)
        try:
            nas = run_nas_in_space(whole, oracle, wide, search, rng)
            theta, count = nas.theta, nas.samples_to_constraint
        except CapExhaustedError:
            from nss.search import train_arch_distribution

            theta = train_arch_distribution(whole, oracle, wide, search, np.random.default_rng(search.seed)).theta
            count = None
        nas_configs = theta.sample_configs(n_eval, rng)
        nas_flops = np.array([network_flops(wide, a).total for a in nas_configs], dtype=float)
        nas_frac, nas_edf = _band_edf(nas_flops, search.flops_target, search.band)

        _, elite = run_nss(cfg, search, oracle)
        d, w = sample_space_configs(cfg, elite.space, n_eval, rng)
        el_frac, el_edf = _band_edf(network_flops_batch(cfg, d, w).astype(float), search.flops_target, search.band)
        rows.append(SweepRow(cfg, count, nas_frac, nas_edf, elite, el_frac, el_edf))
        oracle.close()
    return rows


def with_width_cap(cfg: ExpandedSpaceConfig, w_max: int) -> ExpandedSpaceConfig:
    return replace(cfg, w_max=w_max)
