"""Expanded search space algebra and the analytic FLOPs model.

A network is a stem (3x3 conv, ``input_channels -> stem_width``), ``num_stages``
stages of basic residual blocks, and a head (global average pool + fully
connected layer). Stages after the first downsample in their first block with a
padded stride-2 conv, so stage ``i`` (1-based) sees ``ceil(input_resolution / 2**(i - 1))``
pixels per side.

FLOPs are multiply-accumulates of conv and FC layers. Bias, normalization,
activations and pooling count as zero.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

EXHAUSTIVE_THRESHOLD = 2**16


@dataclass(frozen=True)
class ExpandedSpaceConfig:
    num_stages: int = 3
    d_max: int = 16
    w_max: int = 512
    depth_window: int = 4
    width_window: int = 32
    input_resolution: int = 32
    input_channels: int = 3
    stem_width: int = 16
    num_classes: int = 10
    width_granularity: int = 1

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise TypeError(f"{f.name} must be an integer, got {value!r}")
            if value < 1:
                raise ValueError(f"{f.name} must be >= 1, got {value}")
        if self.d_max % self.depth_window:
            raise ValueError(
                f"d_max={self.d_max} is not divisible by depth_window={self.depth_window}"
            )
        if self.w_max % self.width_window:
            raise ValueError(
                f"w_max={self.w_max} is not divisible by width_window={self.width_window}"
            )
        if self.input_resolution < 2 ** (self.num_stages - 1):
            raise ValueError(
                f"input_resolution={self.input_resolution} underflows after "
                f"{self.num_stages - 1} downsamplings"
            )

    @property
    def n_depth_windows(self) -> int:
        return self.d_max // self.depth_window

    @property
    def n_width_windows(self) -> int:
        return self.w_max // self.width_window

    def single_window(self) -> "ExpandedSpaceConfig":
        """Same universe with one window spanning every depth and width."""
        return dataclasses.replace(self, depth_window=self.d_max, width_window=self.w_max)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExpandedSpaceConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown space config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExpandedSpaceConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class NetworkConfig:
    depths: tuple[int, ...]
    widths: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.depths) != len(self.widths):
            raise ValueError("depths and widths must have the same length")

    def validate(self, cfg: ExpandedSpaceConfig) -> None:
        if len(self.depths) != cfg.num_stages:
            raise ValueError(f"expected {cfg.num_stages} stages, got {len(self.depths)}")
        for i, (d, w) in enumerate(zip(self.depths, self.widths), start=1):
            if not 1 <= d <= cfg.d_max:
                raise ValueError(f"stage {i}: depth {d} outside [1, {cfg.d_max}]")
            if not 1 <= w <= cfg.w_max:
                raise ValueError(f"stage {i}: width {w} outside [1, {cfg.w_max}]")

    def as_row(self) -> list[int]:
        return [*self.depths, *self.widths]


@dataclass(frozen=True)
class NetworkSpace:
    """Per-stage window indices into the depth and width axes."""

    depth_window_idx: tuple[int, ...]
    width_window_idx: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "depth_window_idx", tuple(int(i) for i in self.depth_window_idx))
        object.__setattr__(self, "width_window_idx", tuple(int(i) for i in self.width_window_idx))
        if len(self.depth_window_idx) != len(self.width_window_idx):
            raise ValueError("depth and width window index lists differ in length")

    def validate(self, cfg: ExpandedSpaceConfig) -> None:
        if len(self.depth_window_idx) != cfg.num_stages:
            raise ValueError(
                f"expected {cfg.num_stages} stages, got {len(self.depth_window_idx)}"
            )
        for i, (di, wi) in enumerate(zip(self.depth_window_idx, self.width_window_idx), start=1):
            if not 0 <= di < cfg.n_depth_windows:
                raise ValueError(f"stage {i}: depth window {di} outside [0, {cfg.n_depth_windows})")
            if not 0 <= wi < cfg.n_width_windows:
                raise ValueError(f"stage {i}: width window {wi} outside [0, {cfg.n_width_windows})")

    def depth_range(self, cfg: ExpandedSpaceConfig, stage: int) -> tuple[int, int]:
        """Inclusive (low, high) depth bounds of ``stage`` (0-based)."""
        idx = self.depth_window_idx[stage]
        return idx * cfg.depth_window + 1, (idx + 1) * cfg.depth_window

    def width_range(self, cfg: ExpandedSpaceConfig, stage: int) -> tuple[int, int]:
        idx = self.width_window_idx[stage]
        return idx * cfg.width_window + 1, (idx + 1) * cfg.width_window

    def depth_values(self, cfg: ExpandedSpaceConfig, stage: int) -> np.ndarray:
        lo, hi = self.depth_range(cfg, stage)
        return np.arange(lo, hi + 1)

    def width_values(self, cfg: ExpandedSpaceConfig, stage: int, stride: int = 1) -> np.ndarray:
        lo, hi = self.width_range(cfg, stage)
        return np.arange(lo, hi + 1, cfg.width_granularity * stride)

    def cardinality(self, cfg: ExpandedSpaceConfig) -> int:
        n = 1
        for i in range(cfg.num_stages):
            n *= len(self.depth_values(cfg, i)) * len(self.width_values(cfg, i))
        return n

    def to_dict(self) -> dict:
        return {
            "depth_window_idx": list(self.depth_window_idx),
            "width_window_idx": list(self.width_window_idx),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpace":
        return cls(tuple(data["depth_window_idx"]), tuple(data["width_window_idx"]))

    def describe(self, cfg: ExpandedSpaceConfig) -> dict:
        return {
            "depths": [list(self.depth_range(cfg, i)) for i in range(cfg.num_stages)],
            "widths": [list(self.width_range(cfg, i)) for i in range(cfg.num_stages)],
        }


def full_space(cfg: ExpandedSpaceConfig) -> tuple[ExpandedSpaceConfig, NetworkSpace]:
    """The whole expanded search space as a single-window space."""
    wide = cfg.single_window()
    zeros = (0,) * cfg.num_stages
    return wide, NetworkSpace(zeros, zeros)


@dataclass(frozen=True)
class FlopsBreakdown:
    stem: int
    per_stage: tuple[int, ...]
    head: int
    total: int

    def as_record(self) -> dict:
        rec = {"stem": self.stem}
        for i, f in enumerate(self.per_stage, start=1):
            rec[f"stage{i}"] = f
        rec["head"] = self.head
        rec["total"] = self.total
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "FlopsBreakdown":
        n = sum(1 for k in rec if k.startswith("stage"))
        per_stage = tuple(int(rec[f"stage{i}"]) for i in range(1, n + 1))
        out = cls(int(rec["stem"]), per_stage, int(rec["head"]), int(rec["total"]))
        if out.total != out.stem + sum(out.per_stage) + out.head:
            raise ValueError("total does not equal the sum of its parts")
        return out


def count_networks(cfg: ExpandedSpaceConfig) -> int:
    return (cfg.d_max * cfg.w_max) ** cfg.num_stages


def count_spaces(cfg: ExpandedSpaceConfig) -> int:
    return (cfg.n_depth_windows * cfg.n_width_windows) ** cfg.num_stages


def stage_resolution(cfg: ExpandedSpaceConfig, stage: int) -> int:
    """Side length seen by ``stage`` (0-based): a padded stride-2 3x3 conv maps h to ceil(h / 2)."""
    if not 0 <= stage < cfg.num_stages:
        raise ValueError(f"stage index {stage} outside 0..{cfg.num_stages - 1}")
    return -(-cfg.input_resolution // (1 << stage))


def network_flops(cfg: ExpandedSpaceConfig, a: NetworkConfig) -> FlopsBreakdown:
    a.validate(cfg)
    r0 = cfg.input_resolution
    stem = 9 * cfg.input_channels * cfg.stem_width * r0 * r0
    per_stage = []
    c_in = cfg.stem_width
    for i, (d, w) in enumerate(zip(a.depths, a.widths)):
        area = stage_resolution(cfg, i) ** 2
        first = 9 * c_in * w + 9 * w * w
        if i > 0 or c_in != w:
            first += c_in * w
        per_stage.append((first + (d - 1) * 18 * w * w) * area)
        c_in = w
    head = a.widths[-1] * cfg.num_classes
    return FlopsBreakdown(stem, tuple(per_stage), head, stem + sum(per_stage) + head)


def network_flops_batch(cfg: ExpandedSpaceConfig, depths: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """Total FLOPs for a batch of configs; ``depths``/``widths`` have shape (M, num_stages)."""
    depths = np.asarray(depths, dtype=np.int64)
    widths = np.asarray(widths, dtype=np.int64)
    r0 = cfg.input_resolution
    total = np.full(depths.shape[0], 9 * cfg.input_channels * cfg.stem_width * r0 * r0, dtype=np.int64)
    c_in = np.full(depths.shape[0], cfg.stem_width, dtype=np.int64)
    for i in range(cfg.num_stages):
        area = stage_resolution(cfg, i) ** 2
        d, w = depths[:, i], widths[:, i]
        first = 9 * c_in * w + 9 * w * w
        proj = c_in * w if i > 0 else np.where(c_in != w, c_in * w, 0)
        total += (first + proj + (d - 1) * 18 * w * w) * area
        c_in = w
    total += widths[:, -1] * cfg.num_classes
    return total


def _grid_edges(values: np.ndarray) -> tuple[int, int]:
    return int(values[0]), int(values[-1])


def space_flops_bounds(cfg: ExpandedSpaceConfig, s: NetworkSpace) -> tuple[int, int]:
    s.validate(cfg)
    lo_d, hi_d, lo_w, hi_w = [], [], [], []
    for i in range(cfg.num_stages):
        d0, d1 = _grid_edges(s.depth_values(cfg, i))
        w0, w1 = _grid_edges(s.width_values(cfg, i))
        lo_d.append(d0)
        hi_d.append(d1)
        lo_w.append(w0)
        hi_w.append(w1)
    low = network_flops(cfg, NetworkConfig(tuple(lo_d), tuple(lo_w))).total
    high = network_flops(cfg, NetworkConfig(tuple(hi_d), tuple(hi_w))).total
    return low, high


def enumerate_space(cfg: ExpandedSpaceConfig, s: NetworkSpace, stride: int = 1) -> Iterator[NetworkConfig]:
    """Yield every config of ``s`` in lexicographic (d1..dN, w1..wN) order."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    s.validate(cfg)
    axes = [s.depth_values(cfg, i).tolist() for i in range(cfg.num_stages)]
    axes += [s.width_values(cfg, i, stride).tolist() for i in range(cfg.num_stages)]
    n = cfg.num_stages
    for combo in itertools.product(*axes):
        yield NetworkConfig(combo[:n], combo[n:])


def _space_grid(cfg: ExpandedSpaceConfig, s: NetworkSpace) -> tuple[np.ndarray, np.ndarray]:
    axes = [s.depth_values(cfg, i) for i in range(cfg.num_stages)]
    axes += [s.width_values(cfg, i) for i in range(cfg.num_stages)]
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = np.stack([m.ravel() for m in mesh], axis=1)
    n = cfg.num_stages
    return flat[:, :n], flat[:, n:]


def sample_space_configs(
    cfg: ExpandedSpaceConfig, s: NetworkSpace, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` uniform configs of ``s`` as (depths, widths) arrays of shape (n, N)."""
    depths = np.empty((n, cfg.num_stages), dtype=np.int64)
    widths = np.empty((n, cfg.num_stages), dtype=np.int64)
    for i in range(cfg.num_stages):
        dv = s.depth_values(cfg, i)
        wv = s.width_values(cfg, i)
        depths[:, i] = dv[rng.integers(0, len(dv), size=n)]
        widths[:, i] = wv[rng.integers(0, len(wv), size=n)]
    return depths, widths


@lru_cache(maxsize=4096)
def space_mean_flops(
    cfg: ExpandedSpaceConfig,
    s: NetworkSpace,
    samples: int = 4096,
    seed: int = 0,
    exhaustive_threshold: int = EXHAUSTIVE_THRESHOLD,
) -> float:
    """Mean FLOPs over the uniform distribution on ``s``.

    Exact enumeration when the space holds at most ``exhaustive_threshold``
    configs, otherwise a Monte-Carlo mean over ``samples`` draws seeded by
    ``seed``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    s.validate(cfg)
    if s.cardinality(cfg) <= exhaustive_threshold:
        depths, widths = _space_grid(cfg, s)
    else:
        rng = np.random.default_rng(seed)
        depths, widths = sample_space_configs(cfg, s, samples, rng)
    return float(np.mean(network_flops_batch(cfg, depths, widths)))


def widths_for_flops(
    cfg: ExpandedSpaceConfig, depths: Sequence[int], target: float, ratios: Sequence[float] | None = None
) -> NetworkConfig:
    """Bisect a common width scale so that total FLOPs lands closest to ``target``.

    ``ratios`` fixes the relative stage widths (default all ones).
    """
    ratios = list(ratios) if ratios is not None else [1.0] * cfg.num_stages
    top = max(ratios)

    def build(scale: int) -> NetworkConfig:
        widths = tuple(max(1, min(cfg.w_max, round(scale * r / top))) for r in ratios)
        return NetworkConfig(tuple(depths), widths)

    lo, hi = 1, cfg.w_max
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if network_flops(cfg, build(mid)).total < target:
            lo = mid
        else:
            hi = mid
    best = min((build(lo), build(hi)), key=lambda a: abs(network_flops(cfg, a).total - target))
    return best

