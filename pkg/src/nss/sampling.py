"""Two-level sampling: Gumbel-Softmax draws of spaces, uniform draws of architectures.

Distributions over spaces and over architectures share one representation: a
list of independent categorical factors ordered stage by stage as
``[depth_1, width_1, depth_2, width_2, ...]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from nss.space_model import ExpandedSpaceConfig, NetworkConfig, NetworkSpace

GUMBEL_EPS = 1e-12


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def categorical_log_prob(logits: np.ndarray, index: int) -> float:
    return float(log_softmax(logits)[index])


def categorical_entropy(logits: np.ndarray) -> float:
    lp = log_softmax(logits)
    return float(-np.sum(np.exp(lp) * lp))


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


@dataclass(frozen=True)
class GumbelDraw:
    hard_index: int
    soft_weights: np.ndarray
    log_prob: float
    noise: np.ndarray = field(repr=False)


def gumbel_softmax_sample(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> GumbelDraw:
    logits = np.asarray(logits, dtype=float)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    g = sample_gumbel(rng, logits.shape)
    perturbed = logits + g
    soft = softmax(perturbed / temperature)
    hard = int(perturbed.argmax())
    return GumbelDraw(hard, soft, categorical_log_prob(logits, hard), g)


def gumbel_hard_samples(logits: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` hard indices; consumes the same stream as ``n`` calls to gumbel_softmax_sample."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    g = sample_gumbel(rng, (n, logits.shape[0]))
    return np.argmax(logits + g, axis=1)


@dataclass
class FactoredCategorical:
    """Independent per-stage categoricals over depth choices and width choices."""

    depth_logits: list[np.ndarray]
    width_logits: list[np.ndarray]

    def __post_init__(self) -> None:
        self.depth_logits = [np.array(v, dtype=float) for v in self.depth_logits]
        self.width_logits = [np.array(v, dtype=float) for v in self.width_logits]
        if len(self.depth_logits) != len(self.width_logits):
            raise ValueError("depth and width logits must cover the same stages")
        for v in self.factors():
            if v.ndim != 1 or v.size == 0:
                raise ValueError("each factor must be a non-empty vector")
            if not np.all(np.isfinite(v)):
                raise ValueError("logits must be finite")

    @property
    def num_stages(self) -> int:
        return len(self.depth_logits)

    def factors(self) -> list[np.ndarray]:
        out = []
        for d, w in zip(self.depth_logits, self.width_logits):
            out += [d, w]
        return out

    def copy(self):
        return type(self)([v.copy() for v in self.depth_logits], [v.copy() for v in self.width_logits])

    def apply_update(self, grads: list[np.ndarray], lr: float):
        """New distribution after ``logits -= lr * grad`` on every factor."""
        if len(grads) != 2 * self.num_stages:
            raise ValueError("one gradient per factor expected")
        new = [f - lr * g for f, g in zip(self.factors(), grads)]
        return type(self)(new[0::2], new[1::2])

    def entropy(self) -> float:
        return sum(categorical_entropy(f) for f in self.factors())

    def probabilities(self) -> list[np.ndarray]:
        return [softmax(f) for f in self.factors()]

    def to_dict(self) -> dict:
        return {
            "depth_logits": [v.tolist() for v in self.depth_logits],
            "width_logits": [v.tolist() for v in self.width_logits],
        }

    @classmethod
    def from_dict(cls, data: dict):
        return cls(data["depth_logits"], data["width_logits"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))

    def sample_indices(self, temperature: float, rng: np.random.Generator) -> list[GumbelDraw]:
        return [gumbel_softmax_sample(f, temperature, rng) for f in self.factors()]


class SpaceDistribution(FactoredCategorical):
    """Logits over depth windows and width windows, one pair of factors per stage."""

    @classmethod
    def uniform(cls, cfg: ExpandedSpaceConfig) -> "SpaceDistribution":
        return cls(
            [np.zeros(cfg.n_depth_windows) for _ in range(cfg.num_stages)],
            [np.zeros(cfg.n_width_windows) for _ in range(cfg.num_stages)],
        )

    def check(self, cfg: ExpandedSpaceConfig) -> None:
        if self.num_stages != cfg.num_stages:
            raise ValueError(f"distribution has {self.num_stages} stages, config {cfg.num_stages}")
        for d, w in zip(self.depth_logits, self.width_logits):
            if d.size != cfg.n_depth_windows or w.size != cfg.n_width_windows:
                raise ValueError("logit vector length does not match window count")

    def space_probability(self, s: NetworkSpace) -> float:
        lp = 0.0
        for d, w, di, wi in zip(self.depth_logits, self.width_logits, s.depth_window_idx, s.width_window_idx):
            lp += categorical_log_prob(d, di) + categorical_log_prob(w, wi)
        return float(np.exp(lp))


class ArchDistribution(FactoredCategorical):
    """Logits over the depth and width values inside one fixed space."""

    def __init__(self, depth_logits, width_logits, depth_values=None, width_values=None):
        super().__init__(depth_logits, width_logits)
        self.depth_values = [np.asarray(v) for v in depth_values] if depth_values is not None else None
        self.width_values = [np.asarray(v) for v in width_values] if width_values is not None else None

    @classmethod
    def uniform(cls, cfg: ExpandedSpaceConfig, s: NetworkSpace) -> "ArchDistribution":
        dv = [s.depth_values(cfg, i) for i in range(cfg.num_stages)]
        wv = [s.width_values(cfg, i) for i in range(cfg.num_stages)]
        return cls([np.zeros(len(v)) for v in dv], [np.zeros(len(v)) for v in wv], dv, wv)

    def copy(self):
        return ArchDistribution(
            [v.copy() for v in self.depth_logits],
            [v.copy() for v in self.width_logits],
            self.depth_values,
            self.width_values,
        )

    def apply_update(self, grads, lr):
        new = super().apply_update(grads, lr)
        return ArchDistribution(new.depth_logits, new.width_logits, self.depth_values, self.width_values)

    def config_from_draws(self, draws: list[GumbelDraw]) -> NetworkConfig:
        idx = [d.hard_index for d in draws]
        depths = tuple(int(v[i]) for v, i in zip(self.depth_values, idx[0::2]))
        widths = tuple(int(v[i]) for v, i in zip(self.width_values, idx[1::2]))
        return NetworkConfig(depths, widths)

    def sample_configs(self, n: int, rng: np.random.Generator) -> list[NetworkConfig]:
        cols = [gumbel_hard_samples(f, n, rng) for f in self.factors()]
        d_cols = [v[c] for v, c in zip(self.depth_values, cols[0::2])]
        w_cols = [v[c] for v, c in zip(self.width_values, cols[1::2])]
        return [
            NetworkConfig(tuple(int(c[k]) for c in d_cols), tuple(int(c[k]) for c in w_cols))
            for k in range(n)
        ]


def sample_space(theta: SpaceDistribution, temperature: float, rng: np.random.Generator) -> tuple[NetworkSpace, list[GumbelDraw]]:
    draws = theta.sample_indices(temperature, rng)
    idx = [d.hard_index for d in draws]
    return NetworkSpace(tuple(idx[0::2]), tuple(idx[1::2])), draws


def joint_log_prob(draws: list[GumbelDraw]) -> float:
    return float(sum(d.log_prob for d in draws))


def sample_architecture_uniform(cfg: ExpandedSpaceConfig, s: NetworkSpace, rng: np.random.Generator) -> NetworkConfig:
    depths, widths = [], []
    for i in range(cfg.num_stages):
        dv = s.depth_values(cfg, i)
        wv = s.width_values(cfg, i)
        depths.append(int(dv[rng.integers(len(dv))]))
        widths.append(int(wv[rng.integers(len(wv))]))
    return NetworkConfig(tuple(depths), tuple(widths))


@dataclass(frozen=True)
class TemperatureSchedule:
    t_start: float = 5.0
    t_end: float = 0.001
    total_steps: int = 5000

    def __post_init__(self) -> None:
        if not self.t_start >= self.t_end > 0:
            raise ValueError("need t_start >= t_end > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def temperature_at(sched: TemperatureSchedule, step: int) -> float:
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    frac = step / sched.total_steps
    return sched.t_start * (1.0 - frac) + sched.t_end * frac


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams, deterministic given the parent's state."""
    return rng.spawn(n)


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)
