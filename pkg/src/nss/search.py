"""Distributional search over network spaces, elite extraction, and in-space NAS."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from nss.errors import CapExhaustedError, ConfigurationError
from nss.objectives import Oracle, combined_loss, evaluate_many, flops_loss
from nss.sampling import (
    ArchDistribution,
    FactoredCategorical,
    GumbelDraw,
    SpaceDistribution,
    TemperatureSchedule,
    rng_from_state,
    rng_state,
    sample_architecture_uniform,
    sample_space,
    softmax,
    temperature_at,
)
from nss.space_model import (
    ExpandedSpaceConfig,
    NetworkConfig,
    NetworkSpace,
    network_flops,
    space_mean_flops,
)

PENALTY_LEVELS = ("per_architecture", "space_mean")
ESTIMATORS = ("score_function", "pathwise")


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 50
    steps_per_epoch: int = 100
    warmup_fraction: float = 0.25
    spaces_per_step: int = 1
    archs_per_space: int = 4
    learning_rate: float = 0.2
    baseline_decay: float = 0.9
    n_elite: int = 5
    lam: float = 10.0
    flops_target: float = 600e6
    t_start: float = 5.0
    t_end: float = 0.001
    seed: int = 0
    flops_penalty_level: str = "per_architecture"
    estimator: str = "score_function"
    mean_flops_samples: int = 4096
    band: float = 0.1
    nas_cap: int = 10_000
    normalize_advantage: bool = True

    def __post_init__(self) -> None:
        for name in ("epochs", "steps_per_epoch", "spaces_per_step", "archs_per_space", "n_elite",
                     "mean_flops_samples", "nas_cap"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigurationError("warmup_fraction must lie in [0, 1)")
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        if not 0 <= self.baseline_decay < 1:
            raise ConfigurationError("baseline_decay must lie in [0, 1)")
        if not self.lam >= 0:
            raise ConfigurationError(f"lam must be nonnegative, got {self.lam}")
        if not self.flops_target > 0:
            raise ConfigurationError("flops_target must be positive")
        if self.band < 0:
            raise ConfigurationError("band must be nonnegative")
        if self.flops_penalty_level not in PENALTY_LEVELS:
            raise ConfigurationError(f"flops_penalty_level must be one of {PENALTY_LEVELS}")
        if self.estimator not in ESTIMATORS:
            raise ConfigurationError(f"estimator must be one of {ESTIMATORS}")
        try:
            TemperatureSchedule(self.t_start, self.t_end, self.total_steps)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return math.floor(self.warmup_fraction * self.total_steps)

    @property
    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.t_start, self.t_end, self.total_steps)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SearchConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**data)


HISTORY_FIELDS = ("step", "temperature", "task_loss", "flops_loss", "combined", "entropy")


@dataclass(frozen=True)
class StepRecord:
    step: int
    temperature: float
    task_loss: float
    flops_loss: float
    combined: float
    entropy: float

    def as_row(self) -> list:
        return [getattr(self, f) for f in HISTORY_FIELDS]


@dataclass
class SearchState:
    theta: FactoredCategorical
    step: int = 0
    baseline: float | None = None
    history: list[StepRecord] = field(default_factory=list)
    advantage_sq: float | None = None


@dataclass(frozen=True)
class EliteSpace:
    space: NetworkSpace
    mean_flops: float
    deviation: float

    def to_dict(self, cfg: ExpandedSpaceConfig | None = None) -> dict:
        out = {"space": self.space.to_dict(), "mean_flops": self.mean_flops, "deviation": self.deviation}
        if cfg is not None:
            out["ranges"] = self.space.describe(cfg)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EliteSpace":
        return cls(NetworkSpace.from_dict(data["space"]), float(data["mean_flops"]), float(data["deviation"]))


# --- gradient estimators ---------------------------------------------------


def score_function_gradient(logits: np.ndarray, index: int, advantage: float) -> np.ndarray:
    """``advantage * d/dlogits log softmax(logits)[index]``."""
    grad = -softmax(logits)
    grad[index] += 1.0
    return advantage * grad


def pathwise_gradient(
    logits: list[np.ndarray],
    noise: list[np.ndarray],
    temperature: float,
    loss_fn: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
) -> tuple[float, list[np.ndarray]]:
    """Chain rule through ``softmax((logits + noise) / temperature)``.

    ``loss_fn`` maps the soft weights of every factor to (loss, d loss / d weights).
    """
    soft = [softmax((lg + g) / temperature) for lg, g in zip(logits, noise)]
    loss, upstream = loss_fn(soft)
    grads = [y * (u - float(y @ u)) / temperature for y, u in zip(soft, upstream)]
    return loss, grads


def _window_midpoints(cfg: ExpandedSpaceConfig) -> tuple[np.ndarray, np.ndarray]:
    d = np.array([k * cfg.depth_window + (cfg.depth_window + 1) / 2 for k in range(cfg.n_depth_windows)])
    w = np.array([k * cfg.width_window + (cfg.width_window + 1) / 2 for k in range(cfg.n_width_windows)])
    return d, w


def relaxed_space_loss_fn(oracle: Oracle, cfg: ExpandedSpaceConfig, target: float, lam: float):
    """Soft-weight loss for the pathwise estimator: window midpoints mixed by the weights."""
    if not getattr(oracle, "differentiable", False) or not hasattr(oracle, "relaxed_loss"):
        raise ConfigurationError("pathwise estimator needs an oracle with relaxation hooks")
    d_mid, w_mid = _window_midpoints(cfg)

    def loss_fn(soft: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
        depths = np.array([y @ d_mid for y in soft[0::2]])
        widths = np.array([y @ w_mid for y in soft[1::2]])
        loss, g_d, g_w = oracle.relaxed_loss(depths, widths, target, lam)
        upstream = []
        for gd, gw in zip(g_d, g_w):
            upstream += [gd * d_mid, gw * w_mid]
        return loss, upstream

    return loss_fn


# --- one search step ------------------------------------------------------


def _advance(
    state: SearchState,
    search: SearchConfig,
    rng: np.random.Generator,
    draw_and_score: Callable[[float, np.random.Generator], tuple[list[GumbelDraw], float, float]],
    n_samples: int,
) -> SearchState:
    """Shared score-function update for space and architecture distributions.

    ``draw_and_score(temperature, rng)`` returns (factor draws, task loss, FLOPs loss).
    """
    if state.step >= search.total_steps:
        raise ValueError(f"search already finished ({state.step} steps)")
    t = temperature_at(search.schedule, state.step)
    factors = state.theta.factors()
    samples = [draw_and_score(t, rng) for _ in range(n_samples)]
    tasks = np.array([s[1] for s in samples])
    flops_ls = np.array([s[2] for s in samples])
    losses = np.array([combined_loss(a, b, search.lam) for a, b in zip(tasks, flops_ls)])
    mean_loss = float(np.mean(losses))
    prev = mean_loss if state.baseline is None else state.baseline

    # Running mean square of the advantage, tracked with the same decay as the baseline.
    sq = float(np.mean((losses - prev) ** 2))
    adv_sq = sq if state.advantage_sq is None else (
        search.baseline_decay * state.advantage_sq + (1.0 - search.baseline_decay) * sq
    )
    scale = 1.0 / math.sqrt(adv_sq + 1e-12) if search.normalize_advantage else 1.0

    theta = state.theta.copy()
    if state.step >= search.warmup_steps and search.learning_rate > 0:
        # Sum of score_function_gradient over samples, with each factor's softmax computed once.
        adv = (losses - prev) * scale
        grads = [-adv.sum() * softmax(f) for f in factors]
        for (draws, _, _), a in zip(samples, adv):
            for g, d in zip(grads, draws):
                g[d.hard_index] += a
        theta = state.theta.apply_update([g / n_samples for g in grads], search.learning_rate)
    baseline = mean_loss if state.baseline is None else (
        search.baseline_decay * state.baseline + (1.0 - search.baseline_decay) * mean_loss
    )
    record = StepRecord(state.step, t, float(np.mean(tasks)), float(np.mean(flops_ls)), mean_loss, theta.entropy())
    return SearchState(theta, state.step + 1, baseline, state.history + [record], adv_sq)


def _pathwise_step(state: SearchState, oracle: Oracle, cfg: ExpandedSpaceConfig, search: SearchConfig,
                   rng: np.random.Generator) -> SearchState:
    t = temperature_at(search.schedule, state.step)
    loss_fn = relaxed_space_loss_fn(oracle, cfg, search.flops_target, search.lam)
    d_mid, w_mid = _window_midpoints(cfg)
    factors = state.theta.factors()
    grads = [np.zeros_like(f) for f in factors]
    losses, tasks, flops_ls = [], [], []
    for _ in range(search.spaces_per_step):
        draws = state.theta.sample_indices(t, rng)
        loss, g = pathwise_gradient(factors, [d.noise for d in draws], t, loss_fn)
        soft = [d.soft_weights for d in draws]
        f, _, _ = oracle.relaxed_flops(np.array([y @ d_mid for y in soft[0::2]]),
                                       np.array([y @ w_mid for y in soft[1::2]]))
        fl = flops_loss(f, search.flops_target)
        losses.append(loss)
        flops_ls.append(fl)
        tasks.append(loss - search.lam * fl)
        for acc, gi in zip(grads, g):
            acc += gi
    mean_loss = float(np.mean(losses))
    theta = state.theta.copy()
    if state.step >= search.warmup_steps and search.learning_rate > 0:
        theta = state.theta.apply_update([g / search.spaces_per_step for g in grads], search.learning_rate)
    baseline = mean_loss if state.baseline is None else (
        search.baseline_decay * state.baseline + (1.0 - search.baseline_decay) * mean_loss
    )
    record = StepRecord(state.step, t, float(np.mean(tasks)), float(np.mean(flops_ls)), mean_loss, theta.entropy())
    return SearchState(theta, state.step + 1, baseline, state.history + [record])


def score_space(
    oracle: Oracle,
    cfg: ExpandedSpaceConfig,
    s: NetworkSpace,
    search: SearchConfig,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """(mean task loss, FLOPs loss) of one sampled space from ``archs_per_space`` uniform draws."""
    archs = [sample_architecture_uniform(cfg, s, rng) for _ in range(search.archs_per_space)]
    task = float(np.mean(evaluate_many(oracle, archs)))
    if search.flops_penalty_level == "per_architecture":
        fl = float(np.mean([flops_loss(network_flops(cfg, a).total, search.flops_target) for a in archs]))
    else:
        fl = flops_loss(space_mean_flops(cfg, s, search.mean_flops_samples, search.seed), search.flops_target)
    return task, fl


def nss_step(
    state: SearchState,
    oracle: Oracle,
    cfg: ExpandedSpaceConfig,
    search: SearchConfig,
    rng: np.random.Generator,
) -> SearchState:
    """One update of the space distribution; ``state`` itself is never modified."""
    if search.estimator == "pathwise":
        return _pathwise_step(state, oracle, cfg, search, rng)

    def draw_and_score(t, rng):
        s, draws = sample_space(state.theta, t, rng)
        task, fl = score_space(oracle, cfg, s, search, rng)
        return draws, task, fl

    return _advance(state, search, rng, draw_and_score, search.spaces_per_step)


def extract_elite_space(
    theta: SpaceDistribution, cfg: ExpandedSpaceConfig, search: SearchConfig, rng: np.random.Generator
) -> EliteSpace:
    """Closest-to-target of ``n_elite`` hard draws; earliest draw wins ties."""
    candidates: list[NetworkSpace] = []
    for _ in range(search.n_elite):
        s, _ = sample_space(theta, search.t_end, rng)
        if s not in candidates:
            candidates.append(s)
    best = None
    for s in candidates:
        mean = space_mean_flops(cfg, s, search.mean_flops_samples, search.seed)
        dev = flops_loss(mean, search.flops_target)
        if best is None or dev < best.deviation:
            best = EliteSpace(s, mean, dev)
    return best


def init_state(cfg: ExpandedSpaceConfig) -> SearchState:
    return SearchState(SpaceDistribution.uniform(cfg))


def run_nss(
    cfg: ExpandedSpaceConfig,
    search: SearchConfig,
    oracle: Oracle,
    state: SearchState | None = None,
    rng: np.random.Generator | None = None,
    stop_at: int | None = None,
    on_step: Callable[[SearchState], None] | None = None,
) -> tuple[SearchState, EliteSpace | None]:
    """Run the search to completion (or to ``stop_at``) and extract the elite space.

    With ``stop_at`` before the end, no elite is extracted and None is returned
    in its place; resume by passing the returned state and rng back in.
    """
    state = init_state(cfg) if state is None else state
    state.theta.check(cfg)
    rng = np.random.default_rng(search.seed) if rng is None else rng
    end = search.total_steps if stop_at is None else min(stop_at, search.total_steps)
    while state.step < end:
        state = nss_step(state, oracle, cfg, search, rng)
        if on_step is not None:
            on_step(state)
    if state.step < search.total_steps:
        return state, None
    return state, extract_elite_space(state.theta, cfg, search, rng)


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(path: str | Path, cfg: ExpandedSpaceConfig, search: SearchConfig, state: SearchState,
                    rng: np.random.Generator) -> None:
    doc = {
        "space_config": cfg.to_dict(),
        "search_config": search.to_dict(),
        "theta": state.theta.to_dict(),
        "step": state.step,
        "baseline": state.baseline,
        "advantage_sq": state.advantage_sq,
        "rng_state": rng_state(rng),
        "history": [r.as_row() for r in state.history],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ExpandedSpaceConfig, SearchConfig, SearchState, np.random.Generator]:
    doc = json.loads(Path(path).read_text())
    cfg = ExpandedSpaceConfig.from_dict(doc["space_config"])
    search = SearchConfig.from_dict(doc["search_config"])
    history = [StepRecord(int(r[0]), *map(float, r[1:])) for r in doc["history"]]
    state = SearchState(SpaceDistribution.from_dict(doc["theta"]), int(doc["step"]), doc["baseline"], history,
                        doc.get("advantage_sq"))
    return cfg, search, state, rng_from_state(doc["rng_state"])


# --- NAS inside a fixed space ---------------------------------------------


@dataclass(frozen=True)
class NasResult:
    best: NetworkConfig
    samples_to_constraint: int
    error: float
    flops: int
    deviation: float
    theta: ArchDistribution = field(repr=False, compare=False)


def train_arch_distribution(
    space: NetworkSpace,
    oracle: Oracle,
    cfg: ExpandedSpaceConfig,
    search: SearchConfig,
    rng: np.random.Generator,
) -> SearchState:
    """Learn logits over the depth/width values inside ``space`` with the NSS step rule."""
    space.validate(cfg)
    state = SearchState(ArchDistribution.uniform(cfg, space))
    flops_cache: dict[NetworkConfig, int] = {}

    def draw_and_score(t, rng):
        draws = state.theta.sample_indices(t, rng)
        a = state.theta.config_from_draws(draws)
        if a not in flops_cache:
            flops_cache[a] = network_flops(cfg, a).total
        return draws, oracle.evaluate(a), flops_loss(flops_cache[a], search.flops_target)

    while state.step < search.total_steps:
        state = _advance(state, search, rng, draw_and_score, search.archs_per_space)
    return state


def run_nas_in_space(
    space: NetworkSpace,
    oracle: Oracle,
    cfg: ExpandedSpaceConfig,
    search: SearchConfig,
    rng: np.random.Generator,
) -> NasResult:
    """Search an architecture inside ``space``, then draw until one lands in the FLOPs band.

    Pass ``full_space(cfg)`` to run the whole-universe baseline.
    """
    from nss.analysis import samples_to_constraint

    state = train_arch_distribution(space, oracle, cfg, search, rng)
    theta: ArchDistribution = state.theta
    drawn: list[NetworkConfig] = []

    def sampler(rng):
        draws = theta.sample_indices(search.t_end, rng)
        a = theta.config_from_draws(draws)
        drawn.append(a)
        return a

    flops_fn = lambda a: network_flops(cfg, a).total  # noqa: E731
    try:
        count = samples_to_constraint(sampler, search.flops_target, search.band, search.nas_cap, rng, flops_fn)
    except CapExhaustedError as exc:
        best = min(drawn, key=lambda a: flops_loss(flops_fn(a), search.flops_target))
        raise CapExhaustedError(
            f"no architecture within {search.band:.0%} of target after {search.nas_cap} draws",
            best=best,
            best_deviation=flops_loss(flops_fn(best), search.flops_target),
            draws=exc.draws,
        ) from None
    best = drawn[-1]
    f = flops_fn(best)
    return NasResult(best, count, oracle.evaluate(best), f, flops_loss(f, search.flops_target), theta)
