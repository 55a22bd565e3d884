"""Desk-scale weight-sharing supernet with hand-written backprop.

Each stage is an input projection followed by ``d_max`` residual blocks
``h <- relu(h + scale * (relu(h A + a) B + b))`` allocated at ``w_max``
channels. A sub-network (d, w) uses the first ``w`` channels and the first
``d`` blocks of every stage; warmup may enable extra channels and blocks.
Computation gathers the active rows/columns of the shared tensors, so a
masked forward is numerically the forward of the sliced sub-network.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from nss.errors import NSSError
from nss.objectives import Oracle
from nss.sampling import sample_architecture_uniform, sample_space, temperature_at
from nss.space_model import ExpandedSpaceConfig, NetworkConfig


class TrainingDivergedError(NSSError):
    pass


# --- parameters -------------------------------------------------------------


@dataclass
class SuperNetParams:
    arrays: dict[str, np.ndarray]
    num_stages: int
    d_max: int
    w_max: int

    def copy(self) -> "SuperNetParams":
        return SuperNetParams({k: v.copy() for k, v in self.arrays.items()}, self.num_stages, self.d_max, self.w_max)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()


def init_params(cfg: ExpandedSpaceConfig, rng: np.random.Generator, init_scale: float = 1.0) -> SuperNetParams:
    """He-style init for the stem/projections, small residual branches."""
    w0, wm, dm = cfg.stem_width, cfg.w_max, cfg.d_max

    def dense(n_in, n_out, gain=1.0, *lead):
        return rng.normal(0.0, init_scale * gain * np.sqrt(2.0 / n_in), size=(*lead, n_in, n_out))

    arrays = {"stem.W": dense(cfg.input_channels, w0), "stem.b": np.zeros(w0)}
    n_in = w0
    for i in range(cfg.num_stages):
        p = f"s{i}."
        arrays[p + "proj.W"] = dense(n_in, wm)
        arrays[p + "proj.b"] = np.zeros(wm)
        arrays[p + "A"] = dense(wm, wm, 1.0, dm)
        arrays[p + "a"] = np.zeros((dm, wm))
        arrays[p + "B"] = dense(wm, wm, 0.5, dm)
        arrays[p + "b"] = np.zeros((dm, wm))
        arrays[p + "scale"] = np.full(dm, 0.5)
        n_in = wm
    arrays["head.W"] = rng.normal(0.0, init_scale / np.sqrt(wm), size=(wm, cfg.num_classes))
    arrays["head.b"] = np.zeros(cfg.num_classes)
    return SuperNetParams(arrays, cfg.num_stages, dm, wm)


# --- masks --------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    active_depths: tuple[int, ...]
    active_widths: tuple[int, ...]
    extra_channels: tuple[frozenset, ...] | None = None
    extra_blocks: tuple[frozenset, ...] | None = None

    def __post_init__(self) -> None:
        n = len(self.active_depths)
        for name in ("extra_channels", "extra_blocks"):
            extras = getattr(self, name)
            if extras is not None and len(extras) != n:
                raise ValueError(f"{name} must have one set per stage")
        if self.extra_channels is not None:
            for w, ex in zip(self.active_widths, self.extra_channels):
                if any(c < w for c in ex):
                    raise ValueError("extra channels overlap the base-active channels")
        if self.extra_blocks is not None:
            for d, ex in zip(self.active_depths, self.extra_blocks):
                if any(b < d for b in ex):
                    raise ValueError("extra blocks overlap the base-active blocks")

    @classmethod
    def from_config(cls, a: NetworkConfig) -> "MaskSpec":
        return cls(a.depths, a.widths)

    def channels(self, stage: int) -> np.ndarray:
        base = set(range(self.active_widths[stage]))
        if self.extra_channels is not None:
            base |= self.extra_channels[stage]
        return np.array(sorted(base), dtype=np.intp)

    def blocks(self, stage: int) -> list[int]:
        base = set(range(self.active_depths[stage]))
        if self.extra_blocks is not None:
            base |= self.extra_blocks[stage]
        return sorted(base)


@dataclass(frozen=True)
class WarmupSchedule:
    p_start: float = 1.0
    duration_steps: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_start <= 1.0:
            raise ValueError("p_start must be a probability")
        if self.duration_steps < 0:
            raise ValueError("duration_steps must be >= 0")

    def probability(self, step: int) -> float:
        if step >= self.duration_steps:
            return 0.0
        return max(0.0, self.p_start * (1.0 - step / self.duration_steps))


def warmup_mask(
    base: MaskSpec, sched: WarmupSchedule, step: int, rng: np.random.Generator, d_max: int, w_max: int
) -> MaskSpec:
    """Independently enable each inactive channel and block with the scheduled probability.

    One channel set per stage: the residual sum needs the same channels
    throughout a stage.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    p = sched.probability(step)
    if p == 0.0:
        return base
    channels, blocks = [], []
    for d, w in zip(base.active_depths, base.active_widths):
        extra_c = np.arange(w, w_max)[rng.random(w_max - w) < p]
        extra_b = np.arange(d, d_max)[rng.random(d_max - d) < p]
        channels.append(frozenset(int(c) for c in extra_c))
        blocks.append(frozenset(int(b) for b in extra_b))
    return MaskSpec(base.active_depths, base.active_widths, tuple(channels), tuple(blocks))


# --- forward / backward -------------------------------------------------------


@dataclass
class ForwardCache:
    x: np.ndarray
    z0: np.ndarray
    stages: list = field(default_factory=list)
    h_out: np.ndarray | None = None
    out_idx: np.ndarray | None = None


def masked_forward(params: SuperNetParams, mask: MaskSpec, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != params["stem.W"].shape[0]:
        raise ValueError(f"batch shape {x.shape} does not match input dim {params['stem.W'].shape[0]}")
    if len(mask.active_depths) != params.num_stages:
        raise ValueError("mask stage count does not match the supernet")
    z0 = x @ params["stem.W"] + params["stem.b"]
    h = np.maximum(z0, 0.0)
    cache = ForwardCache(x, z0)
    in_idx = np.arange(params["stem.W"].shape[1])
    for i in range(params.num_stages):
        p = f"s{i}."
        out = mask.channels(i)
        if out.size == 0 or out[-1] >= params.w_max:
            raise ValueError(f"stage {i + 1}: channel set out of range")
        x_in = h
        h = x_in @ params[p + "proj.W"][np.ix_(in_idx, out)] + params[p + "proj.b"][out]
        blocks = []
        for j in mask.blocks(i):
            if j >= params.d_max:
                raise ValueError(f"stage {i + 1}: block {j} out of range")
            h_in = h
            z1 = h_in @ params[p + "A"][j][np.ix_(out, out)] + params[p + "a"][j][out]
            u = np.maximum(z1, 0.0)
            z2 = u @ params[p + "B"][j][np.ix_(out, out)] + params[p + "b"][j][out]
            pre = h_in + params[p + "scale"][j] * z2
            h = np.maximum(pre, 0.0)
            blocks.append((j, h_in, z1, u, z2, pre))
        cache.stages.append((in_idx, out, x_in, blocks))
        in_idx = out
    y = h @ params["head.W"][in_idx] + params["head.b"]
    cache.h_out = h
    cache.out_idx = in_idx
    return y, cache


def loss_and_grad_output(y: np.ndarray, target: np.ndarray, loss_kind: str) -> tuple[float, np.ndarray]:
    n = y.shape[0]
    if loss_kind == "mse":
        diff = y - target
        return float(0.5 * np.sum(diff**2) / n), diff / n
    if loss_kind == "ce":
        labels = np.asarray(target, dtype=np.intp)
        shifted = y - y.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return float(-np.mean(logp[np.arange(n), labels])), grad / n
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def masked_backward(
    params: SuperNetParams, mask: MaskSpec, batch: np.ndarray, target: np.ndarray, loss_kind: str = "mse",
    cache: ForwardCache | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and its gradient for every tensor; inactive entries are exactly zero."""
    if cache is None:
        y, cache = masked_forward(params, mask, batch)
    else:
        y = cache.h_out @ params["head.W"][cache.out_idx] + params["head.b"]
    loss, dy = loss_and_grad_output(y, target, loss_kind)
    g = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    g["head.W"][cache.out_idx] = cache.h_out.T @ dy
    g["head.b"] = dy.sum(axis=0)
    dh = dy @ params["head.W"][cache.out_idx].T
    for i in reversed(range(params.num_stages)):
        p = f"s{i}."
        in_idx, out, x_in, blocks = cache.stages[i]
        oo = np.ix_(out, out)
        for j, h_in, z1, u, z2, pre in reversed(blocks):
            dpre = dh * (pre > 0)
            g[p + "scale"][j] = np.sum(dpre * z2)
            dz2 = dpre * params[p + "scale"][j]
            g[p + "B"][j][oo] = u.T @ dz2
            g[p + "b"][j][out] = dz2.sum(axis=0)
            dz1 = (dz2 @ params[p + "B"][j][oo].T) * (z1 > 0)
            g[p + "A"][j][oo] = h_in.T @ dz1
            g[p + "a"][j][out] = dz1.sum(axis=0)
            dh = dpre + dz1 @ params[p + "A"][j][oo].T
        io = np.ix_(in_idx, out)
        g[p + "proj.W"][io] = x_in.T @ dh
        g[p + "proj.b"][out] = dh.sum(axis=0)
        dh = dh @ params[p + "proj.W"][io].T
    dz0 = dh * (cache.z0 > 0)
    g["stem.W"] = cache.x.T @ dz0
    g["stem.b"] = dz0.sum(axis=0)
    return loss, g


def mean_loss(params: SuperNetParams, mask: MaskSpec, x: np.ndarray, target: np.ndarray, loss_kind: str = "mse") -> float:
    y, _ = masked_forward(params, mask, x)
    return loss_and_grad_output(y, target, loss_kind)[0]


def sgd_update(params: SuperNetParams, grads: dict[str, np.ndarray], lr: float) -> SuperNetParams:
    return SuperNetParams(
        {k: v - lr * grads[k] for k, v in params.arrays.items()}, params.num_stages, params.d_max, params.w_max
    )


# --- synthetic task -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTask:
    """Regression onto a fixed random teacher network; train/validation split is disjoint."""

    seed: int = 0
    input_dim: int = 8
    output_dim: int = 4
    n_samples: int = 1024
    val_fraction: float = 0.5
    teacher_width: int = 8
    teacher_depth: int = 2
    noise: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.n_samples < 2:
            raise ValueError("need at least two samples")

    def data(self) -> dict[str, np.ndarray]:
        return _task_data(self)

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


_TASK_CACHE: dict[SyntheticTask, dict[str, np.ndarray]] = {}


def _task_data(task: SyntheticTask) -> dict[str, np.ndarray]:
    if task in _TASK_CACHE:
        return _TASK_CACHE[task]
    rng = np.random.default_rng(task.seed)
    x = rng.normal(size=(task.n_samples, task.input_dim))
    h = np.maximum(x @ rng.normal(0, np.sqrt(2.0 / task.input_dim), (task.input_dim, task.teacher_width)), 0.0)
    for _ in range(task.teacher_depth):
        w1 = rng.normal(0, np.sqrt(2.0 / task.teacher_width), (task.teacher_width, task.teacher_width))
        w2 = rng.normal(0, np.sqrt(1.0 / task.teacher_width), (task.teacher_width, task.teacher_width))
        h = np.maximum(h + np.maximum(h @ w1, 0.0) @ w2, 0.0)
    y = h @ rng.normal(0, 1.0 / np.sqrt(task.teacher_width), (task.teacher_width, task.output_dim))
    y = (y - y.mean(axis=0)) / (y.std(axis=0) + 1e-12)
    y += task.noise * rng.normal(size=y.shape)
    perm = rng.permutation(task.n_samples)
    n_val = int(round(task.val_fraction * task.n_samples))
    val, train = perm[:n_val], perm[n_val:]
    out = {"x_train": x[train], "y_train": y[train], "x_val": x[val], "y_val": y[val],
           "train_idx": train, "val_idx": val}
    _TASK_CACHE[task] = out
    return out


# --- training -----------------------------------------------------------------


@dataclass(frozen=True)
class SupernetConfig:
    lr: float = 0.05
    steps: int = 2000
    batch_size: int = 64
    warmup_steps: int = 500
    p_start: float = 1.0
    init_scale: float = 1.0
    loss_kind: str = "mse"
    weight_steps_per_search_step: int = 4

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.steps < 0 or self.batch_size < 1 or self.weight_steps_per_search_step < 1:
            raise ValueError("invalid step counts")


def check_task(task: SyntheticTask, cfg: ExpandedSpaceConfig) -> None:
    if task.input_dim != cfg.input_channels or task.output_dim != cfg.num_classes:
        raise ValueError("task dims must equal the space's input_channels and num_classes")


def weight_step(
    params: SuperNetParams,
    a: NetworkConfig,
    task: SyntheticTask,
    sn: SupernetConfig,
    sched: WarmupSchedule,
    step: int,
    rng: np.random.Generator,
) -> tuple[SuperNetParams, float]:
    data = task.data()
    mask = warmup_mask(MaskSpec.from_config(a), sched, step, rng, params.d_max, params.w_max)
    idx = rng.integers(0, len(data["x_train"]), size=sn.batch_size)
    loss, grads = masked_backward(params, mask, data["x_train"][idx], data["y_train"][idx], sn.loss_kind)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in grads.values()):
        raise TrainingDivergedError(f"non-finite loss {loss} at step {step} for config {a}")
    return sgd_update(params, grads, sn.lr), loss


def train_supernet(
    task: SyntheticTask,
    cfg: ExpandedSpaceConfig,
    sn: SupernetConfig,
    sampler: Callable[[np.random.Generator], NetworkConfig],
    rng: np.random.Generator,
    params: SuperNetParams | None = None,
) -> tuple[SuperNetParams, np.ndarray]:
    """SGD over sub-networks drawn by ``sampler``; returns final params and the loss trace."""
    check_task(task, cfg)
    params = init_params(cfg, rng, sn.init_scale) if params is None else params
    sched = WarmupSchedule(sn.p_start, sn.warmup_steps)
    trace = np.empty(sn.steps)
    for step in range(sn.steps):
        params, trace[step] = weight_step(params, sampler(rng), task, sn, sched, step, rng)
    return params, trace


class SupernetOracle(Oracle):
    """Validation loss of a sub-network under frozen shared weights."""

    def __init__(self, params: SuperNetParams, task: SyntheticTask, cfg: ExpandedSpaceConfig, loss_kind: str = "mse"):
        self.params = params
        self.task = task
        self.cfg = cfg
        self.loss_kind = loss_kind

    def evaluate(self, a: NetworkConfig) -> float:
        a.validate(self.cfg)
        data = self.task.data()
        return mean_loss(self.params, MaskSpec.from_config(a), data["x_val"], data["y_val"], self.loss_kind)


def supernet_oracle(params: SuperNetParams, task: SyntheticTask, a: NetworkConfig, cfg: ExpandedSpaceConfig) -> float:
    return SupernetOracle(params, task, cfg).evaluate(a)


def bilevel_nss(
    task: SyntheticTask,
    cfg: ExpandedSpaceConfig,
    search,
    sn: SupernetConfig,
    rng: np.random.Generator | None = None,
    on_step: Callable | None = None,
):
    """Alternate weight steps on architectures drawn through the space distribution with space-distribution steps.

    While the space distribution is frozen for warmup, weight steps also
    enable extra channels and blocks with a linearly decaying probability.
    Returns (search state, elite space, supernet params).
    """
    from nss.search import extract_elite_space, init_state, nss_step

    check_task(task, cfg)
    rng = np.random.default_rng(search.seed) if rng is None else rng
    params = init_params(cfg, rng, sn.init_scale)
    state = init_state(cfg)
    ratio = sn.weight_steps_per_search_step
    sched = WarmupSchedule(sn.p_start, search.warmup_steps * ratio)
    wstep = 0
    while state.step < search.total_steps:
        t = temperature_at(search.schedule, state.step)
        for _ in range(ratio):
            s, _ = sample_space(state.theta, t, rng)
            a = sample_architecture_uniform(cfg, s, rng)
            params, _ = weight_step(params, a, task, sn, sched, wstep, rng)
            wstep += 1
        state = nss_step(state, SupernetOracle(params, task, cfg, sn.loss_kind), cfg, search, rng)
        if on_step is not None:
            on_step(state)
    elite = extract_elite_space(state.theta, cfg, search, rng)
    return state, elite, params


# --- checkpoints --------------------------------------------------------------


def save_params(path: str | Path, params: SuperNetParams, task: SyntheticTask, cfg: ExpandedSpaceConfig,
                seed: int, step: int) -> None:
    """Write a JSON manifest at ``path`` and the tensors, flat little-endian float64, at ``<path>.bin``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".bin")
    entries, offset = [], 0
    with open(blob, "wb") as fh:
        for k in sorted(params.arrays):
            data = np.ascontiguousarray(params.arrays[k], dtype="<f8").tobytes()
            fh.write(data)
            entries.append({"name": k, "shape": list(params.arrays[k].shape), "offset": offset})
            offset += len(data)
    manifest = {
        "tensors": blob.name,
        "dtype": "<f8",
        "entries": entries,
        "space_config": cfg.to_dict(),
        "task": task.to_dict(),
        "seed": seed,
        "step": step,
        "sha256": params.digest(),
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_params(path: str | Path) -> tuple[SuperNetParams, SyntheticTask]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    raw = (path.parent / manifest["tensors"]).read_bytes()
    arrays = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"]).copy()
    cfg = ExpandedSpaceConfig.from_dict(manifest["space_config"])
    params = SuperNetParams(arrays, cfg.num_stages, cfg.d_max, cfg.w_max)
    if params.digest() != manifest["sha256"]:
        raise ValueError(f"{path}: tensor digest mismatch")
    return params, SyntheticTask(**manifest["task"])
