"""FLOPs-constrained objective and the oracles that supply task loss."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import queue
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from nss.errors import ConfigNotFoundError, ConfigurationError, OracleError, OracleTransportError
from nss.space_model import (
    ExpandedSpaceConfig,
    NetworkConfig,
    NetworkSpace,
    network_flops,
    stage_resolution,
)
from nss.sampling import sample_architecture_uniform

ORACLE_KINDS = ("analytic_surrogate", "tabular", "external_process", "toy_supernet")


@dataclass(frozen=True)
class FlopsTarget:
    target: float

    def __post_init__(self) -> None:
        if not self.target > 0:
            raise ConfigurationError(f"FLOPs target must be positive, got {self.target}")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 10.0

    def __post_init__(self) -> None:
        if not self.lam >= 0:
            raise ConfigurationError(f"lambda must be nonnegative, got {self.lam}")


def percent_gap(flops: float, target: float) -> float:
    return 100.0 * abs(flops / target - 1.0)


def flops_loss(flops: float, tgt: FlopsTarget | float) -> float:
    """``|flops / target - 1|``, computed as the percent gap over 100.

    Going through the percentage keeps ``deviation(F, T) / 100 == flops_loss(F, T)``
    exact in floating point.
    """
    target = tgt.target if isinstance(tgt, FlopsTarget) else tgt
    if flops < 0:
        raise ValueError("flops must be nonnegative")
    return percent_gap(flops, target) / 100.0


def combined_loss(task: float, flops_l: float, w: LossWeights | float) -> float:
    lam = w.lam if isinstance(w, LossWeights) else w
    return task + lam * flops_l


# --- oracle specification -------------------------------------------------


@dataclass(frozen=True)
class OracleSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ORACLE_KINDS:
            raise ConfigurationError(f"unknown oracle kind {self.kind!r}; expected one of {ORACLE_KINDS}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, data: dict) -> "OracleSpec":
        data = dict(data)
        kind = data.pop("kind", None)
        if kind is None:
            raise ConfigurationError("oracle spec needs a 'kind'")
        return cls(kind, data)


class Oracle:
    """Maps a NetworkConfig to a task loss."""

    differentiable = False
    concurrent_safe = True

    def evaluate(self, a: NetworkConfig) -> float:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --- analytic surrogate ---------------------------------------------------


def _hash_normal(seed: int, a: NetworkConfig) -> float:
    key = json.dumps([seed, list(a.depths), list(a.widths)]).encode()
    digest = hashlib.blake2b(key, digest_size=16).digest()
    u1 = (int.from_bytes(digest[:8], "little") + 0.5) / 2.0**64
    u2 = (int.from_bytes(digest[8:], "little") + 0.5) / 2.0**64
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def _default_optimum(cfg: ExpandedSpaceConfig) -> tuple[list[float], list[float]]:
    # Shallow-deep-medium profile, scaled to the configured universe.
    depth_frac = [0.15, 0.5, 0.3]
    width_frac = [0.1, 0.25, 0.18]
    n = cfg.num_stages
    pick = lambda fr, i: fr[min(i, len(fr) - 1)]  # noqa: E731
    return (
        [max(1.0, round(pick(depth_frac, i) * cfg.d_max)) for i in range(n)],
        [max(1.0, round(pick(width_frac, i) * cfg.w_max)) for i in range(n)],
    )


class SurrogateOracle(Oracle):
    """Closed-form error model with diminishing returns in FLOPs.

    ``err(a) = eps_inf + amplitude * (F(a) / f_ref) ** -beta
    + sum_i gamma_i * penalty_i(a) + sigma * noise(seed, a)``

    ``penalty_i`` is the squared normalized distance of stage ``i``'s
    (depth, width) from a planted optimum. The noise term is a hash of
    (seed, config), so repeated calls agree bitwise.
    """

    differentiable = True

    def __init__(
        self,
        cfg: ExpandedSpaceConfig,
        eps_inf: float = 0.03,
        amplitude: float = 0.5,
        beta: float = 0.45,
        f_ref: float = 600e6,
        gammas: Sequence[float] | float = 0.1,
        optimum_depths: Sequence[float] | None = None,
        optimum_widths: Sequence[float] | None = None,
        sigma: float = 0.01,
        seed: int = 0,
    ):
        self.cfg = cfg
        self.eps_inf = float(eps_inf)
        self.amplitude = float(amplitude)
        self.beta = float(beta)
        self.f_ref = float(f_ref)
        n = cfg.num_stages
        self.gammas = np.broadcast_to(np.asarray(gammas, dtype=float), (n,)).copy()
        od, ow = _default_optimum(cfg)
        self.optimum_depths = np.asarray(optimum_depths if optimum_depths is not None else od, dtype=float)
        self.optimum_widths = np.asarray(optimum_widths if optimum_widths is not None else ow, dtype=float)
        if self.optimum_depths.shape != (n,) or self.optimum_widths.shape != (n,):
            raise ConfigurationError("planted optimum must have one entry per stage")
        self.sigma = float(sigma)
        self.seed = int(seed)

    def shape_penalty(self, depths: np.ndarray, widths: np.ndarray) -> np.ndarray:
        dd = (np.asarray(depths, dtype=float) - self.optimum_depths) / self.cfg.d_max
        dw = (np.asarray(widths, dtype=float) - self.optimum_widths) / self.cfg.w_max
        return dd**2 + dw**2

    def noiseless(self, a: NetworkConfig, flops: float | None = None) -> float:
        f = network_flops(self.cfg, a).total if flops is None else flops
        pen = self.shape_penalty(np.array(a.depths), np.array(a.widths))
        return self.eps_inf + self.amplitude * (f / self.f_ref) ** (-self.beta) + float(self.gammas @ pen)

    def evaluate(self, a: NetworkConfig) -> float:
        a.validate(self.cfg)
        err = self.noiseless(a)
        if self.sigma:
            err += self.sigma * _hash_normal(self.seed, a)
        return err

    # Relaxation hooks: continuous depths/widths, no noise.

    def relaxed_flops(self, depths: np.ndarray, widths: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        """Continuous FLOPs polynomial and its gradients in depths and widths.

        Every first block carries a projection shortcut here, so the
        polynomial is smooth; it matches ``network_flops`` whenever stage 1
        changes channel count.
        """
        cfg = self.cfg
        n = cfg.num_stages
        areas = np.array([stage_resolution(cfg, i) ** 2 for i in range(n)], dtype=float)
        c_prev = np.concatenate([[float(cfg.stem_width)], widths[:-1]])
        r0 = cfg.input_resolution
        total = 9.0 * cfg.input_channels * cfg.stem_width * r0 * r0
        total += float(np.sum(areas * (10.0 * c_prev * widths + 9.0 * widths**2 + 18.0 * (depths - 1.0) * widths**2)))
        total += widths[-1] * cfg.num_classes
        g_d = areas * 18.0 * widths**2
        g_w = areas * (10.0 * c_prev + 18.0 * widths + 36.0 * (depths - 1.0) * widths)
        g_w[:-1] += areas[1:] * 10.0 * widths[1:]
        g_w[-1] += cfg.num_classes
        return total, g_d, g_w

    def relaxed_loss(
        self, depths: np.ndarray, widths: np.ndarray, target: float, lam: float
    ) -> tuple[float, np.ndarray, np.ndarray]:
        """Combined loss at continuous (depths, widths) with its gradient."""
        depths = np.asarray(depths, dtype=float)
        widths = np.asarray(widths, dtype=float)
        f, fd, fw = self.relaxed_flops(depths, widths)
        scale = (f / self.f_ref) ** (-self.beta)
        dd = (depths - self.optimum_depths) / self.cfg.d_max
        dw = (widths - self.optimum_widths) / self.cfg.w_max
        err = self.eps_inf + self.amplitude * scale + float(self.gammas @ (dd**2 + dw**2))
        rel = f / target - 1.0
        loss = err + lam * abs(rel)
        dloss_df = -self.beta * self.amplitude * scale / f + lam * np.sign(rel) / target
        g_d = dloss_df * fd + 2.0 * self.gammas * dd / self.cfg.d_max
        g_w = dloss_df * fw + 2.0 * self.gammas * dw / self.cfg.w_max
        return loss, g_d, g_w


# --- tabular --------------------------------------------------------------


def read_table(path: str | Path, num_stages: int) -> dict[tuple[int, ...], float]:
    expected = [f"d{i}" for i in range(1, num_stages + 1)] + [f"w{i}" for i in range(1, num_stages + 1)]
    table = {}
    with open(path, newline="") as fh:
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(rows, None)
        if header is None:
            raise ConfigurationError(f"{path}: empty table")
        if header[: 2 * num_stages] != expected or header[-1] != "error":
            raise ConfigurationError(f"{path}: header {header} does not match {expected + ['error']}")
        for lineno, row in enumerate(rows, start=2):
            try:
                key = tuple(int(v) for v in row[: 2 * num_stages])
                table[key] = float(row[-1])
            except (ValueError, IndexError) as exc:
                raise ConfigurationError(f"{path}: malformed row {lineno}: {row}") from exc
    return table


class TabularOracle(Oracle):
    def __init__(self, cfg: ExpandedSpaceConfig, path: str | Path):
        self.cfg = cfg
        self.path = str(path)
        self.table = read_table(path, cfg.num_stages)

    def evaluate(self, a: NetworkConfig) -> float:
        key = tuple(a.as_row())
        try:
            return self.table[key]
        except KeyError:
            raise ConfigNotFoundError(f"config not in table {self.path}", a) from None


# --- external process -----------------------------------------------------


class ExternalProcessOracle(Oracle):
    """Line-delimited JSON request/response with a child process.

    Request ``{"id": n, "depths": [...], "widths": [...]}``; response
    ``{"id": n, "task_loss": x}`` or ``{"id": n, "error": "..."}``.
    """

    concurrent_safe = False

    def __init__(self, command: Sequence[str] | str, timeout: float = 600.0, cwd: str | None = None):
        self.command = command.split() if isinstance(command, str) else list(command)
        self.timeout = float(timeout)
        self.cwd = cwd
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue = queue.Queue()
        self._next_id = 0
        self._lock = threading.Lock()

    def _start(self) -> None:
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
                cwd=self.cwd,
            )
        except OSError as exc:
            raise OracleTransportError(f"cannot start oracle process {self.command}: {exc}") from exc
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc.stdout, self._lines), daemon=True).start()

    @staticmethod
    def _pump(stream, lines: queue.Queue) -> None:
        for line in stream:
            lines.put(line)
        lines.put(None)

    def evaluate(self, a: NetworkConfig) -> float:
        with self._lock:
            if self._proc is None or self._proc.poll() is not None:
                self._start()
            req_id = self._next_id
            self._next_id += 1
            request = {"id": req_id, "depths": list(a.depths), "widths": list(a.widths)}
            try:
                self._proc.stdin.write(json.dumps(request) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                self._kill()
                raise OracleTransportError(f"write to oracle process failed: {exc}", a) from exc
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                self._kill()
                raise OracleTransportError(f"oracle process timed out after {self.timeout}s", a) from None
            if line is None:
                self._kill()
                raise OracleTransportError("oracle process closed its output", a)
            try:
                response = json.loads(line)
            except json.JSONDecodeError as exc:
                raise OracleTransportError(f"unparseable oracle response {line.strip()!r}", a) from exc
            if response.get("id") != req_id:
                raise OracleTransportError(f"response id {response.get('id')!r} != request id {req_id}", a)
            if "error" in response:
                raise OracleError(f"oracle reported: {response['error']}", a)
            try:
                return float(response["task_loss"])
            except (KeyError, TypeError, ValueError) as exc:
                raise OracleTransportError(f"response lacks a numeric task_loss: {line.strip()!r}", a) from exc

    def _kill(self) -> None:
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        self._proc = None


# --- construction and evaluation -----------------------------------------


def make_oracle(spec: OracleSpec, cfg: ExpandedSpaceConfig, **context: Any) -> Oracle:
    """Build an oracle; ``context`` carries run-time objects (trained supernet, task)."""
    p = dict(spec.params)
    if spec.kind == "analytic_surrogate":
        return SurrogateOracle(cfg, **p)
    if spec.kind == "tabular":
        if "path" not in p:
            raise ConfigurationError("tabular oracle needs a 'path'")
        return TabularOracle(cfg, p["path"])
    if spec.kind == "external_process":
        if "command" not in p:
            raise ConfigurationError("external_process oracle needs a 'command'")
        return ExternalProcessOracle(p["command"], timeout=p.get("timeout", 600.0), cwd=p.get("cwd"))
    from nss.supernet import SupernetOracle, load_params

    params = context.get("params")
    task = context.get("task")
    if params is None:
        if "checkpoint" not in p:
            raise ConfigurationError("toy_supernet oracle needs a 'checkpoint' or trained params")
        params, task = load_params(p["checkpoint"])
    return SupernetOracle(params, task, cfg)


def oracle_eval(o: Oracle, a: NetworkConfig, rng: np.random.Generator | None = None) -> float:
    return o.evaluate(a)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("NSS_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_many(o: Oracle, configs: Sequence[NetworkConfig]) -> list[float]:
    """Evaluate in parallel where the oracle allows; results are in input order."""
    threads = worker_count()
    if threads == 1 or not o.concurrent_safe or len(configs) < 2:
        return [o.evaluate(a) for a in configs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(o.evaluate, configs))


def space_task_loss_estimate(
    o: Oracle, cfg: ExpandedSpaceConfig, s: NetworkSpace, m: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Mean task loss of ``m`` uniform architectures of ``s`` and its standard error."""
    if m < 1:
        raise ValueError("m must be >= 1")
    archs = [sample_architecture_uniform(cfg, s, rng) for _ in range(m)]
    losses = np.array(evaluate_many(o, archs))
    stderr = float(np.std(losses, ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return float(np.mean(losses)), stderr
