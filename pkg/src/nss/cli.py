"""Command-line interface.

Every command parses, validates, delegates to the library and serializes.
Exit codes: 0 success, 1 validation, 2 runtime or oracle failure, 3 cap exhaustion.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import itertools
import json
import os
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nss import __version__
from nss.analysis import (
    EvalRecord,
    deviation,
    edf,
    flops_band_filter,
    order_pattern,
    pareto_front,
    random_baseline,
    records_from_csv,
    records_to_csv,
    space_ordering_stats,
)
from nss.errors import CapExhaustedError, ConfigurationError, NSSError, OracleError
from nss.objectives import OracleSpec, make_oracle, read_table
from nss.sampling import rng_from_state, rng_state, sample_architecture_uniform
from nss.search import (
    HISTORY_FIELDS,
    EliteSpace,
    SearchConfig,
    extract_elite_space,
    load_checkpoint,
    run_nas_in_space,
    run_nss,
    save_checkpoint,
)
from nss.space_model import (
    ExpandedSpaceConfig,
    NetworkConfig,
    NetworkSpace,
    enumerate_space,
    full_space,
    network_flops,
)
from nss.supernet import (
    SupernetConfig,
    SupernetOracle,
    SyntheticTask,
    bilevel_nss,
    check_task,
    save_params,
    train_supernet,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_CAP = 3

GEN_TABLE_LIMIT = 1_000_000


# --- experiment configuration ---------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    space: ExpandedSpaceConfig
    oracle: OracleSpec
    search: SearchConfig
    output: str = "runs"
    seed: int = 0
    supernet: SupernetConfig = SupernetConfig()
    task: SyntheticTask = SyntheticTask()

    def __post_init__(self) -> None:
        if self.search.seed != self.seed:
            raise ConfigurationError("search.seed must equal the experiment seed")
        if self.oracle.kind == "tabular" and "path" in self.oracle.params:
            path = Path(self.oracle.params["path"])
            if path.exists():
                with open(path) as fh:
                    header = next((ln for ln in fh if not ln.startswith("#")), "").strip().split(",")
                n = self.space.num_stages
                if len(header) not in (2 * n + 1, 2 * n + 2):
                    raise ConfigurationError(f"table {path} has {len(header)} columns; a {n}-stage space needs "
                                             f"{2 * n + 1} (or {2 * n + 2} with flops)")
        if self.oracle.kind == "toy_supernet":
            try:
                check_task(self.task, self.space)
            except ValueError as exc:
                raise ConfigurationError(str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "space": self.space.to_dict(),
            "oracle": self.oracle.to_dict(),
            "search": self.search.to_dict(),
            "output": self.output,
            "seed": self.seed,
            "supernet": dataclasses.asdict(self.supernet),
            "task": self.task.to_dict(),
        }

    def digest(self) -> str:
        # Where results land is not part of the experiment's identity.
        doc = self.to_dict()
        del doc["output"]
        return config_hash(doc)


EXPERIMENT_KEYS = {"space", "oracle", "search", "output", "seed", "supernet", "task"}


def config_hash(doc) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _section(cls, data: dict, name: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"'{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown field(s) in '{name}': {unknown}")
    try:
        return cls(**data)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


def format_flops(f: float) -> str:
    """600e6 -> '600MF', 1.6e9 -> '1.6GF'."""
    if f >= 1e9:
        return f"{f / 1e9:g}GF"
    if f >= 1e6:
        return f"{f / 1e6:g}MF"
    if f >= 1e3:
        return f"{f / 1e3:g}KF"
    return f"{f:g}F"


def parse_flops(text: str) -> float:
    t = text.strip().upper()
    scale = 1.0
    for suffix, mult in (("GF", 1e9), ("MF", 1e6), ("KF", 1e3), ("F", 1.0)):
        if t.endswith(suffix):
            t, scale = t[: -len(suffix)], mult
            break
    try:
        value = float(t) * scale
    except ValueError:
        raise ConfigurationError(f"cannot parse FLOPs value {text!r}") from None
    if not value > 0:
        raise ConfigurationError(f"FLOPs target must be positive, got {text!r}")
    return value


def read_json(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return doc


def _sweep_label(key: str, value) -> str:
    if key == "flops_target":
        return format_flops(float(value))
    return f"{key}-{value}"


def expand_experiment(doc: dict, seed: int | None = None, targets: list[float] | None = None,
                      output: str | None = None) -> list[tuple[str, ExperimentConfig]]:
    """Validate ``doc`` and expand list-valued search fields into (label, config) entries.

    Labels name subdirectories; a config without lists yields one entry labelled "".
    """
    unknown = sorted(set(doc) - EXPERIMENT_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown top-level field(s): {unknown}")
    for key in ("space", "oracle", "search"):
        if key not in doc:
            raise ConfigurationError(f"missing required section '{key}'")
    space = _section(ExpandedSpaceConfig, doc["space"], "space")
    if not isinstance(doc["oracle"], dict):
        raise ConfigurationError("'oracle' must be an object")
    oracle = OracleSpec.from_dict(doc["oracle"])
    sn = _section(SupernetConfig, doc.get("supernet", {}), "supernet")
    task = _section(SyntheticTask, doc.get("task", {}), "task")
    search_doc = dict(doc["search"]) if isinstance(doc["search"], dict) else None
    if search_doc is None:
        raise ConfigurationError("'search' must be an object")
    if seed is None:
        seed = doc.get("seed", search_doc.get("seed", 0))
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigurationError(f"seed must be a nonnegative integer, got {seed!r}")
    search_doc["seed"] = seed
    if targets is not None:
        search_doc["flops_target"] = targets if len(targets) > 1 else targets[0]
    out = output if output is not None else doc.get("output", "runs")
    if not isinstance(out, str):
        raise ConfigurationError("'output' must be a string path")

    sweep_keys = sorted(k for k, v in search_doc.items() if isinstance(v, list))
    for k in sweep_keys:
        if not search_doc[k]:
            raise ConfigurationError(f"search.{k}: empty sweep list")
    entries = []
    for combo in itertools.product(*(search_doc[k] for k in sweep_keys)):
        fields = {**search_doc, **dict(zip(sweep_keys, combo))}
        search = _section(SearchConfig, fields, "search")
        label = "_".join(_sweep_label(k, v) for k, v in zip(sweep_keys, combo))
        entries.append((label, ExperimentConfig(space, oracle, search, out, seed, sn, task)))
    labels = [lb for lb, _ in entries]
    if len(set(labels)) != len(labels):
        raise ConfigurationError("sweep values produce duplicate directory names")
    return entries


def load_experiment(path: str | Path, **overrides) -> list[tuple[str, ExperimentConfig]]:
    return expand_experiment(read_json(path), **overrides)


def single_entry(entries: list[tuple[str, ExperimentConfig]]) -> ExperimentConfig:
    if len(entries) != 1:
        raise ConfigurationError(
            f"this command takes a single configuration but the sweep expands to {len(entries)}; "
            "pin the swept field (e.g. with --target)"
        )
    return entries[0][1]


# --- serialization ----------------------------------------------------------


def provenance(digest: str, seed) -> dict:
    return {"engine": f"nss {__version__}", "config": digest, "seed": seed}


def provenance_line(digest: str, seed) -> str:
    return f"# engine=nss {__version__} config={digest} seed={seed}"


def dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        write_text(Path(out), text)


def history_csv(history, header: str) -> str:
    buf = io.StringIO()
    buf.write(header + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_FIELDS)
    for r in history:
        writer.writerow([r.step, *(repr(float(v)) for v in r.as_row()[1:])])
    return buf.getvalue()


def parse_int_list(text: str, name: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigurationError(f"--{name} expects comma-separated integers, got {text!r}") from None


# --- commands ---------------------------------------------------------------


def cmd_flops(args) -> int:
    doc = read_json(args.config) if args.config else {}
    unknown = sorted(set(doc) - {"space", "depths", "widths"})
    if unknown:
        raise ConfigurationError(f"unknown field(s) in flops config: {unknown}")
    cfg = _section(ExpandedSpaceConfig, doc.get("space", {}), "space")
    depths = parse_int_list(args.depths, "depths") if args.depths else doc.get("depths")
    widths = parse_int_list(args.widths, "widths") if args.widths else doc.get("widths")
    if depths is None or widths is None:
        raise ConfigurationError("both --depths and --widths are required (or 'depths'/'widths' in --config)")
    a = NetworkConfig(tuple(depths), tuple(widths))
    a.validate(cfg)
    br = network_flops(cfg, a)
    digest = config_hash({"space": cfg.to_dict(), "depths": list(a.depths), "widths": list(a.widths)})
    if args.json:
        text = dump_json({
            "provenance": provenance(digest, args.seed),
            "depths": list(a.depths),
            "widths": list(a.widths),
            "flops": br.as_record(),
        })
    else:
        lines = [provenance_line(digest, args.seed)]
        lines += [f"{k:<8} {v}" for k, v in br.as_record().items()]
        text = "\n".join(lines) + "\n"
    emit(text, args.out)
    return EXIT_OK


def _run_entry(label: str, exp: ExperimentConfig, out_root: Path, resume: bool, stop_at: int | None,
               n_records: int = 0) -> None:
    out = out_root / label if label else out_root
    digest = exp.digest()
    header = provenance_line(digest, exp.seed)
    rng = np.random.default_rng(exp.seed)
    ckpt_path = out / "checkpoint.json"
    final_rng: dict = {}

    def remember(state) -> None:
        # Checkpoint the stream as it stood before elite extraction, so `elite` can replay it.
        if state.step == exp.search.total_steps:
            final_rng["state"] = rng_state(rng)

    params = None
    oracle = None
    if exp.oracle.kind == "toy_supernet":
        if resume or stop_at is not None:
            raise ConfigurationError("--resume/--stop-at are not supported for the toy supernet oracle")
        state, elite, params = bilevel_nss(exp.task, exp.space, exp.search, exp.supernet, rng, on_step=remember)
    else:
        state = None
        if resume and ckpt_path.exists():
            cfg0, search0, state, rng = load_checkpoint(ckpt_path)
            if cfg0 != exp.space or search0 != exp.search:
                raise ConfigurationError(f"{ckpt_path} was written by a different configuration")
        oracle = make_oracle(exp.oracle, exp.space)
        try:
            state, elite = run_nss(exp.space, exp.search, oracle, state=state, rng=rng, stop_at=stop_at,
                                   on_step=remember)
        except BaseException:
            oracle.close()
            raise

    write_text(out / "config.json", dump_json({"provenance": provenance(digest, exp.seed), **exp.to_dict()}))
    write_text(out / "history.csv", history_csv(state.history, header))
    ckpt_rng = rng_from_state(final_rng["state"]) if "state" in final_rng else rng
    save_checkpoint(ckpt_path, exp.space, exp.search, state, ckpt_rng)
    if params is not None:
        save_params(out / "supernet.json", params, exp.task, exp.space, exp.seed, state.step)
    if elite is None:
        if oracle is not None:
            oracle.close()
        print(f"{label or '.'}: stopped at step {state.step}/{exp.search.total_steps}")
        return
    write_text(out / "elite.json", elite_json(elite, exp.space, exp.search, digest, exp.seed))
    if n_records:
        if oracle is None:
            oracle = SupernetOracle(params, exp.task, exp.space, exp.supernet.loss_kind)
        records = random_baseline(exp.space, elite.space, oracle, n_records, np.random.default_rng(exp.seed))
        write_text(out / "records.csv", records_to_csv(records, exp.space.num_stages, header))
    if oracle is not None:
        oracle.close()
    print(f"{label or '.'}: elite mean FLOPs {format_flops(elite.mean_flops)} "
          f"deviation {100 * elite.deviation:.2f}% ranges {json.dumps(elite.space.describe(exp.space))}")


def elite_json(elite: EliteSpace, cfg: ExpandedSpaceConfig, search: SearchConfig, digest: str, seed) -> str:
    return dump_json({
        "provenance": provenance(digest, seed),
        "space_config": cfg.to_dict(),
        "flops_target": search.flops_target,
        "elite": elite.to_dict(cfg),
    })


def read_elite(path: str | Path) -> tuple[ExpandedSpaceConfig, EliteSpace]:
    doc = read_json(path)
    try:
        return ExpandedSpaceConfig.from_dict(doc["space_config"]), EliteSpace.from_dict(doc["elite"])
    except KeyError as exc:
        raise ConfigurationError(f"{path}: not an elite-space file (missing {exc})") from None


def cmd_search(args) -> int:
    targets = [parse_flops(t) for t in args.target.split(",")] if args.target else None
    entries = load_experiment(args.config, seed=args.seed, targets=targets, output=args.out)
    if args.stop_at is not None and args.stop_at < 0:
        raise ConfigurationError("--stop-at must be nonnegative")
    if args.records < 0:
        raise ConfigurationError("--records must be nonnegative")
    for label, exp in entries:
        _run_entry(label, exp, Path(exp.output), args.resume, args.stop_at, args.records)
    return EXIT_OK


def cmd_elite(args) -> int:
    cfg, search, state, rng = load_checkpoint(args.checkpoint)
    if state.step < search.total_steps:
        raise ConfigurationError(f"checkpoint is at step {state.step} of {search.total_steps}; finish the search first")
    if args.n_elite is not None:
        search = dataclasses.replace(search, n_elite=args.n_elite)
    if args.seed is not None:
        rng = np.random.default_rng(args.seed)
    seed = search.seed if args.seed is None else args.seed
    elite = extract_elite_space(state.theta, cfg, search, rng)
    digest = config_hash({"space": cfg.to_dict(), "search": search.to_dict(), "theta": state.theta.to_dict()})
    emit(elite_json(elite, cfg, search, digest, seed), args.out)
    return EXIT_OK


NAS_FIELDS = ("flops", "deviation_pct", "samples_to_constraint", "error")


def cmd_nas(args) -> int:
    targets = [parse_flops(args.target)] if args.target else None
    exp = single_entry(load_experiment(args.config, seed=args.seed, targets=targets))
    if args.space == "full":
        cfg, space = full_space(exp.space)
    else:
        space_cfg, elite = read_elite(args.space)
        if space_cfg != exp.space:
            raise ConfigurationError(f"{args.space} was extracted under a different space configuration")
        cfg, space = exp.space, elite.space
    space.validate(cfg)
    rng = np.random.default_rng(exp.seed)
    with make_oracle(exp.oracle, exp.space) as oracle:
        res = run_nas_in_space(space, oracle, cfg, exp.search, rng)
    digest = config_hash({**exp.to_dict(), "nas_space": args.space if args.space == "full" else space.to_dict()})
    n = cfg.num_stages
    buf = io.StringIO()
    buf.write(provenance_line(digest, exp.seed) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"d{i}" for i in range(1, n + 1)] + [f"w{i}" for i in range(1, n + 1)] + list(NAS_FIELDS))
    writer.writerow([*res.best.as_row(), res.flops, repr(deviation(res.flops, exp.search.flops_target)),
                     res.samples_to_constraint, repr(float(res.error))])
    emit(buf.getvalue(), args.out)
    return EXIT_OK


def _input_seed(text: str):
    first = text.split("\n", 1)[0]
    if first.startswith("#"):
        for tok in first.split():
            if tok.startswith("seed="):
                return tok[5:]
    return "none"


def cmd_analyze(args) -> int:
    if args.action == "stats" and args.spaces:
        return _space_stats(args)
    if not args.records:
        raise ConfigurationError("--records is required")
    try:
        text = Path(args.records).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read {args.records}: {exc.strerror}") from None
    records = records_from_csv(text)
    target = parse_flops(args.target) if args.target else None
    opts = {"action": args.action, "target": target, "band": args.band, "metric": args.metric}
    digest = config_hash({"input": hashlib.sha256(text.encode()).hexdigest(), **opts})
    header = provenance_line(digest, _input_seed(text))
    n = len(records[0].config.depths)

    if args.band is not None and target is None:
        raise ConfigurationError("--band needs --target")
    if args.action == "pareto":
        out = records_to_csv(pareto_front(records), n, header)
    elif args.action == "band":
        if target is None:
            raise ConfigurationError("analyze band needs --target")
        out = records_to_csv(flops_band_filter(records, target, 0.1 if args.band is None else args.band), n, header)
    elif args.action == "edf":
        chosen = records if args.band is None else flops_band_filter(records, target, args.band)
        if not chosen:
            raise ConfigurationError("no records inside the FLOPs band")
        values = [r.error if args.metric == "error" else r.flops for r in chosen]
        out = edf(values).to_csv(header)
    else:
        out = _record_stats(records, header)
    emit(out, args.out)
    return EXIT_OK


def _record_stats(records: list[EvalRecord], header: str) -> str:
    err = np.array([r.error for r in records])
    fl = np.array([r.flops for r in records], dtype=float)
    rows = [
        ("n", len(records)),
        ("error_mean", float(err.mean())),
        ("error_median", float(np.median(err))),
        ("error_min", float(err.min())),
        ("flops_mean", float(fl.mean())),
        ("flops_min", int(fl.min())),
        ("flops_max", int(fl.max())),
    ]
    for symbol, pick in (("d", lambda r: r.config.depths), ("w", lambda r: r.config.widths)):
        pats = [order_pattern(pick(r), symbol) for r in records]
        for p in sorted(set(pats)):
            rows.append((f"pattern:{p}", pats.count(p) / len(pats)))
    return _stat_csv(rows, header)


def _stat_csv(rows, header: str) -> str:
    buf = io.StringIO()
    buf.write(header + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["statistic", "value"])
    for k, v in rows:
        writer.writerow([k, repr(v) if isinstance(v, float) else v])
    return buf.getvalue()


def _space_stats(args) -> int:
    loaded = [read_elite(p) for p in args.spaces]
    cfg = loaded[0][0]
    if any(c != cfg for c, _ in loaded):
        raise ConfigurationError("elite files come from different space configurations")
    stats = space_ordering_stats(cfg, [e.space for _, e in loaded])
    rows = [("n", len(loaded))]
    rows += [(f"depth_pattern:{k}", v) for k, v in stats.depth_frequencies.items()]
    rows += [(f"width_pattern:{k}", v) for k, v in stats.width_frequencies.items()]
    digest = config_hash({"spaces": [e.space.to_dict() for _, e in loaded], "space_config": cfg.to_dict()})
    emit(_stat_csv(rows, provenance_line(digest, "none")), args.out)
    return EXIT_OK


def cmd_supernet_train(args) -> int:
    exp = single_entry(load_experiment(args.config, seed=args.seed))
    check_task(exp.task, exp.space)
    wide, whole = full_space(exp.space)
    rng = np.random.default_rng(exp.seed)
    params, trace = train_supernet(exp.task, exp.space, exp.supernet,
                                   lambda r: sample_architecture_uniform(wide, whole, r), rng)
    out = Path(args.out if args.out is not None else exp.output)
    digest = exp.digest()
    save_params(out / "supernet.json", params, exp.task, exp.space, exp.seed, exp.supernet.steps)
    lines = [provenance_line(digest, exp.seed), "step,loss"]
    lines += [f"{i},{float(v)!r}" for i, v in enumerate(trace)]
    write_text(out / "trace.csv", "\n".join(lines) + "\n")
    if len(trace):
        print(f"trained {len(trace)} steps: loss {trace[0]:.4g} -> {trace[-1]:.4g}")
    return EXIT_OK


def cmd_gen_table(args) -> int:
    exp = single_entry(load_experiment(args.config, seed=args.seed))
    if exp.oracle.kind == "tabular":
        raise ConfigurationError("gen-table needs a generating oracle, not a table")
    if args.space == "full":
        cfg, space = full_space(exp.space)
    else:
        space_cfg, elite = read_elite(args.space)
        if space_cfg != exp.space:
            raise ConfigurationError(f"{args.space} was extracted under a different space configuration")
        cfg, space = exp.space, elite.space
    if args.stride < 1:
        raise ConfigurationError("--stride must be >= 1")
    size = 1
    for i in range(cfg.num_stages):
        size *= len(space.depth_values(cfg, i)) * len(space.width_values(cfg, i, args.stride))
    if size > GEN_TABLE_LIMIT:
        raise ConfigurationError(f"table would hold {size} rows (limit {GEN_TABLE_LIMIT}); raise --stride")
    n = cfg.num_stages
    buf = io.StringIO()
    digest = config_hash({**exp.to_dict(), "table_space": args.space if args.space == "full" else space.to_dict(),
                          "stride": args.stride, "with_flops": args.with_flops})
    buf.write(provenance_line(digest, exp.seed) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    extra = ["flops"] if args.with_flops else []
    writer.writerow([f"d{i}" for i in range(1, n + 1)] + [f"w{i}" for i in range(1, n + 1)] + extra + ["error"])
    with make_oracle(exp.oracle, exp.space) as oracle:
        for a in enumerate_space(cfg, space, args.stride):
            flops = [network_flops(cfg, a).total] if args.with_flops else []
            writer.writerow([*a.as_row(), *flops, repr(float(oracle.evaluate(a)))])
    emit(buf.getvalue(), args.out)
    if args.out not in (None, "-"):
        read_table(args.out, n)  # the file must load back as a tabular oracle
    return EXIT_OK


# --- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nss", description="Network space search engine.")
    p.add_argument("--version", action="version", version=f"nss {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("flops", help="FLOPs breakdown of one network")
    f.add_argument("--depths", help="comma-separated per-stage depths, e.g. 1,1,1")
    f.add_argument("--widths", help="comma-separated per-stage widths, e.g. 16,16,16")
    f.add_argument("--config", help="JSON with optional 'space', 'depths', 'widths'")
    f.add_argument("--json", action="store_true", help="machine-readable output")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out")
    f.set_defaults(func=cmd_flops)

    s = sub.add_parser("search", help="run network space search; one subdirectory per sweep entry")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--target", help="FLOPs target(s), e.g. 600MF or 600MF,1.6GF,4GF")
    s.add_argument("--out", help="output directory (overrides the config's 'output')")
    s.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    s.add_argument("--stop-at", type=int, help="stop after this many steps without extracting")
    s.add_argument("--records", type=int, default=0, metavar="K",
                   help="also write K uniform elite-space architectures to records.csv")
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("elite", help="extract an elite space from a finished checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n-elite", type=int)
    e.add_argument("--seed", type=int, help="draw with a fresh stream instead of the checkpoint's")
    e.add_argument("--out")
    e.set_defaults(func=cmd_elite)

    n = sub.add_parser("nas", help="architecture search inside an elite space or the full space")
    n.add_argument("--config", required=True)
    n.add_argument("--space", required=True, help="elite.json path, or 'full'")
    n.add_argument("--target")
    n.add_argument("--seed", type=int)
    n.add_argument("--out")
    n.set_defaults(func=cmd_nas)

    a = sub.add_parser("analyze", help="Pareto fronts, EDFs, FLOPs bands and summary statistics")
    a.add_argument("action", choices=["pareto", "edf", "band", "stats"])
    a.add_argument("--records", help="records CSV: d1..dN,w1..wN,flops,error")
    a.add_argument("--spaces", nargs="+", help="elite.json files (stats only)")
    a.add_argument("--target")
    a.add_argument("--band", type=float)
    a.add_argument("--metric", choices=["error", "flops"], default="error")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("supernet-train", help="train the toy weight-sharing network on its synthetic task")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_supernet_train)

    g = sub.add_parser("gen-table", help="write an oracle-evaluated lookup table")
    g.add_argument("--config", required=True)
    g.add_argument("--space", default="full")
    g.add_argument("--stride", type=int, default=1, help="width stride within each window")
    g.add_argument("--with-flops", action="store_true", help="add a flops column (records format)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_table)
    return p


def _check_threads() -> None:
    raw = os.environ.get("NSS_THREADS")
    if raw is None:
        return
    try:
        ok = int(raw) >= 1
    except ValueError:
        ok = False
    if not ok:
        raise ConfigurationError(f"NSS_THREADS must be a positive integer, got {raw!r}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _check_threads()
        return args.func(args)
    except CapExhaustedError as exc:
        print(f"nss: {exc}", file=sys.stderr)
        if exc.best is not None:
            print(f"nss: closest config {exc.best} at deviation {exc.best_deviation:.4f} "
                  f"after {exc.draws} draws", file=sys.stderr)
        return EXIT_CAP
    except OracleError as exc:
        print(f"nss: oracle failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigurationError, ValueError) as exc:
        print(f"nss: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NSSError as exc:
        print(f"nss: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
