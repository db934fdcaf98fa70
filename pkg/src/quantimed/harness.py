"""Experiment configuration, orchestration, persistence, and the CLI.

Config files are flat ``section.key = value`` text with ``#`` comments.
Every run is fully determined by (config bytes, seed): topology, data,
batch draws and quantization noise all derive from named substreams of
the single run seed, and repeated runs produce byte-identical output.

Subcommands:
    run         execute one config, write the record as CSV or JSON
    compare     run several configs, write one record per config
    topo-report build the configured topology and print its spectral report
    bounds      print theoretical rate-envelope values over a list of T

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import algorithms, metrics, topology
from .compute_model import (
    SpeedModel,
    deadline_for_batch,
    effective_batch,
    expected_inverse_speed,
)
from .metrics import MetricsRow
from .objectives import make_logistic, make_mlp, make_quadratic
from .quantize import QuantizerSpec
from .rng import substream

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunRecord",
    "parse_config",
    "parse_config_file",
    "config_to_text",
    "run_experiment",
    "sweep",
    "write_record",
    "read_record",
    "record_to_csv_text",
    "cli",
    "main",
]

CSV_COLUMNS = ["iter", "sim_time_s", "loss", "gap", "consensus", "grad_norm_sq", "bytes"]

ALGOS = set(algorithms.ALGORITHMS)
FAMILIES = {"quadratic", "logistic", "mlp"}
TOPOLOGIES = {"erdos_renyi", "ring", "path", "complete"}
SPEED_KINDS = {"uniform", "degenerate", "empirical"}
SCHEDULES = {"convex", "nonconvex", "explicit"}


class ConfigError(Exception):
    """Invalid configuration; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment description with all defaults resolved."""

    algo: str
    seed: int
    family: str
    n: int
    m: int
    p: int = 2
    in_dim: int = 8
    hidden: int = 10
    ridge: float = 0.1
    csv: str | None = None
    center_shift: float = 2.0
    topology_kind: str = "erdos_renyi"
    p_c: float | None = None
    kappa: float | None = None
    kappa_margin: float = 0.2
    quantizer_s: int | None = None
    quantizer_eta: float | None = None
    quantizer_lo: float | None = None
    speed_kind: str = "uniform"
    v_lo: float = 10.0
    v_hi: float = 90.0
    v: float | None = None
    speed_values: tuple[float, ...] | None = None
    T: int | None = None
    time_budget: float | None = None
    b: int | None = None
    T_d: float | None = None
    grid_samples: int = 200
    schedule_kind: str = "explicit"
    delta: float | None = None
    alpha: float | None = None
    eps: float | None = None
    tc: float = 0.0


def _parse_float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(part) for part in raw.split(",") if part.strip())


# config key -> (dataclass field, caster)
_KEYS = {
    "algo": ("algo", str),
    "seed": ("seed", int),
    "objective.family": ("family", str),
    "objective.n": ("n", int),
    "objective.m": ("m", int),
    "objective.p": ("p", int),
    "objective.in_dim": ("in_dim", int),
    "objective.hidden": ("hidden", int),
    "objective.ridge": ("ridge", float),
    "objective.csv": ("csv", str),
    "objective.center_shift": ("center_shift", float),
    "topology.kind": ("topology_kind", str),
    "topology.p_c": ("p_c", float),
    "topology.kappa": ("kappa", float),
    "topology.kappa_margin": ("kappa_margin", float),
    "quantizer.s": ("quantizer_s", int),
    "quantizer.eta": ("quantizer_eta", float),
    "quantizer.lo": ("quantizer_lo", float),
    "speed.kind": ("speed_kind", str),
    "speed.v_lo": ("v_lo", float),
    "speed.v_hi": ("v_hi", float),
    "speed.v": ("v", float),
    "speed.values": ("speed_values", _parse_float_list),
    "run.T": ("T", int),
    "run.time_budget": ("time_budget", float),
    "run.b": ("b", int),
    "run.T_d": ("T_d", float),
    "run.grid_samples": ("grid_samples", int),
    "schedule.kind": ("schedule_kind", str),
    "schedule.delta": ("delta", float),
    "schedule.alpha": ("alpha", float),
    "schedule.eps": ("eps", float),
    "comm.Tc": ("tc", float),
}
_FIELD_TO_KEY = {field: key for key, (field, _) in _KEYS.items()}


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate flat key-value config text.

    Unknown keys, duplicate keys, type mismatches, and cross-field
    inconsistencies raise :class:`ConfigError` with a line number where
    one applies.
    """
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, _, raw_value = line.partition("=")
        key, raw_value = key.strip(), raw_value.strip()
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first on line {lines[key]})", lineno)
        field_name, caster = _KEYS[key]
        try:
            values[field_name] = caster(raw_value)
        except ValueError:
            raise ConfigError(
                f"cannot parse {raw_value!r} for {key} as {caster.__name__}", lineno
            ) from None
        lines[key] = lineno

    def where(field_name: str) -> int | None:
        return lines.get(_FIELD_TO_KEY[field_name])

    for required in ("algo", "seed", "family", "n", "m"):
        if required not in values:
            raise ConfigError(
                f"missing required key {_FIELD_TO_KEY[required]!r}"
                + (" (determinism is mandatory, there is no entropy default)"
                   if required == "seed" else "")
            )

    config = ExperimentConfig(**values)
    _validate(config, where)
    return config


def _validate(c: ExperimentConfig, where) -> None:
    def fail(field_name: str, message: str) -> None:
        raise ConfigError(message, where(field_name))

    if c.algo not in ALGOS:
        fail("algo", f"algo must be one of {sorted(ALGOS)}, got {c.algo!r}")
    if c.family not in FAMILIES:
        fail("family", f"objective.family must be one of {sorted(FAMILIES)}")
    if c.n < 1 or c.m < 1:
        fail("n", "objective.n and objective.m must be >= 1")
    if c.topology_kind not in TOPOLOGIES:
        fail("topology_kind", f"topology.kind must be one of {sorted(TOPOLOGIES)}")
    if c.topology_kind == "erdos_renyi" and c.p_c is None:
        fail("topology_kind", "erdos_renyi topology needs topology.p_c")
    if c.p_c is not None and not (0.0 <= c.p_c <= 1.0):
        fail("p_c", "topology.p_c must lie in [0, 1]")
    if c.kappa_margin <= 0 and c.kappa is None:
        fail("kappa_margin", "topology.kappa_margin must be positive")

    if c.speed_kind not in SPEED_KINDS:
        fail("speed_kind", f"speed.kind must be one of {sorted(SPEED_KINDS)}")
    if c.speed_kind == "degenerate" and c.v is None:
        fail("speed_kind", "degenerate speed needs speed.v")
    if c.speed_kind == "empirical" and not c.speed_values:
        fail("speed_kind", "empirical speed needs speed.values")

    if (c.quantizer_s is None) != (c.quantizer_eta is None):
        fail("quantizer_s", "quantizer.s and quantizer.eta must be given together")
    if c.quantizer_s is not None and not (1 <= c.quantizer_s <= 16):
        fail("quantizer_s", "quantizer.s must be in 1..16")
    if c.algo == "dsgd" and c.quantizer_s is not None:
        fail("quantizer_s", "dsgd exchanges unquantized models; drop the quantizer "
                            "section or use qdsgd")

    if c.schedule_kind not in SCHEDULES:
        fail("schedule_kind", f"schedule.kind must be one of {sorted(SCHEDULES)}")
    if c.schedule_kind == "convex":
        if c.delta is None:
            fail("schedule_kind", "convex schedule needs schedule.delta")
        if not (0.0 < c.delta < 0.5):
            fail("delta", f"schedule.delta must lie in the open interval (0, 1/2), "
                          f"got {c.delta}")
    if c.schedule_kind == "explicit" and c.alpha is None:
        fail("schedule_kind", "explicit schedule needs schedule.alpha")
    if c.tc < 0:
        fail("tc", "comm.Tc must be >= 0")

    if c.algo == "async":
        if c.time_budget is None or c.time_budget <= 0:
            fail("algo", "async runs need a positive run.time_budget")
        if c.T is not None:
            fail("T", "async runs have no iteration count; drop run.T")
        if c.T_d is not None:
            fail("T_d", "async runs are deadline-free; drop run.T_d")
        if c.schedule_kind != "explicit":
            fail("schedule_kind", "async runs need an explicit schedule (no total T "
                                  "to derive one from)")
        if c.b is None:
            fail("algo", "async runs need run.b")
        if c.grid_samples < 1:
            fail("grid_samples", "run.grid_samples must be >= 1")
    else:
        if c.T is None or c.T < 0:
            fail("algo", f"{c.algo} runs need run.T >= 0")
        if c.time_budget is not None:
            fail("time_budget", "run.time_budget applies only to async runs")
        if c.algo == "quantimed":
            if c.b is None and c.T_d is None:
                fail("algo", "quantimed needs run.b (deadline derived) or run.T_d")
        else:
            if c.b is None:
                fail("algo", f"{c.algo} needs run.b")
            if c.T_d is not None:
                fail("T_d", f"{c.algo} uses a fixed batch; drop run.T_d")
    if c.b is not None and c.b < 1:
        fail("b", "run.b must be >= 1")
    if c.T_d is not None and c.T_d <= 0:
        fail("T_d", "run.T_d must be positive")

    if c.family == "logistic" and c.ridge < 0:
        fail("ridge", "objective.ridge must be >= 0")
    if c.family == "mlp" and c.hidden < 1:
        fail("hidden", "objective.hidden must be >= 1")


def parse_config_file(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def config_to_text(config: ExperimentConfig) -> str:
    """Canonical dump; parsing it back yields an equal config."""
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if value is None:
            continue
        lines.append(f"{_FIELD_TO_KEY[f.name]} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


@dataclass
class RunRecord:
    """A completed run: config echo, derived values, metric rows, digest.

    ``wall_seconds`` measures the simulation itself and is excluded from
    :meth:`content_hash`, which covers only the reproducible parts.
    """

    config_text: str
    derived: dict[str, float]
    rows: list[MetricsRow]
    models_digest: str
    clamp_events: int
    wall_seconds: float

    def content_hash(self) -> str:
        payload = json.dumps(
            {
                "config": self.config_text,
                "derived": self.derived,
                "rows": [_row_to_dict(r) for r in self.rows],
                "models_digest": self.models_digest,
                "clamp_events": self.clamp_events,
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode()).hexdigest()


def _build_speed_model(c: ExperimentConfig) -> SpeedModel:
    if c.speed_kind == "uniform":
        return SpeedModel.uniform(c.v_lo, c.v_hi)
    if c.speed_kind == "degenerate":
        return SpeedModel.degenerate(c.v)
    return SpeedModel.empirical(c.speed_values)


def _build_graph(c: ExperimentConfig) -> topology.Graph:
    if c.topology_kind == "erdos_renyi":
        return topology.build_erdos_renyi(c.n, c.p_c, substream(c.seed, "topology"))
    if c.topology_kind == "ring":
        return topology.build_ring(c.n)
    if c.topology_kind == "path":
        return topology.build_path(c.n)
    return topology.build_complete(c.n)


def _build_objective(c: ExperimentConfig):
    if c.family == "quadratic":
        return make_quadratic(c.n, c.m, c.p, c.seed, center_shift=c.center_shift)
    if c.family == "logistic":
        return make_logistic(c.n, c.m, c.p, seed=c.seed, csv_path=c.csv, ridge=c.ridge)
    return make_mlp(c.n, c.m, c.in_dim, c.hidden, c.seed)


def _build_sizes(c: ExperimentConfig) -> algorithms.StepSizes:
    if c.schedule_kind == "convex":
        return algorithms.stepsizes_convex(max(c.T, 1), c.delta)
    if c.schedule_kind == "nonconvex":
        return algorithms.stepsizes_nonconvex(max(c.T, 1))
    eps = 1.0 if c.eps is None else c.eps
    return algorithms.StepSizes(alpha=c.alpha, eps=eps, schedule="explicit")


def build_setup(config: ExperimentConfig) -> algorithms.RunSetup:
    """Materialize graph, mixing, data, and schedule from a config."""
    graph = _build_graph(config)
    kappa = config.kappa
    if kappa is None:
        kappa = topology.default_kappa(graph, config.kappa_margin)
    mixing = topology.laplacian_mixing(graph, kappa)
    objective, shards = _build_objective(config)
    speed_model = _build_speed_model(config)
    quantizer = None
    if config.quantizer_s is not None:
        quantizer = QuantizerSpec(
            eta=config.quantizer_eta, s=config.quantizer_s, lo=config.quantizer_lo
        )
    deadline = None
    if config.algo == "quantimed":
        deadline = config.T_d
        if deadline is None:
            deadline = deadline_for_batch(config.b, speed_model)
    return algorithms.RunSetup(
        algo=config.algo,
        graph=graph,
        mixing=mixing,
        objective=objective,
        shards=shards,
        speed_model=speed_model,
        sizes=_build_sizes(config),
        seed=config.seed,
        quantizer=quantizer,
        tc=config.tc,
        T=config.T,
        deadline=deadline,
        batch=config.b,
        time_budget=config.time_budget,
        grid_samples=config.grid_samples,
    )


def _derived_values(config: ExperimentConfig, setup: algorithms.RunSetup, kappa: float) -> dict:
    derived = {
        "kappa": float(kappa),
        "beta": float(setup.mixing.beta),
        "spectral_gap": float(setup.mixing.spectral_gap),
        "alpha": float(setup.sizes.alpha),
        "eps": float(setup.sizes.eps),
        "E_inv_V": float(expected_inverse_speed(setup.speed_model)),
        "K": float(setup.objective.K),
    }
    if setup.objective.mu is not None:
        derived["mu"] = float(setup.objective.mu)
    if setup.deadline is not None:
        derived["T_d"] = float(setup.deadline)
        derived["b_eff"] = float(
            effective_batch(setup.deadline, setup.speed_model, setup.shards.m)
        )
    return derived


def run_experiment(config: ExperimentConfig) -> RunRecord:
    """Execute one config deterministically and assemble its record."""
    started = time.perf_counter()
    setup = build_setup(config)
    kappa = config.kappa
    if kappa is None:
        kappa = topology.default_kappa(setup.graph, config.kappa_margin)
    sim = algorithms.run(setup)
    digest = hashlib.sha256(
        np.ascontiguousarray(sim.final_models, dtype="<f8").tobytes()
    ).hexdigest()
    return RunRecord(
        config_text=config_to_text(config),
        derived=_derived_values(config, setup, kappa),
        rows=sim.rows,
        models_digest=digest,
        clamp_events=sim.clamp_events,
        wall_seconds=time.perf_counter() - started,
    )


def sweep(configs, jobs: int = 1) -> list[RunRecord]:
    """Run several configs independently; output order matches input order."""
    configs = list(configs)
    if jobs <= 1 or len(configs) <= 1:
        return [run_experiment(c) for c in configs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_experiment, configs))


def _fmt(value: float | None) -> str:
    if value is None:
        return "nan"
    return repr(float(value))


def _row_to_dict(row: MetricsRow) -> dict:
    return {
        "iter": row.iteration,
        "sim_time_s": row.sim_time_s,
        "loss": row.loss,
        "gap": row.gap,
        "consensus": row.consensus,
        "grad_norm_sq": row.grad_norm_sq,
        "bytes": row.bytes,
    }


def _row_from_dict(d: dict) -> MetricsRow:
    return MetricsRow(
        iteration=int(d["iter"]),
        sim_time_s=float(d["sim_time_s"]),
        loss=float(d["loss"]),
        gap=None if d["gap"] is None else float(d["gap"]),
        consensus=float(d["consensus"]),
        grad_norm_sq=float(d["grad_norm_sq"]),
        bytes=int(d["bytes"]),
    )


def record_to_csv_text(record: RunRecord) -> str:
    """Metric rows as CSV, formatted deterministically (repr floats)."""
    lines = [",".join(CSV_COLUMNS)]
    for r in record.rows:
        lines.append(
            f"{r.iteration},{_fmt(r.sim_time_s)},{_fmt(r.loss)},{_fmt(r.gap)},"
            f"{_fmt(r.consensus)},{_fmt(r.grad_norm_sq)},{r.bytes}"
        )
    return "\n".join(lines) + "\n"


def write_record(record: RunRecord, path: str | Path, format: str | None = None) -> None:
    """Write CSV (rows only) or JSON (full record, lossless round-trip)."""
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "json")
    if fmt == "csv":
        path.write_text(record_to_csv_text(record))
    elif fmt == "json":
        payload = {
            "config": record.config_text,
            "derived": record.derived,
            "rows": [_row_to_dict(r) for r in record.rows],
            "models_digest": record.models_digest,
            "clamp_events": record.clamp_events,
            "wall_seconds": record.wall_seconds,
        }
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def read_record(path: str | Path) -> RunRecord:
    """Read a JSON record back; CSV holds rows only and cannot round-trip."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        raise ValueError("CSV records carry only metric rows; read the JSON record")
    payload = json.loads(path.read_text())
    return RunRecord(
        config_text=payload["config"],
        derived={k: float(v) for k, v in payload["derived"].items()},
        rows=[_row_from_dict(d) for d in payload["rows"]],
        models_digest=payload["models_digest"],
        clamp_events=int(payload["clamp_events"]),
        wall_seconds=float(payload["wall_seconds"]),
    )


# ----------------------------------------------------------------------
# command-line interface


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quantimed",
        description="Deterministic simulator for deadline-based, quantized "
                    "decentralized SGD and its gossip baselines.",
    )
    sub = parser.add_subparsers(dest="command")

    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("--config", help="path to a flat key-value config file")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="output path (.csv or .json)")
    p_run.add_argument("--format", choices=["csv", "json"], default=None)

    p_cmp = sub.add_parser("compare", help="run several configs side by side")
    p_cmp.add_argument("--configs", nargs="+", required=True)
    p_cmp.add_argument("--out", required=True, help="output directory")
    p_cmp.add_argument("--jobs", type=int, default=1)

    p_topo = sub.add_parser("topo-report", help="spectral report for the configured topology")
    p_topo.add_argument("--config", required=True)

    p_bounds = sub.add_parser("bounds", help="theoretical rate-envelope table")
    p_bounds.add_argument("--config", required=True)
    p_bounds.add_argument("--T-list", dest="t_list", required=True,
                          help="comma-separated iteration counts")
    return parser


def _override_seed(config: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None:
        return config
    text = config_to_text(config)
    lines = [
        f"seed = {seed}" if line.startswith("seed =") else line
        for line in text.splitlines()
    ]
    return parse_config("\n".join(lines))


def _cmd_run(args) -> int:
    if not args.config:
        print(_build_parser().format_usage(), file=sys.stderr)
        print("run needs --config <path>", file=sys.stderr)
        return 1
    config = _override_seed(parse_config_file(args.config), args.seed)
    record = run_experiment(config)
    if args.out:
        write_record(record, args.out, format=args.format)
        print(f"wrote {args.out} (hash {record.content_hash()[:12]})")
    else:
        fmt = args.format or "json"
        if fmt == "csv":
            sys.stdout.write(record_to_csv_text(record))
        else:
            tmp = {
                "config": record.config_text,
                "derived": record.derived,
                "rows": [_row_to_dict(r) for r in record.rows],
                "models_digest": record.models_digest,
                "clamp_events": record.clamp_events,
                "wall_seconds": record.wall_seconds,
            }
            json.dump(tmp, sys.stdout, sort_keys=True, indent=2)
            sys.stdout.write("\n")
    return 0


def _cmd_compare(args) -> int:
    configs = [parse_config_file(path) for path in args.configs]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = sweep(configs, jobs=args.jobs)
    for path, record in zip(args.configs, records):
        stem = Path(path).stem
        write_record(record, out_dir / f"{stem}.json", format="json")
        write_record(record, out_dir / f"{stem}.csv", format="csv")
        last = record.rows[-1]
        print(
            f"{stem}: final loss {last.loss:.6g} at t={last.sim_time_s:.6g}s, "
            f"hash {record.content_hash()[:12]}"
        )
    return 0


def _cmd_topo_report(args) -> int:
    config = parse_config_file(args.config)
    setup = build_setup(config)
    report = topology.validate_mixing(setup.mixing.matrix, graph=setup.graph)
    print(report.summary())
    return 0


def _cmd_bounds(args) -> int:
    config = parse_config_file(args.config)
    if config.schedule_kind == "explicit":
        raise ConfigError("bounds need a convex or nonconvex schedule")
    setup = build_setup(config)
    t_d = setup.deadline
    if t_d is None:
        if config.b is None:
            raise ConfigError("bounds need run.b or run.T_d to set the deadline")
        t_d = deadline_for_batch(config.b, setup.speed_model)
    constants = metrics.constants_for(
        setup.objective, setup.shards, setup.mixing, setup.quantizer,
        setup.speed_model, t_d,
    )
    t_values = [int(part) for part in args.t_list.split(",") if part.strip()]
    if config.schedule_kind == "convex":
        print("T,bound")
        for T in t_values:
            print(f"{T},{metrics.convex_rate_bound(constants, T, config.delta)!r}")
        print(f"# informational T_min: {metrics.t_min_convex(constants, config.delta):.6g}")
    else:
        print("T,convergence_bound,consensus_bound")
        for T in t_values:
            conv, cons = metrics.nonconvex_rate_bounds(constants, T)
            print(f"{T},{conv!r},{cons!r}")
        print(f"# informational T_min: {metrics.t_min_nonconvex(constants):.6g}")
    return 0


def cli(argv=None) -> int:
    """Entry point returning an exit code instead of raising SystemExit."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    handlers = {
        "run": _cmd_run,
        "compare": _cmd_compare,
        "topo-report": _cmd_topo_report,
        "bounds": _cmd_bounds,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
