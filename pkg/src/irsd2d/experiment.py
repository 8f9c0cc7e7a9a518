"""Config loading, seeded sweeps and CSV/TSV persistence.

Config files are TOML with three optional tables::

    [network]      # NetworkConfig fields; dB/dBm spellings accepted
    n_pairs = 3
    noise_power_dbm = -80

    [ppo]          # PpoHyperparams fields
    learning_rate = 1e-4

    [experiment]
    sweep_variable = "K"           # K | N | r_min | p_max
    sweep_values = [4, 8, 16]
    schemes = ["PROPOSED", "RPS"]
    seeds = [0, 1, 2]
    scale = "desk"                 # smoke | desk | full

Anything missing falls back to the scale preset, then to the built-in
defaults.  Unknown tables or keys are rejected with the offending line.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import hashlib
import io
import json
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .baselines import SchemeId, make_adapter
from .channel import PathLossParams, Position3
from .env import NetworkConfig
from .mlp import load_checkpoint, save_checkpoint
from .ppo import PpoAgent, PpoHyperparams, RunningMeanStd, TrainResult, evaluate, train, write_curve_csv

MAX_PAIRS = 10
SWEEP_FIELDS = {"K": "n_elements", "N": "n_pairs", "r_min": "r_min", "p_max": "p_max"}

# Training budgets.  "full" keeps the plain-SGD optimizer and learning rate
# from the source setup; the smaller budgets switch to Adam, which converges
# within a few thousand episodes where plain SGD at 1e-4 barely moves.
SCALE_PRESETS = {
    "smoke": dict(max_episodes=20, steps_per_episode=8, batch_size=32, eval_episodes=4, eval_steps=2,
                  optimizer="adam", learning_rate=1e-3, epochs_per_update=2),
    "desk": dict(max_episodes=1000, steps_per_episode=32, eval_episodes=50, eval_steps=4,
                 optimizer="adam", learning_rate=1e-3, epochs_per_update=10),
    "full": dict(max_episodes=5000, steps_per_episode=100, eval_episodes=500, eval_steps=None),
}

_NETWORK_KEYS = {f.name for f in dataclasses.fields(NetworkConfig)} - {"path_loss", "irs_position", "discount"}
_PATH_LOSS_KEYS = {f.name for f in dataclasses.fields(PathLossParams)}
_NETWORK_EXTRA = {"irs_x", "irs_y", "irs_z", "noise_power_dbm", "p_max_dbm", "beta0_db"}
_PPO_KEYS = {f.name for f in dataclasses.fields(PpoHyperparams)}
_EXPERIMENT_KEYS = {"sweep_variable", "sweep_values", "schemes", "seeds", "scale", "output_dir", "rps_per_episode"}
_TABLES = {
    "network": _NETWORK_KEYS | _PATH_LOSS_KEYS | _NETWORK_EXTRA,
    "ppo": _PPO_KEYS,
    "experiment": _EXPERIMENT_KEYS,
}


class ConfigError(ValueError):
    """Invalid or unparseable experiment configuration."""


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class ExperimentSpec:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    hyper: PpoHyperparams = field(default_factory=PpoHyperparams)
    sweep_variable: str = "K"
    sweep_values: tuple = (4, 8, 16)
    schemes: tuple = tuple(SchemeId)
    seeds: tuple = (0,)
    output_dir: str = "runs"
    scale: str = "desk"
    rps_per_episode: bool = False

    def __post_init__(self):
        if self.sweep_variable not in SWEEP_FIELDS:
            raise ConfigError(f"sweep_variable must be one of {sorted(SWEEP_FIELDS)}, got {self.sweep_variable!r}")
        if not self.sweep_values:
            raise ConfigError("sweep_values must be nonempty")
        if not self.schemes:
            raise ConfigError("schemes must be nonempty")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {list(self.seeds)}")
        for v in self.sweep_values:
            _check_sweep_value(self.sweep_variable, v)
        if self.network.n_pairs > MAX_PAIRS:
            raise ConfigError(f"n_pairs must be <= {MAX_PAIRS}, got {self.network.n_pairs}")

    def cell_config(self, value) -> NetworkConfig:
        return self.network.replace(**{SWEEP_FIELDS[self.sweep_variable]: value})

    def resolved(self) -> dict:
        """Plain-data view of every setting that influences the results."""
        net = dataclasses.asdict(self.network)
        return {
            "network": net,
            "ppo": dataclasses.asdict(self.hyper),
            "experiment": {
                "sweep_variable": self.sweep_variable,
                "sweep_values": list(self.sweep_values),
                "schemes": [s.value for s in self.schemes],
                "seeds": list(self.seeds),
                "scale": self.scale,
                "rps_per_episode": self.rps_per_episode,
            },
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def header_lines(self) -> list[str]:
        return [
            f"config_sha256_16: {self.config_hash()}",
            f"seeds: {','.join(str(s) for s in self.seeds)}",
            "resolved: " + json.dumps(self.resolved(), sort_keys=True, separators=(",", ":")),
        ]


def _check_sweep_value(var: str, v) -> None:
    if var in ("K", "N"):
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
            raise ConfigError(f"{var} sweep values must be integers, got {v!r}")
        if var == "K" and v < 0:
            raise ConfigError(f"K must be >= 0, got {v}")
        if var == "N" and not 1 <= v <= MAX_PAIRS:
            raise ConfigError(f"N must lie in [1, {MAX_PAIRS}], got {v}")
    else:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ConfigError(f"{var} sweep values must be finite numbers, got {v!r}")
        if var == "r_min" and v < 0:
            raise ConfigError(f"r_min must be >= 0, got {v}")
        if var == "p_max" and v <= 0:
            raise ConfigError(f"p_max must be > 0, got {v}")


def _line_of(text: str, key: str, table: str | None = None) -> str:
    """'line N' of the first assignment to ``key`` (or of the table header)."""
    pattern = rf"^\s*\[\s*{re.escape(key)}\s*\]" if table is None else rf"^\s*{re.escape(key)}\s*="
    for i, line in enumerate(text.splitlines(), start=1):
        if re.match(pattern, line):
            return f"line {i}"
    return "unknown line"


def parse_config_text(text: str, source: str = "<config>", scale: str | None = None,
                      overrides: dict | None = None) -> ExperimentSpec:
    """Build an :class:`ExperimentSpec` from TOML text.

    ``scale`` and ``overrides`` (keys ``seeds``, ``schemes``, ``output_dir``)
    come from the command line and take precedence over the file.
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None

    for table, body in doc.items():
        if not isinstance(body, dict):
            raise ConfigError(f"{source}: {_line_of(text, table, table='')}: key {table!r} must sit inside "
                              f"one of the tables {sorted(_TABLES)}")
        if table not in _TABLES:
            raise ConfigError(f"{source}: {_line_of(text, table)}: unknown table [{table}] "
                              f"(expected one of {sorted(_TABLES)})")
        for key in body:
            if key not in _TABLES[table]:
                raise ConfigError(f"{source}: {_line_of(text, key, table)}: unknown key {key!r} in [{table}]")

    net_raw = dict(doc.get("network", {}))
    ppo_raw = dict(doc.get("ppo", {}))
    exp_raw = dict(doc.get("experiment", {}))
    overrides = overrides or {}

    def fail(table, key, msg):
        raise ConfigError(f"{source}: {_line_of(text, key, table)}: [{table}] {key}: {msg}")

    scale = scale or exp_raw.get("scale", "desk")
    if scale not in SCALE_PRESETS:
        raise ConfigError(f"{source}: unknown scale {scale!r} (expected one of {sorted(SCALE_PRESETS)})")

    # network: unit conversions happen here, once
    for lin, log, conv in (("noise_power", "noise_power_dbm", dbm_to_watts), ("p_max", "p_max_dbm", dbm_to_watts),
                           ("beta0", "beta0_db", db_to_linear)):
        if log in net_raw:
            if lin in net_raw:
                fail("network", log, f"give either {lin} or {log}, not both")
            value = net_raw.pop(log)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                fail("network", log, f"expected a number, got {value!r}")
            net_raw[lin] = conv(float(value))
    path_kw = {k: net_raw.pop(k) for k in list(net_raw) if k in _PATH_LOSS_KEYS}
    irs_kw = {k[-1]: net_raw.pop(k) for k in ("irs_x", "irs_y", "irs_z") if k in net_raw}
    try:
        path_loss = PathLossParams(**path_kw)
        default_irs = NetworkConfig().irs_position
        irs = Position3(irs_kw.get("x", default_irs.x), irs_kw.get("y", default_irs.y), irs_kw.get("z", default_irs.z))
    except (TypeError, ValueError) as exc:
        key = next(iter(path_kw or irs_kw or {"network": None}))
        raise ConfigError(f"{source}: {_line_of(text, key, 'network')}: {exc}") from None

    hyper_kw = dict(SCALE_PRESETS[scale])
    hyper_kw.update(ppo_raw)
    if "hidden_sizes" in hyper_kw:
        hyper_kw["hidden_sizes"] = tuple(hyper_kw["hidden_sizes"])
    try:
        hyper = PpoHyperparams(**hyper_kw)
    except (TypeError, ValueError) as exc:
        key = _guess_key(str(exc), ppo_raw)
        raise ConfigError(f"{source}: {_line_of(text, key, 'ppo')}: [ppo] {exc}") from None

    try:
        network = NetworkConfig(path_loss=path_loss, irs_position=irs, discount=hyper.discount, **net_raw)
    except (TypeError, ValueError) as exc:
        key = _guess_key(str(exc), net_raw)
        raise ConfigError(f"{source}: {_line_of(text, key, 'network')}: [network] {exc}") from None

    try:
        schemes = overrides.get("schemes") or exp_raw.get("schemes") or [s.value for s in SchemeId]
        schemes = tuple(SchemeId.parse(s) for s in schemes)
    except ValueError as exc:
        raise ConfigError(f"{source}: {_line_of(text, 'schemes', 'experiment')}: {exc}") from None
    seeds = overrides.get("seeds") or exp_raw.get("seeds") or [0]
    if any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds):
        raise ConfigError(f"{source}: {_line_of(text, 'seeds', 'experiment')}: seeds must be nonnegative integers")
    sweep_variable = exp_raw.get("sweep_variable", "K")
    default_values = {"K": [network.n_elements], "N": [network.n_pairs], "r_min": [network.r_min],
                      "p_max": [network.p_max]}
    sweep_values = exp_raw.get("sweep_values", default_values.get(sweep_variable, [None]))
    if not isinstance(sweep_values, list):
        fail("experiment", "sweep_values", "expected a list")
    try:
        return ExperimentSpec(
            network=network,
            hyper=hyper,
            sweep_variable=sweep_variable,
            sweep_values=tuple(sweep_values),
            schemes=schemes,
            seeds=tuple(seeds),
            output_dir=str(overrides.get("output_dir") or exp_raw.get("output_dir", "runs")),
            scale=scale,
            rps_per_episode=bool(exp_raw.get("rps_per_episode", False)),
        )
    except ConfigError as exc:
        key = _guess_key(str(exc), exp_raw) or "sweep_values"
        raise ConfigError(f"{source}: {_line_of(text, key, 'experiment')}: [experiment] {exc}") from None


def _guess_key(message: str, raw: dict) -> str:
    for key in raw:
        if key in message:
            return key
    return next(iter(raw), "")


def load_config(path, scale: str | None = None, overrides: dict | None = None) -> ExperimentSpec:
    """Read a TOML config, or the ``resolved:`` header of an earlier output file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    if path.suffix in (".csv", ".tsv"):
        return spec_from_header(text, source=str(path), overrides=overrides)
    return parse_config_text(text, source=str(path), scale=scale, overrides=overrides)


def spec_from_resolved(resolved: dict, output_dir: str = "runs") -> ExperimentSpec:
    net = dict(resolved["network"])
    net["path_loss"] = PathLossParams(**net["path_loss"])
    net["irs_position"] = Position3(**net["irs_position"])
    ppo = dict(resolved["ppo"])
    ppo["hidden_sizes"] = tuple(ppo["hidden_sizes"])
    exp = resolved["experiment"]
    return ExperimentSpec(
        network=NetworkConfig(**net),
        hyper=PpoHyperparams(**ppo),
        sweep_variable=exp["sweep_variable"],
        sweep_values=tuple(exp["sweep_values"]),
        schemes=tuple(SchemeId(s) for s in exp["schemes"]),
        seeds=tuple(exp["seeds"]),
        output_dir=output_dir,
        scale=exp["scale"],
        rps_per_episode=exp["rps_per_episode"],
    )


def spec_from_header(text: str, source: str = "<header>", overrides: dict | None = None) -> ExperimentSpec:
    for line in text.splitlines():
        if not line.startswith("#"):
            break
        body = line.lstrip("#").strip()
        if body.startswith("resolved:"):
            try:
                spec = spec_from_resolved(json.loads(body[len("resolved:"):]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: malformed resolved header: {exc}") from None
            overrides = overrides or {}
            changes = {}
            if overrides.get("seeds"):
                changes["seeds"] = tuple(overrides["seeds"])
            if overrides.get("schemes"):
                changes["schemes"] = tuple(SchemeId.parse(s) for s in overrides["schemes"])
            if overrides.get("output_dir"):
                changes["output_dir"] = str(overrides["output_dir"])
            return dataclasses.replace(spec, **changes)
    raise ConfigError(f"{source}: no 'resolved:' header line found")


# --------------------------------------------------------------------------- sweeps

RESULT_FIELDS = ("scheme", "sweep_value", "seed", "mean_sum_rate", "std_sum_rate", "mean_feasible_sum_rate",
                 "qos_violation_rate")
AGGREGATE_FIELDS = ("scheme", "sweep_value", "n_seeds", "mean_sum_rate", "seed_std_sum_rate",
                    "mean_feasible_sum_rate", "qos_violation_rate")


@dataclass
class CellResult:
    scheme: SchemeId
    sweep_value: object
    seed: int
    mean_sum_rate: float
    std_sum_rate: float
    mean_feasible_sum_rate: float
    qos_violation_rate: float
    train_seconds: float = 0.0
    cached: bool = False


@dataclass
class SweepResult:
    spec: ExperimentSpec
    cells: list[CellResult]

    def aggregate(self) -> list[dict]:
        rows = []
        for scheme in self.spec.schemes:
            for value in self.spec.sweep_values:
                cell = [c for c in self.cells if c.scheme is scheme and c.sweep_value == value]
                if not cell:
                    continue
                rates = [c.mean_sum_rate for c in cell]
                rows.append({
                    "scheme": scheme.value,
                    "sweep_value": value,
                    "n_seeds": len(cell),
                    "mean_sum_rate": float(np.mean(rates)),
                    "seed_std_sum_rate": float(np.std(rates)),
                    "mean_feasible_sum_rate": float(np.mean([c.mean_feasible_sum_rate for c in cell])),
                    "qos_violation_rate": float(np.mean([c.qos_violation_rate for c in cell])),
                })
        return rows

    def table(self, metric: str = "mean_sum_rate") -> dict:
        """``{scheme: [seed-averaged metric per sweep value]}``."""
        out = {}
        for row in self.aggregate():
            out.setdefault(row["scheme"], []).append(row[metric])
        return out


def _run_cell(scheme: SchemeId, config: NetworkConfig, hyper: PpoHyperparams, seed: int, rps_per_episode: bool):
    t0 = time.perf_counter()
    adapter = make_adapter(scheme, config, rps_per_episode)
    result = train(config, hyper, seed=seed, adapter=adapter)
    ev = evaluate(result, hyper, seed=seed)
    return ev, time.perf_counter() - t0


def run_sweep(spec: ExperimentSpec, write: bool = True, jobs: int = 1, progress=None) -> SweepResult:
    """Train and evaluate every (scheme, sweep value, seed) cell.

    Cells whose effective environment is identical (WITHOUT_IRS across a K
    sweep) are trained once and reused.  With ``jobs > 1`` cells run in
    worker processes; results and files do not depend on ``jobs``.
    """
    out_dir = Path(spec.output_dir)
    if write:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            probe = out_dir / ".write-probe"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise OSError(f"output directory {out_dir} is not writable: {exc.strerror or exc}") from None

    plan, keys = [], {}
    for scheme in spec.schemes:
        for value in spec.sweep_values:
            cfg = spec.cell_config(value)
            effective = make_adapter(scheme, cfg).env_config()
            for seed in spec.seeds:
                key = (scheme, effective, seed)
                plan.append((scheme, value, seed, key))
                keys.setdefault(key, (scheme, cfg, spec.hyper, seed, spec.rps_per_episode))

    done = {}
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {key: pool.submit(_run_cell, *args) for key, args in keys.items()}
            for key, fut in futures.items():
                done[key] = fut.result()
                if progress:
                    progress(key[0], key[2])
    else:
        for key, args in keys.items():
            done[key] = _run_cell(*args)
            if progress:
                progress(key[0], key[2])

    cells, seen = [], set()
    for scheme, value, seed, key in plan:
        ev, seconds = done[key]
        cells.append(CellResult(scheme, value, seed, ev.mean_sum_rate, ev.std_sum_rate, ev.mean_feasible_sum_rate,
                                ev.qos_violation_rate, train_seconds=seconds, cached=key in seen))
        seen.add(key)
    result = SweepResult(spec, cells)
    if write:
        write_results(result, out_dir)
        emit_plot_data(result, out_dir)
    return result


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: list[str], fields, rows, delimiter=",") -> None:
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([_fmt(row[f]) for f in fields])
    path.write_text(buf.getvalue())


def write_results(result: SweepResult, out_dir: Path) -> None:
    """``results.csv`` (one row per cell), ``aggregate.csv`` (seed means) and
    ``timings.json`` (wall-clock, kept apart so the CSVs stay reproducible)."""
    spec = result.spec
    header = spec.header_lines() + [f"sweep_variable: {spec.sweep_variable}"]
    rows = [{**dataclasses.asdict(c), "scheme": c.scheme.value} for c in result.cells]
    _write_csv(out_dir / "results.csv", header, RESULT_FIELDS, rows)
    _write_csv(out_dir / "aggregate.csv", header, AGGREGATE_FIELDS, result.aggregate())
    timings = [{"scheme": c.scheme.value, "sweep_value": c.sweep_value, "seed": c.seed,
                "train_seconds": 0.0 if c.cached else round(c.train_seconds, 3), "reused": c.cached}
               for c in result.cells]
    (out_dir / "timings.json").write_text(json.dumps(timings, indent=1))


def emit_plot_data(result: SweepResult, out_dir, metrics=("mean_sum_rate", "mean_feasible_sum_rate")) -> list[Path]:
    """One TSV per metric: sweep value, then one seed-averaged column per scheme."""
    out_dir = Path(out_dir)
    spec = result.spec
    if not result.cells:
        raise ValueError("empty result table")
    written = []
    for metric in metrics:
        table = result.table(metric)
        schemes = [s.value for s in spec.schemes if s.value in table]
        fields = [spec.sweep_variable, *schemes]
        rows = [{spec.sweep_variable: v, **{s: table[s][i] for s in schemes}} for i, v in enumerate(spec.sweep_values)]
        path = out_dir / f"plot_{spec.sweep_variable}_{metric}.tsv"
        _write_csv(path, spec.header_lines() + [f"metric: {metric}"], fields, rows, delimiter="\t")
        written.append(path)
    return written


def read_table(path) -> tuple[list[str], list[dict]]:
    """Comment header lines and data rows of a CSV/TSV written by this module."""
    text = Path(path).read_text()
    lines = text.splitlines()
    header = [ln[2:] for ln in lines if ln.startswith("# ")]
    body = [ln for ln in lines if not ln.startswith("#")]
    delim = "\t" if str(path).endswith(".tsv") else ","
    return header, list(csv.DictReader(body, delimiter=delim))


# --------------------------------------------------------------------------- single runs

def train_single(spec: ExperimentSpec, scheme: SchemeId, seed: int, out_dir) -> dict:
    """Train one scheme on the base config; write curve, checkpoint and summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    adapter = make_adapter(scheme, spec.network, spec.rps_per_episode)
    t0 = time.perf_counter()
    result = train(spec.network, spec.hyper, seed=seed, adapter=adapter)
    seconds = time.perf_counter() - t0
    ev = evaluate(result, spec.hyper, seed=seed)
    stem = f"{scheme.value}_seed{seed}"
    header = spec.header_lines() + [f"scheme: {scheme.value}", f"seed: {seed}"]
    write_curve_csv(out_dir / f"curve_{stem}.csv", result.curve, scheme.value, header, include_wall_clock=False)
    save_trained(out_dir / f"checkpoint_{stem}.json", result, spec, scheme, seed)
    summary = {"scheme": scheme.value, "seed": seed, "mean_sum_rate": ev.mean_sum_rate,
               "std_sum_rate": ev.std_sum_rate, "mean_feasible_sum_rate": ev.mean_feasible_sum_rate,
               "qos_violation_rate": ev.qos_violation_rate}
    _write_csv(out_dir / f"eval_{stem}.csv", header, list(summary), [summary])
    (out_dir / f"timings_{stem}.json").write_text(json.dumps(
        {"train_seconds": round(seconds, 3),
         "episode_wall_clock_s": [round(r.wall_clock_s, 4) for r in result.curve]}))
    return summary


def save_trained(path, result: TrainResult, spec: ExperimentSpec, scheme: SchemeId, seed: int) -> None:
    extra = {"scheme": scheme.value, "seed": seed, "resolved": spec.resolved(),
             "obs_norm": result.agent.obs_norm.to_dict()}
    save_checkpoint(path, result.agent.policy, result.agent.value, extra)


def load_trained(path):
    """Rebuild ``(TrainResult, spec, scheme, seed)`` from a checkpoint file."""
    policy, value, extra = load_checkpoint(path)
    try:
        spec = spec_from_resolved(extra["resolved"])
        scheme = SchemeId(extra["scheme"])
        seed = extra["seed"]
        obs_norm = RunningMeanStd.from_dict(extra["obs_norm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"checkpoint {path} lacks experiment metadata: {exc}") from None
    adapter = make_adapter(scheme, spec.network, spec.rps_per_episode)
    env_config = adapter.env_config()
    steps = spec.hyper.steps_per_episode or env_config.episode_length
    agent = PpoAgent.from_parts(policy, value, obs_norm, spec.hyper)
    result = TrainResult(agent=agent, curve=[], adapter=adapter, config=env_config.replace(episode_length=steps))
    return result, spec, scheme, seed
