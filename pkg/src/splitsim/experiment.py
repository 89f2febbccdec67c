"""Experiment configs, single runs and parameter sweeps.

Configs are JSON objects mirroring the dataclasses below::

    {"workload": {...} | {"trace": "reqs.csv"}, "gpu": {...}, "cost": {...},
     "scheduler": {...}, "discipline": {...} | null,
     "output_dir": "out", "emit_event_log": false, "seed": null}

Dotted overrides (``gpu.compute_capacity=2e6``) are applied to the raw dict
before it is parsed, so they go through the same validation.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import os
import types
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from splitsim.engine import SharingDiscipline, run
from splitsim.errors import ConfigError, ContractViolation, SimulationError, TraceError
from splitsim.gpu import CostModel, GpuSpec
from splitsim.metrics import MetricsReport, write_atomic
from splitsim.schedulers import SchedulerConfig
from splitsim.workload import Request, WorkloadSpec, generate, parse_trace

OUTPUT_ENV = "SPLITSIM_OUTPUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INTERNAL = 4


@dataclass
class ExperimentConfig:
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    trace: str | None = None
    gpu: GpuSpec = field(default_factory=GpuSpec)
    cost: CostModel = field(default_factory=CostModel)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    discipline: SharingDiscipline | None = None
    output_dir: str | None = None
    emit_event_log: bool = False
    seed: int | None = None

    def validate(self) -> None:
        if self.trace is not None:
            if not Path(self.trace).is_file():
                raise ConfigError("workload.trace", f"no such file: {self.trace}")
        else:
            self.workload.validate()
        self.gpu.validate()
        self.cost.validate()
        self.scheduler.validate()
        if self.discipline is not None:
            self.discipline.validate()
            if self.discipline.mode == "exclusive" and self.scheduler.instance_count > 1:
                raise ConfigError("discipline.mode", "exclusive needs a single instance")

    def requests(self) -> list[Request]:
        if self.trace is not None:
            try:
                text = Path(self.trace).read_text(encoding="utf-8")
            except FileNotFoundError:
                raise ConfigError("workload.trace", f"no such file: {self.trace}") from None
            return parse_trace(text)
        spec = self.workload
        if self.seed is not None:
            spec = dataclasses.replace(spec, seed=self.seed)
        return generate(spec)

    def resolved_output_dir(self) -> Path:
        out = self.output_dir or os.environ.get(OUTPUT_ENV)
        if not out:
            raise ConfigError("output_dir", f"not set (and ${OUTPUT_ENV} is empty)")
        return Path(out)

    def to_dict(self) -> dict[str, Any]:
        d = _plain(dataclasses.asdict(self))
        trace = d.pop("trace")
        if trace is not None:
            d["workload"] = {"trace": trace}
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentConfig:
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        data = copy.deepcopy(data)
        w = data.get("workload")
        if isinstance(w, dict) and "trace" in w:
            extra = set(w) - {"trace"}
            if extra:
                raise ConfigError(f"workload.{sorted(extra)[0]}", "not allowed together with trace")
            data["workload"] = {}
            data["trace"] = w["trace"]
        elif "trace" in data:
            raise ConfigError("trace", "unknown key (use workload.trace)")
        return _build(cls, data, "")


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, data: dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(prefix + key, "unknown key")
        kwargs[key] = _coerce(value, hints[key], prefix + key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix.rstrip(".") or "<root>", str(exc)) from None


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        arms = typing.get_args(hint)
        if value is None:
            if type(None) in arms:
                return None
            raise ConfigError(path, "must not be null")
        errors = []
        for arm in arms:
            if arm is type(None):
                continue
            try:
                return _coerce(value, arm, path)
            except ConfigError as exc:
                errors.append(exc)
        raise errors[-1]
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigError(path, "expected a [min, max] pair")
        return tuple(_coerce(v, int, path) for v in value)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path + ".")
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {hint!r}")


def parse_override(text: str) -> tuple[str, Any]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(text, "override must look like dotted.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(data: dict[str, Any], key: str, value: Any) -> None:
    if key == "workload.trace":
        # a trace replaces the synthetic workload wholesale
        data["workload"] = {"trace": value}
        return
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(key, f"{p} is not an object")
        node = nxt
    node[parts[-1]] = value


def load_json(path: str | os.PathLike, field_name: str = "config") -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(field_name, f"no such file: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(field_name, f"invalid JSON: {exc}") from None


def load_config(path: str | os.PathLike, overrides: list[str] = ()) -> ExperimentConfig:
    data = load_json(path)
    for item in overrides:
        apply_override(data, *parse_override(item))
    cfg = ExperimentConfig.from_dict(data)
    cfg.validate()
    return cfg


def simulate(cfg: ExperimentConfig) -> MetricsReport:
    cfg.validate()
    return run(cfg.requests(), cfg.scheduler, cfg.gpu, cfg.cost, cfg.discipline,
               emit_log=cfg.emit_event_log)


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    """Simulate and write report.json, requests.csv, timeseries.csv (+ events.csv)."""
    report = simulate(cfg)
    out = cfg.resolved_output_dir()
    report.write(out)
    if report.event_log is not None:
        write_atomic(out / "events.csv", report.event_log)
    return report


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, TraceError)):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ContractViolation, SimulationError)):
        return EXIT_INTERNAL
    raise exc


# -- sweeps ---------------------------------------------------------------

SWEEP_METRICS = ("n_requests", "makespan_s", "tokens_per_s", "requests_per_s",
                 "steady_tokens_per_s", "mean_ttft_s", "mean_e2e_s", "p99_e2e_s",
                 "mean_tbt_s", "mean_instance_elapsed_s")


@dataclass
class SweepSpec:
    base: dict[str, Any]
    axis: str
    values: list[Any]
    variants: dict[str, dict[str, Any]] | None = None
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SweepSpec:
        if not isinstance(data, dict):
            raise ConfigError("<root>", "sweep must be a JSON object")
        unknown = set(data) - {"base", "axis", "values", "variants", "output_dir"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        for key in ("base", "axis", "values"):
            if key not in data:
                raise ConfigError(key, "required")
        spec = cls(data["base"], data["axis"], list(data["values"]) if isinstance(
            data["values"], list) else data["values"], data.get("variants"), data.get("output_dir"))
        spec.validate()
        return spec

    def validate(self) -> None:
        if not isinstance(self.values, list) or not self.values:
            raise ConfigError("values", "must be a non-empty list")
        if not isinstance(self.axis, str) or not _is_leaf_path(self.axis):
            raise ConfigError("axis", f"{self.axis!r} is not a numeric or enum config field")
        if self.variants is not None and (
                not isinstance(self.variants, dict) or not self.variants):
            raise ConfigError("variants", "must be a non-empty object of override maps")
        for name, cfg in self.points():
            try:
                ExperimentConfig.from_dict(cfg).validate()
            except ConfigError as exc:
                raise ConfigError(f"{name}: {exc.field}", str(exc)) from None

    def points(self) -> list[tuple[str, dict[str, Any]]]:
        variants = self.variants or {"": {}}
        out = []
        for vname, overrides in variants.items():
            for value in self.values:
                data = copy.deepcopy(self.base)
                for k, v in overrides.items():
                    apply_override(data, k, v)
                apply_override(data, self.axis, value)
                label = f"{self.axis}={value}"
                out.append((f"{vname}/{label}" if vname else label, data))
        return out


def _is_leaf_path(path: str) -> bool:
    cls: Any = ExperimentConfig
    parts = path.split(".")
    for i, p in enumerate(parts):
        hints = typing.get_type_hints(cls)
        if p not in hints:
            return False
        hint = hints[p]
        if typing.get_origin(hint) in (typing.Union, types.UnionType):
            args = [a for a in typing.get_args(hint) if a is not type(None)]
            hint = args[0]
        if dataclasses.is_dataclass(hint):
            if i == len(parts) - 1:
                return False
            cls = hint
        else:
            leaf = hint in (int, float, str, bool) or typing.get_origin(hint) is tuple
            return leaf and i == len(parts) - 1
    return False


def _sweep_point(args: tuple[str, dict[str, Any], str]) -> tuple[int, dict[str, Any] | None, str]:
    name, data, out_dir = args
    try:
        cfg = ExperimentConfig.from_dict(data)
        cfg.output_dir = out_dir
        report = run_experiment(cfg)
        return EXIT_OK, report.summary(), ""
    except Exception as exc:  # one failed point must not abort the sweep
        try:
            code = exit_code(exc)
        except Exception:
            code = EXIT_INTERNAL
        return code, None, f"{type(exc).__name__}: {exc}"


def _safe_dirname(label: str) -> str:
    return "".join(c if c.isalnum() or c in "._=-" else "_" for c in label.replace("/", "__"))


def run_sweep(spec: SweepSpec, output_dir: str | os.PathLike, jobs: int = 1) -> tuple[int, Path]:
    """Run every sweep point; write sweep.csv. Returns (exit code, csv path)."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = spec.points()
    work = [(name, data, str(out / _safe_dirname(name))) for name, data in points]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, work))
    else:
        results = [_sweep_point(w) for w in work]

    variants = list(spec.variants or {"": {}})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", spec.axis, "status", *SWEEP_METRICS, "error"])
    code = EXIT_OK
    i = 0
    for vname in variants:
        for value in spec.values:
            rc, summary, err = results[i]
            i += 1
            if rc != EXIT_OK and code == EXIT_OK:
                code = rc
            status = "ok" if rc == EXIT_OK else f"failed({rc})"
            metrics = ["" if summary is None or summary[k] is None else repr(summary[k])
                       for k in SWEEP_METRICS]
            w.writerow([vname, value, status, *metrics, err])
    path = write_atomic(out / "sweep.csv", buf.getvalue())
    return code, path
