"""Per-request timelines, utilization series and serving metrics.

The engine reports everything it does to a :class:`Recorder` as flat events
(``time_s, kind, detail``). The same events serialize to the CSV event log,
and :func:`replay` feeds a parsed log back through a fresh recorder, so a
report can always be rebuilt from its log.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
import os
import statistics
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from splitsim.errors import ContractViolation, TraceError

EVENT_LOG_HEADER = ("time_s", "kind", "detail")
REQUESTS_HEADER = ("id", "arrival_s", "ttft_s", "e2e_s", "tbt_mean_s")
TIMESERIES_HEADER = ("time_s", "instance", "kv_pct", "compute_pct", "mem_pct")

_INT_KEYS = {"id", "in", "out", "task", "inst", "used", "emit"}
_FLOAT_KEYS = {"C", "M", "c", "m", "d"}
_LIST_KEYS = {"ids", "caps"}
_STR_KEYS = {"kind", "policy", "mode"}
_RATE_KEYS = {"r"}


def encode_detail(detail: dict[str, Any]) -> str:
    parts = []
    for k, v in detail.items():
        if k in _LIST_KEYS:
            s = ";".join(str(int(x)) for x in v)
        elif k in _RATE_KEYS:
            s = ";".join(f"{tid}:{rate!r}" for tid, rate in v.items())
        elif k in _FLOAT_KEYS:
            s = repr(float(v))
        else:
            s = str(v)
        parts.append(f"{k}={s}")
    return " ".join(parts)


def decode_detail(text: str) -> dict[str, Any]:
    detail: dict[str, Any] = {}
    for part in text.split():
        k, _, s = part.partition("=")
        if k in _INT_KEYS:
            detail[k] = int(s)
        elif k in _FLOAT_KEYS:
            detail[k] = float(s)
        elif k in _LIST_KEYS:
            detail[k] = tuple(int(x) for x in s.split(";")) if s else ()
        elif k in _RATE_KEYS:
            rates = {}
            for item in filter(None, s.split(";")):
                tid, _, rate = item.partition(":")
                rates[int(tid)] = float(rate)
            detail[k] = rates
        elif k in _STR_KEYS:
            detail[k] = s
        else:
            raise ValueError(f"unknown event field {k!r}")
    return detail


@dataclass
class RequestRecord:
    id: int
    arrival_s: float
    input_tokens: int
    output_tokens: int
    instance: int | None = None
    prompt_start_s: float | None = None
    first_token_s: float | None = None
    finish_s: float | None = None
    token_times: list[float] = field(default_factory=list)

    @property
    def ttft_s(self) -> float | None:
        return None if self.first_token_s is None else self.first_token_s - self.arrival_s

    @property
    def e2e_s(self) -> float | None:
        return None if self.finish_s is None else self.finish_s - self.arrival_s

    @property
    def tbt_mean_s(self) -> float | None:
        if self.output_tokens < 2 or self.finish_s is None:
            return None
        return (self.finish_s - self.first_token_s) / (self.output_tokens - 1)


@dataclass
class TaskRecord:
    task: int
    kind: str
    instance: int
    batch: tuple[int, ...]
    compute_demand: float
    mem_demand: float
    duration_alone_s: float
    start_s: float
    end_s: float | None = None


@dataclass
class PhaseWindow:
    present: bool
    elapsed_s: float = 0.0
    mean_kv_pct: float | None = None
    mean_compute_pct: float | None = None
    mean_mem_pct: float | None = None


def _nearest_rank(values: list[float], q: float) -> float:
    s = sorted(values)
    k = max(1, math.ceil(q * len(s)))
    return s[k - 1]


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


@dataclass
class MetricsReport:
    requests: list[RequestRecord]
    tasks: list[TaskRecord]
    timeseries: list[tuple[float, int, float, float, float]]
    capacities: list[int]
    compute_capacity: float
    mem_bandwidth: float
    meta: dict[str, Any] = field(default_factory=dict)

    # summary metrics, filled by summarize()
    makespan_s: float = 0.0
    e2e_mean_s: float | None = None
    e2e_median_s: float | None = None
    e2e_p99_s: float | None = None
    ttft_mean_s: float | None = None
    tbt_mean_s: float | None = None
    tokens_per_s: float = 0.0
    requests_per_s: float = 0.0
    steady_tokens_per_s: float | None = None
    instance_elapsed_s: list[float | None] = field(default_factory=list)
    event_log: str | None = field(default=None, repr=False, compare=False)

    def summarize(self) -> None:
        done = [r for r in self.requests if r.finish_s is not None]
        if self.requests:
            t0 = min(r.arrival_s for r in self.requests)
            ends = [r.finish_s for r in done] or [t.end_s for t in self.tasks if t.end_s is not None]
            self.makespan_s = (max(ends) - t0) if ends else 0.0
        e2e = [r.e2e_s for r in done]
        if e2e:
            self.e2e_mean_s = _mean(e2e)
            self.e2e_median_s = statistics.median(e2e)
            self.e2e_p99_s = _nearest_rank(e2e, 0.99)
        self.ttft_mean_s = _mean([r.ttft_s for r in self.requests if r.ttft_s is not None])
        self.tbt_mean_s = _mean([r.tbt_mean_s for r in done if r.tbt_mean_s is not None])
        if self.makespan_s > 0:
            self.tokens_per_s = sum(r.output_tokens for r in done) / self.makespan_s
            self.requests_per_s = len(done) / self.makespan_s
        self.steady_tokens_per_s = steady_state_throughput(self.requests)
        self.instance_elapsed_s = []
        for inst in range(len(self.capacities)):
            mine = [r for r in done if r.instance == inst]
            if mine:
                self.instance_elapsed_s.append(
                    max(r.finish_s for r in mine) - min(r.arrival_s for r in mine))
            else:
                self.instance_elapsed_s.append(None)

    @property
    def mean_instance_elapsed_s(self) -> float | None:
        return _mean([e for e in self.instance_elapsed_s if e is not None])

    @property
    def total_tokens(self) -> int:
        return sum(len(r.token_times) for r in self.requests)

    def summary(self) -> dict[str, Any]:
        return {
            "n_requests": len(self.requests),
            "makespan_s": self.makespan_s,
            "tokens_per_s": self.tokens_per_s,
            "requests_per_s": self.requests_per_s,
            "steady_tokens_per_s": self.steady_tokens_per_s,
            "mean_ttft_s": self.ttft_mean_s,
            "mean_e2e_s": self.e2e_mean_s,
            "median_e2e_s": self.e2e_median_s,
            "p99_e2e_s": self.e2e_p99_s,
            "mean_tbt_s": self.tbt_mean_s,
            "mean_instance_elapsed_s": self.mean_instance_elapsed_s,
        }

    def summary_line(self) -> str:
        ttft = self.ttft_mean_s if self.ttft_mean_s is not None else float("nan")
        return (f"makespan_s={self.makespan_s:.6g}, tokens_per_s={self.tokens_per_s:.6g}, "
                f"mean_ttft_s={ttft:.6g}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "meta": self.meta,
            "summary": self.summary(),
            "instance_elapsed_s": self.instance_elapsed_s,
            "capacities": self.capacities,
            "compute_capacity": self.compute_capacity,
            "mem_bandwidth": self.mem_bandwidth,
            "requests": [
                {**asdict(r), "ttft_s": r.ttft_s, "e2e_s": r.e2e_s, "tbt_mean_s": r.tbt_mean_s}
                for r in self.requests
            ],
            "tasks": [{**asdict(t), "batch": list(t.batch)} for t in self.tasks],
            "timeseries": [list(row) for row in self.timeseries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def requests_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(REQUESTS_HEADER)
        for r in self.requests:
            w.writerow([r.id, repr(r.arrival_s), _fmt(r.ttft_s), _fmt(r.e2e_s), _fmt(r.tbt_mean_s)])
        return out.getvalue()

    def timeseries_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(TIMESERIES_HEADER)
        for t, inst, kv, cp, mp in self.timeseries:
            w.writerow([repr(t), inst, repr(kv), repr(cp), repr(mp)])
        return out.getvalue()

    def write(self, output_dir: str | os.PathLike) -> list[Path]:
        d = Path(output_dir)
        d.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in (("report.json", self.to_json()),
                           ("requests.csv", self.requests_csv()),
                           ("timeseries.csv", self.timeseries_csv())):
            written.append(write_atomic(d / name, text))
        return written


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(v)


def write_atomic(path: Path, text: str) -> Path:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def steady_state_throughput(requests: list[RequestRecord], skip_frac: float = 0.1) -> float | None:
    """Tokens/s after the first ``skip_frac`` of requests have finished."""
    finishes = sorted(r.finish_s for r in requests if r.finish_s is not None)
    if not finishes:
        return None
    k = max(1, math.ceil(skip_frac * len(finishes)))
    t0, t1 = finishes[k - 1], finishes[-1]
    if t1 <= t0:
        return None
    tokens = sum(1 for r in requests for t in r.token_times if t0 < t <= t1)
    return tokens / (t1 - t0)


class Recorder:
    """Builds a :class:`MetricsReport` from engine events (or a replayed log)."""

    def __init__(self, keep_log: bool = False):
        self.keep_log = keep_log
        self.log: list[tuple[float, str, str]] = []
        self.now = 0.0
        self.C = 1.0
        self.M = 1.0
        self.emit_first = False
        self.caps: list[int] = []
        self.meta: dict[str, Any] = {}
        self.requests: dict[int, RequestRecord] = {}
        self.tasks: dict[int, TaskRecord] = {}
        self.active: dict[int, TaskRecord] = {}
        self.rates: dict[int, float] = {}
        self.kv_used: list[int] = []
        self.rows: list[tuple[float, int, float, float, float]] = []
        self._last_row: dict[int, tuple[float, float, float]] = {}

    def record_event(self, time_s: float, kind: str, detail: dict[str, Any]) -> None:
        if time_s < self.now:
            raise ContractViolation(f"event {kind} at {time_s} precedes clock {self.now}")
        if time_s > self.now:
            self._flush()
            self.now = time_s
        if self.keep_log:
            self.log.append((time_s, kind, encode_detail(detail)))
        getattr(self, f"_on_{kind}")(time_s, detail)

    def _on_meta(self, t, d):
        self.C, self.M = d["C"], d["M"]
        self.emit_first = bool(d["emit"])
        self.caps = list(d["caps"])
        self.kv_used = [0] * len(self.caps)
        self.meta = {"policy": d["policy"], "mode": d["mode"]}

    def _on_arrival(self, t, d):
        self.requests[d["id"]] = RequestRecord(d["id"], t, d["in"], d["out"])

    def _on_start(self, t, d):
        rec = TaskRecord(d["task"], d["kind"], d["inst"], tuple(d["ids"]), d["c"], d["m"], d["d"], t)
        self.tasks[rec.task] = rec
        self.active[rec.task] = rec
        if rec.kind == "prompt":
            for rid in rec.batch:
                r = self.requests[rid]
                r.prompt_start_s = t
                r.instance = rec.instance

    def _on_complete(self, t, d):
        rec = self.active.pop(d["task"])
        self.rates.pop(rec.task, None)
        rec.end_s = t
        if rec.kind == "token" or self.emit_first:
            for rid in rec.batch:
                r = self.requests[rid]
                r.token_times.append(t)
                if r.first_token_s is None:
                    r.first_token_s = t
                if len(r.token_times) == r.output_tokens:
                    r.finish_s = t

    def _on_kv(self, t, d):
        self.kv_used[d["inst"]] = d["used"]

    def _on_rates(self, t, d):
        self.rates = dict(d["r"])

    def _on_quantum(self, t, d):
        pass

    def _on_switch(self, t, d):
        pass

    def _flush(self) -> None:
        if not self.caps:
            return
        comp = [0.0] * len(self.caps)
        mem = [0.0] * len(self.caps)
        for tid in sorted(self.active):
            rec = self.active[tid]
            rate = self.rates.get(tid, 0.0)
            if rec.duration_alone_s > 0 and rate > 0:
                comp[rec.instance] += rec.compute_demand / rec.duration_alone_s * rate
                mem[rec.instance] += rec.mem_demand / rec.duration_alone_s * rate
        for i, cap in enumerate(self.caps):
            row = (100.0 * self.kv_used[i] / cap if cap else 0.0,
                   min(100.0, 100.0 * comp[i] / self.C),
                   min(100.0, 100.0 * mem[i] / self.M))
            if self._last_row.get(i) != row:
                self._last_row[i] = row
                self.rows.append((self.now, i, *row))

    def report(self) -> MetricsReport:
        self._flush()
        rep = MetricsReport(
            requests=[self.requests[k] for k in sorted(self.requests)],
            tasks=[self.tasks[k] for k in sorted(self.tasks)],
            timeseries=list(self.rows),
            capacities=list(self.caps),
            compute_capacity=self.C,
            mem_bandwidth=self.M,
            meta=dict(self.meta),
        )
        rep.summarize()
        return rep

    def event_log_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(EVENT_LOG_HEADER)
        for t, kind, detail in self.log:
            w.writerow([repr(t), kind, detail])
        return out.getvalue()


def parse_event_log(text: str) -> list[tuple[float, str, dict[str, Any]]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != EVENT_LOG_HEADER:
        raise TraceError("event log must start with header time_s,kind,detail", line=1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            t, kind, detail = row
            out.append((float(t), kind, decode_detail(detail)))
        except ValueError as exc:
            raise TraceError(f"bad event row: {exc}", line=lineno) from None
    return out


def replay(text: str) -> MetricsReport:
    """Rebuild a report from an event log."""
    rec = Recorder()
    for t, kind, detail in parse_event_log(text):
        rec.record_event(t, kind, detail)
    return rec.report()


def record_event(report_builder: Recorder, time_s: float, event_kind: str, /,
                 **detail) -> Recorder:
    report_builder.record_event(time_s, event_kind, detail)
    return report_builder


def utilization_trace(events: Iterable[tuple[float, str, dict[str, Any]]],
                      C: float | None = None, M: float | None = None
                      ) -> list[tuple[float, float, float]]:
    """Whole-GPU (time_s, compute_pct, mem_pct) step series from an event log.

    Each active task contributes its solo rate scaled by its current progress
    multiplier. Values hold until the next row.
    """
    active: dict[int, tuple[float, float]] = {}
    rates: dict[int, float] = {}
    series: list[tuple[float, float, float]] = [(0.0, 0.0, 0.0)]
    now = None

    def point():
        c = sum(cr * rates.get(t, 0.0) for t, (cr, _) in active.items())
        m = sum(mr * rates.get(t, 0.0) for t, (_, mr) in active.items())
        return (min(100.0, 100.0 * c / C), min(100.0, 100.0 * m / M))

    for t, kind, d in events:
        if now is not None and t > now:
            p = point()
            if series[-1][1:] != p:
                series.append((now, *p))
        now = t
        if kind == "meta":
            C = d["C"] if C is None else C
            M = d["M"] if M is None else M
        elif kind == "start" and d["d"] > 0:
            active[d["task"]] = (d["c"] / d["d"], d["m"] / d["d"])
        elif kind == "complete":
            active.pop(d["task"], None)
            rates.pop(d["task"], None)
        elif kind == "rates":
            rates = dict(d["r"])
    if now is not None:
        p = point()
        if series[-1][1:] != p:
            series.append((now, *p))
    return series


def _step_value(times: list[float], values: list, t: float, default):
    i = bisect.bisect_right(times, t) - 1
    return values[i] if i >= 0 else default


def phase_intervals(report: MetricsReport, phase: str) -> list[tuple[float, float]]:
    """Union of the spans where some task of ``phase`` was running."""
    if phase not in ("prompt", "token"):
        raise ContractViolation(f"unknown phase {phase!r}")
    spans = sorted((t.start_s, t.end_s) for t in report.tasks
                   if t.kind == phase and t.end_s is not None and t.end_s > t.start_s)
    merged: list[list[float]] = []
    for a, b in spans:
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged]


def phase_windowed(report: MetricsReport, phase: str) -> PhaseWindow:
    """Time-weighted whole-GPU means restricted to the phase's active window."""
    windows = phase_intervals(report, phase)
    elapsed = sum(b - a for a, b in windows)
    if elapsed <= 0:
        return PhaseWindow(present=False)
    n = len(report.capacities)
    per_inst: list[tuple[list[float], list[tuple[float, float, float]]]] = []
    for i in range(n):
        rows = [r for r in report.timeseries if r[1] == i]
        per_inst.append(([r[0] for r in rows], [r[2:] for r in rows]))
    cuts = sorted({r[0] for r in report.timeseries} | {x for w in windows for x in w})
    total_cap = sum(report.capacities)
    kv = comp = mem = 0.0
    for a, b in windows:
        lo, hi = bisect.bisect_right(cuts, a), bisect.bisect_left(cuts, b)
        pts = [a] + cuts[lo:hi] + [b]
        for s, e in zip(pts, pts[1:]):
            used = 0.0
            cp = mp = 0.0
            for i, (times, vals) in enumerate(per_inst):
                kvp, c, m = _step_value(times, vals, s, (0.0, 0.0, 0.0))
                used += kvp * report.capacities[i] / 100.0
                cp += c
                mp += m
            dt = e - s
            kv += dt * (100.0 * used / total_cap if total_cap else 0.0)
            comp += dt * cp
            mem += dt * mp
    return PhaseWindow(True, elapsed, kv / elapsed, comp / elapsed, mem / elapsed)
