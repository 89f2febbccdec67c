"""Request workloads: synthetic generation and CSV trace ingestion.

Random draws use NumPy's PCG64 bit generator seeded with ``WorkloadSpec.seed``.
Token counts are drawn with ``Generator.integers(lo, hi, endpoint=True)`` and
Poisson inter-arrivals with ``Generator.exponential(1/rate)``, in that order
(all input counts, then all output counts, then all gaps).
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

from splitsim.errors import ConfigError, ContractViolation, TraceError

TRACE_HEADER = ("id", "arrival_s", "input_tokens", "output_tokens")


class RequestState(enum.IntEnum):
    WAITING = 0
    PROMPTING = 1
    GENERATING = 2
    FINISHED = 3


@dataclass
class Request:
    id: int
    arrival_s: float
    input_tokens: int
    output_tokens: int
    state: RequestState = RequestState.WAITING

    def __post_init__(self):
        if self.input_tokens < 1 or self.output_tokens < 1:
            raise ValueError(f"request {self.id}: token counts must be >= 1")
        if not math.isfinite(self.arrival_s) or self.arrival_s < 0:
            raise ValueError(f"request {self.id}: arrival_s must be finite and >= 0")

    def advance(self, new_state: RequestState) -> None:
        if new_state != self.state + 1:
            raise ContractViolation(
                f"request {self.id}: illegal transition {self.state.name} -> {new_state.name}"
            )
        self.state = new_state

    def fresh(self) -> Request:
        """Copy of this request reset to WAITING."""
        return Request(self.id, self.arrival_s, self.input_tokens, self.output_tokens)


@dataclass(frozen=True)
class Arrival:
    """Arrival process. ``kind`` is one of all_at_zero, fixed_interval, poisson."""

    kind: str = "all_at_zero"
    interval_s: float = 0.0
    rate: float = 0.0

    KINDS = ("all_at_zero", "fixed_interval", "poisson")


@dataclass
class WorkloadSpec:
    n_requests: int = 0
    input_tokens: int | tuple[int, int] = 1024
    output_tokens: int | tuple[int, int] = 1024
    arrival: Arrival = field(default_factory=Arrival)
    seed: int = 0

    def validate(self) -> None:
        if self.n_requests < 0:
            raise ConfigError("workload.n_requests", "must be >= 0")
        for name in ("input_tokens", "output_tokens"):
            lo, hi = _bounds(getattr(self, name))
            if lo < 1:
                raise ConfigError(f"workload.{name}", f"minimum must be >= 1, got {lo}")
            if lo > hi:
                raise ConfigError(f"workload.{name}", f"min {lo} > max {hi}")
        a = self.arrival
        if a.kind not in Arrival.KINDS:
            raise ConfigError("workload.arrival.kind", f"unknown arrival kind {a.kind!r}")
        if a.kind == "fixed_interval" and not (a.interval_s >= 0 and math.isfinite(a.interval_s)):
            raise ConfigError("workload.arrival.interval_s", "must be finite and >= 0")
        if a.kind == "poisson" and not (a.rate > 0 and math.isfinite(a.rate)):
            raise ConfigError("workload.arrival.rate", "must be finite and > 0")


def _bounds(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError("token range must be (min, max)")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _draw_counts(rng: np.random.Generator, v, n: int) -> list[int]:
    lo, hi = _bounds(v)
    if lo == hi:
        return [lo] * n
    return [int(x) for x in rng.integers(lo, hi, size=n, endpoint=True)]


def generate(spec: WorkloadSpec) -> list[Request]:
    """Deterministic request list for ``spec``; ids follow arrival order."""
    spec.validate()
    n = spec.n_requests
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    inputs = _draw_counts(rng, spec.input_tokens, n)
    outputs = _draw_counts(rng, spec.output_tokens, n)

    a = spec.arrival
    if a.kind == "all_at_zero":
        arrivals = [0.0] * n
    elif a.kind == "fixed_interval":
        arrivals = [i * a.interval_s for i in range(n)]
    else:
        gaps = rng.exponential(1.0 / a.rate, size=n)
        # first request arrives at t=0; gap i separates request i and i+1
        arrivals = [0.0] * n
        t = 0.0
        for i in range(1, n):
            t += float(gaps[i - 1])
            arrivals[i] = t
    return [Request(i, arrivals[i], inputs[i], outputs[i]) for i in range(n)]


def parse_trace(text: str) -> list[Request]:
    """Parse CSV trace content. Result is sorted by (arrival_s, id)."""
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        raise TraceError("missing header", line=1)
    header = tuple(c.strip() for c in rows[0])
    if header != TRACE_HEADER:
        raise TraceError(f"expected header {','.join(TRACE_HEADER)!r}", line=1)

    requests: list[Request] = []
    seen: set[int] = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise TraceError(f"expected 4 fields, got {len(row)}", line=lineno)
        try:
            rid = int(row[0])
            arrival = float(row[1])
            n_in = int(row[2])
            n_out = int(row[3])
            req = Request(rid, arrival, n_in, n_out)
        except ValueError as exc:
            raise TraceError(str(exc), line=lineno) from None
        if rid in seen:
            raise TraceError(f"duplicate request id {rid}", line=lineno)
        seen.add(rid)
        requests.append(req)
    requests.sort(key=lambda r: (r.arrival_s, r.id))
    return requests


def format_trace(requests: list[Request]) -> str:
    """Serialize requests in the trace format (exact float round-trip)."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in requests:
        w.writerow([r.id, repr(float(r.arrival_s)), r.input_tokens, r.output_tokens])
    return out.getvalue()
