"""Discrete-event core.

Active tasks progress at piecewise-constant rates. Under concurrent sharing
every task in the sharing group advances at ``1/sigma`` of its solo speed,
where::

    sigma = max(1, sum(compute_rate) / C, sum(mem_rate) / M)

and a task's rates are its demands divided by its solo duration. Under time
slicing only the instance holding the GPU forms the group; the others are
frozen, and handing the GPU to a different instance costs a dead interval.

Events are ordered by ``(time_s, seq)``. Arrivals get their ``seq`` when
queued; a task's completion carries the ``seq`` it was given at start. The
scheduler is consulted once per distinct instant, after every event at that
instant has been applied.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from splitsim.errors import ConfigError, ContractViolation, SimulationError
from splitsim.gpu import CostModel, GpuSpec, KvBlockPool, PhaseTask
from splitsim.metrics import MetricsReport, Recorder
from splitsim.schedulers import SchedulerConfig, build_scheduler
from splitsim.workload import Request

MODES = ("exclusive", "mps", "time_sliced")
MAX_EVENTS = 10**7


@dataclass(frozen=True)
class SharingDiscipline:
    mode: str = "mps"
    quantum_s: float = 0.002
    switch_cost_s: float = 0.0005

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError("discipline.mode", f"unknown mode {self.mode!r}; one of {MODES}")
        if self.mode == "time_sliced":
            if not (self.quantum_s > 0 and math.isfinite(self.quantum_s)):
                raise ConfigError("discipline.quantum_s", "must be finite and > 0")
            if not (self.switch_cost_s >= 0 and math.isfinite(self.switch_cost_s)):
                raise ConfigError("discipline.switch_cost_s", "must be finite and >= 0")


@dataclass(order=True)
class SimEvent:
    time_s: float
    seq: int
    kind: str = field(compare=False)  # arrival | complete | quantum | switch
    ref: int = field(compare=False)  # request, task or instance id
    token: int = field(compare=False, default=0)


class SchedulerLike(Protocol):
    pools: list[KvBlockPool]
    policy: str

    @property
    def n_instances(self) -> int: ...
    def on_arrival(self, r: Request) -> None: ...
    def on_complete(self, task: PhaseTask) -> None: ...
    def next_tasks(self) -> list[PhaseTask]: ...
    def finished(self) -> bool: ...


def slowdown(tasks: Sequence[PhaseTask], C: float, M: float) -> float:
    c = sum(t.compute_rate for t in tasks)
    m = sum(t.mem_rate for t in tasks)
    return max(1.0, c / C, m / M)


@dataclass
class ActiveTask:
    task: PhaseTask
    seq: int
    remaining: float = 1.0  # fraction of solo work left
    rate: float = 0.0  # fraction of solo speed

    def eta(self, now: float) -> float:
        if self.remaining <= 0:
            return now
        if self.rate <= 0:
            return math.inf
        return now + self.remaining * self.task.duration_alone_s / self.rate


def _tol(t: float) -> float:
    return 1e-12 * max(1.0, abs(t))


class Engine:
    def __init__(self, scheduler: SchedulerLike, gpu: GpuSpec,
                 discipline: SharingDiscipline = SharingDiscipline(),
                 recorder: Recorder | None = None, emit_prompt_token: bool = False,
                 max_events: int = MAX_EVENTS):
        discipline.validate()
        if discipline.mode == "exclusive" and scheduler.n_instances > 1:
            raise ConfigError("discipline.mode",
                              f"exclusive needs one instance, got {scheduler.n_instances}")
        self.sched = scheduler
        self.gpu = gpu
        self.disc = discipline
        self.rec = recorder or Recorder()
        self.emit_prompt_token = emit_prompt_token
        self.max_events = max_events

        self.clock = 0.0
        self.queue: list[SimEvent] = []
        self.seq = 0
        self.active: dict[int, ActiveTask] = {}
        self.next_task_id = 0
        self.events = 0
        self.known: set[int] = set()
        self._kv_logged = [0] * scheduler.n_instances
        self._rates_logged: dict[int, float] | None = None
        self.sigma = 1.0
        # time-slice arbiter
        self.owner: int | None = None
        self.last_owner: int | None = None
        self.switching = False
        self.q_expired = False
        self.q_token = 0

    def _push(self, time_s: float, kind: str, ref: int, token: int = 0) -> None:
        heapq.heappush(self.queue, SimEvent(time_s, self.seq, kind, ref, token))
        self.seq += 1

    def _log(self, event_kind: str, **detail) -> None:
        self.rec.record_event(self.clock, event_kind, detail)

    def load(self, requests: Sequence[Request]) -> None:
        prev = -math.inf
        for r in requests:
            if r.arrival_s < prev:
                raise ContractViolation("requests must be sorted by arrival_s")
            prev = r.arrival_s
        self._log("meta", C=self.gpu.compute_capacity, M=self.gpu.mem_bandwidth,
                  emit=int(self.emit_prompt_token), caps=[p.capacity for p in self.sched.pools],
                  policy=self.sched.policy, mode=self.disc.mode)
        self.requests = {r.id: r for r in requests}
        for r in requests:
            self._push(r.arrival_s, "arrival", r.id)

    # -- event selection -------------------------------------------------

    def _next_completion(self) -> tuple[float, int, ActiveTask] | None:
        best = None
        for a in self.active.values():
            key = (a.eta(self.clock), a.seq)
            if best is None or key < best[:2]:
                best = (*key, a)
        return best

    def peek_time(self) -> float:
        t = self.queue[0].time_s if self.queue else math.inf
        comp = self._next_completion()
        return min(t, comp[0]) if comp else t

    def _advance(self, t: float) -> None:
        dt = t - self.clock
        if dt < 0:
            raise ContractViolation(f"clock would move backwards to {t}")
        tol = _tol(t)
        for a in self.active.values():
            if a.remaining <= 0 or a.rate <= 0:
                continue
            if a.eta(self.clock) <= t + tol:
                a.remaining = 0.0
            else:
                a.remaining -= dt * a.rate / a.task.duration_alone_s
        self.clock = t

    def step(self) -> SimEvent | None:
        """Apply the next event; consult the scheduler when the instant is exhausted."""
        comp = self._next_completion()
        head = self.queue[0] if self.queue else None
        if comp is None and head is None:
            return None
        if comp is not None and comp[0] == math.inf and head is None:
            raise SimulationError("active tasks are frozen with no pending event")
        if head is not None and (comp is None or (head.time_s, head.seq) < comp[:2]):
            ev = heapq.heappop(self.queue)
            self._advance(ev.time_s)
            self._handle(ev)
        else:
            t, seq, a = comp
            self._advance(max(t, self.clock))
            a.remaining = 0.0
            ev = SimEvent(self.clock, seq, "complete", a.task.task_id)
            self._complete(a)
        self.events += 1
        if self.events > self.max_events:
            raise SimulationError(f"no quiescence after {self.max_events} events (livelock?)")
        if self.peek_time() > self.clock + _tol(self.clock):
            self._dispatch()
        return ev

    def _handle(self, ev: SimEvent) -> None:
        if ev.kind == "arrival":
            r = self.requests[ev.ref]
            self.known.add(r.id)
            self._log("arrival", id=r.id, **{"in": r.input_tokens, "out": r.output_tokens})
            self.sched.on_arrival(r)
        elif ev.kind == "quantum":
            if ev.token == self.q_token and not self.switching:
                self.q_expired = True
                self._log("quantum", inst=ev.ref)
        elif ev.kind == "switch":
            if ev.token == self.q_token and self.switching:
                self.switching = False
                self.last_owner = self.owner
                self._push(self.clock + self.disc.quantum_s, "quantum", self.owner, self.q_token)
                self._log("switch", inst=ev.ref)
        else:
            raise ContractViolation(f"unknown event kind {ev.kind}")

    def _complete(self, a: ActiveTask) -> None:
        del self.active[a.task.task_id]
        self._log("complete", task=a.task.task_id)
        self.sched.on_complete(a.task)

    # -- scheduling and rates --------------------------------------------

    def _dispatch(self) -> None:
        for task in self.sched.next_tasks():
            unknown = [rid for rid in task.batch if rid not in self.known]
            if unknown:
                raise ContractViolation(f"task references unknown requests {unknown}")
            if not 0 <= task.instance_id < self.sched.n_instances:
                raise ContractViolation(f"task on unknown instance {task.instance_id}")
            task = _with_id(task, self.next_task_id)
            self.next_task_id += 1
            a = ActiveTask(task, self.seq)
            self.seq += 1
            if task.duration_alone_s <= 0:
                a.remaining = 0.0
            self.active[task.task_id] = a
            self._log("start", task=task.task_id, kind=task.kind.value, inst=task.instance_id,
                      ids=task.batch, c=task.compute_demand, m=task.mem_demand,
                      d=task.duration_alone_s)
        for i, pool in enumerate(self.sched.pools):
            if pool.used != self._kv_logged[i]:
                self._kv_logged[i] = pool.used
                self._log("kv", inst=i, used=pool.used)
        self._arbitrate()
        self._set_rates()

    def _arbitrate(self) -> None:
        if self.disc.mode != "time_sliced" or self.switching:
            return
        runnable = sorted({a.task.instance_id for a in self.active.values()})
        if self.owner is not None and self.owner in runnable and not self.q_expired:
            return
        self.q_expired = False
        self.q_token += 1
        if not runnable:
            self.owner = None
            return
        anchor = self.owner if self.owner is not None else self.last_owner
        if anchor is None:
            nxt = runnable[0]
        else:
            n = self.sched.n_instances
            nxt = next(j % n for j in range(anchor + 1, anchor + n + 1) if j % n in runnable)
        self.owner = nxt
        if self.last_owner is not None and nxt != self.last_owner and self.disc.switch_cost_s > 0:
            self.switching = True
            self._push(self.clock + self.disc.switch_cost_s, "switch", nxt, self.q_token)
        else:
            self.last_owner = nxt
            self._push(self.clock + self.disc.quantum_s, "quantum", nxt, self.q_token)

    def _set_rates(self) -> None:
        if self.disc.mode == "time_sliced":
            group = [] if (self.owner is None or self.switching) else [
                a for a in self.active.values() if a.task.instance_id == self.owner]
        else:
            group = list(self.active.values())
        self.sigma = slowdown([a.task for a in group], self.gpu.compute_capacity,
                              self.gpu.mem_bandwidth)
        members = {id(a) for a in group}
        rates = {}
        for tid in sorted(self.active):
            a = self.active[tid]
            a.rate = 1.0 / self.sigma if id(a) in members else 0.0
            rates[tid] = a.rate
        if rates != self._rates_logged:
            self._rates_logged = rates
            self._log("rates", r=rates)

    def run(self, requests: Sequence[Request]) -> MetricsReport:
        self.load(requests)
        self._dispatch()
        while self.step() is not None:
            pass
        if not self.sched.finished():
            raise SimulationError("simulation stalled with unfinished requests "
                                  "(KV capacity too small for a request?)")
        return self.rec.report()


def _with_id(task: PhaseTask, task_id: int) -> PhaseTask:
    return PhaseTask(task.kind, task.batch, task.compute_demand, task.mem_demand,
                     task.duration_alone_s, task.instance_id, task_id)


def check_capacity(requests: Sequence[Request], sched) -> None:
    for r in requests:
        inst = sched.route[r.id]
        need = sched.pools[inst].blocks_for(r.input_tokens + r.output_tokens)
        if need > sched.pools[inst].capacity:
            raise ConfigError("gpu.mem_budget",
                              f"request {r.id} needs {need} KV blocks but instance {inst} "
                              f"has {sched.pools[inst].capacity}")


def run(requests: Sequence[Request], scheduler: SchedulerConfig | None = None,
        gpu: GpuSpec | None = None, cost: CostModel | None = None,
        discipline: SharingDiscipline | None = None, emit_log: bool = False) -> MetricsReport:
    """Simulate ``requests`` to quiescence and return the metrics report.

    With ``emit_log`` the CSV event log is attached as ``report.event_log``.
    """
    scheduler = scheduler or SchedulerConfig()
    gpu = gpu or GpuSpec()
    cost = cost or CostModel()
    discipline = discipline or SharingDiscipline(
        mode="mps" if scheduler.instance_count > 1 else "exclusive")
    gpu.validate()
    cost.validate()
    reqs = [r.fresh() for r in requests]
    sched = build_scheduler(reqs, gpu, cost, scheduler)
    check_capacity(reqs, sched)
    rec = Recorder(keep_log=emit_log)
    eng = Engine(sched, gpu, discipline, rec, emit_prompt_token=scheduler.prompt_emits_token)
    report = eng.run(reqs)
    report.event_log = rec.event_log_csv() if emit_log else None
    return report
