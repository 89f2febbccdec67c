"""Shared fixtures for engine-level tests."""

from __future__ import annotations

from splitsim.engine import Engine, SharingDiscipline
from splitsim.gpu import GpuSpec, KvBlockPool, PhaseTask, TaskKind
from splitsim.metrics import Recorder
from splitsim.workload import Request

# C = M = 1000 keeps hand arithmetic simple
UNIT_GPU = GpuSpec(compute_capacity=1000.0, mem_bandwidth=1000.0, mem_budget=1e6,
                   weight_mem_units=0.0)


def task(c: float, m: float, instance: int = 0, kind: TaskKind = TaskKind.PROMPT,
         gpu: GpuSpec = UNIT_GPU) -> PhaseTask:
    """Task with no overhead, so its solo duration is the pure roofline."""
    d = max(c / gpu.compute_capacity, m / gpu.mem_bandwidth)
    return PhaseTask(kind, (), c, m, d, instance)


class ScriptedScheduler:
    """Releases a fixed task at a fixed time.

    Each scripted task gets a dummy request arriving at its release time; the
    arrival triggers the release. Good for driving the engine with a known
    task set and no policy logic in the way.
    """

    policy = "scripted"

    def __init__(self, script: list[tuple[float, PhaseTask]], n_instances: int = 1):
        script = sorted(script, key=lambda p: p[0])
        self.requests = [Request(i, t, 1, 1) for i, (t, _) in enumerate(script)]
        self.tasks = {i: PhaseTask(tk.kind, (i,), tk.compute_demand, tk.mem_demand,
                                   tk.duration_alone_s, tk.instance_id)
                      for i, (_, tk) in enumerate(script)}
        self.pools = [KvBlockPool(16, 1) for _ in range(n_instances)]
        self.ready: list[PhaseTask] = []
        self.done: dict[int, float] = {}
        self.engine: Engine | None = None

    @property
    def n_instances(self) -> int:
        return len(self.pools)

    def on_arrival(self, r: Request) -> None:
        self.ready.append(self.tasks[r.id])

    def on_complete(self, t: PhaseTask) -> None:
        self.done[t.batch[0]] = self.engine.clock

    def next_tasks(self) -> list[PhaseTask]:
        out, self.ready = self.ready, []
        return out

    def finished(self) -> bool:
        return len(self.done) == len(self.tasks)


def run_script(script, n_instances=1, discipline=SharingDiscipline("mps"), gpu=UNIT_GPU,
               keep_log=False):
    """Run a script; returns ({script index: completion time}, engine)."""
    sched = ScriptedScheduler(script, n_instances)
    eng = Engine(sched, gpu, discipline, Recorder(keep_log=keep_log))
    sched.engine = eng
    eng.run(sched.requests)
    return sched.done, eng


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-300)
