"""Batching policies.

Each logical instance owns a :class:`QueueState` and a :class:`KvBlockPool`.
The per-instance decision functions (``sequential_next``,
``continuous_batching_next``, ``mixed_batching_next``) admit requests, emit
tasks and mark them active; ``complete`` applies a finished task. A
:class:`Scheduler` groups one or more instances and routes arrivals, which is
how the multi-instance and pipelined (Splitwiser) arrangements are expressed.

Admission is FCFS with head-of-line blocking. A request is admitted only if
its prompt blocks fit *and* the final footprint (input + output tokens) of
every resident request still fits, so decode growth can never run out of
blocks and no preemption is needed.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

from splitsim.errors import ConfigError, ContractViolation
from splitsim.gpu import (
    CostModel,
    GpuSpec,
    KvBlockPool,
    PhaseTask,
    TaskKind,
    make_prompt_task,
    make_token_step_task,
)
from splitsim.workload import Request, RequestState

POLICIES = ("sequential", "splitwiser", "continuous", "mixed", "multi_instance")
INNER_POLICIES = ("sequential", "continuous", "mixed")


@dataclass
class SchedulerConfig:
    policy: str = "continuous"
    max_batch: int | None = None
    P: int = 1
    n_instances: int = 2
    inner: str = "continuous"
    # prompt completion yields output token 1 (so output_tokens=1 needs no decode step)
    prompt_emits_token: bool = False

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError("scheduler.policy", f"unknown policy {self.policy!r}; one of {POLICIES}")
        if self.max_batch is not None and self.max_batch < 1:
            raise ConfigError("scheduler.max_batch", "must be >= 1")
        if self.P < 1:
            raise ConfigError("scheduler.P", "must be >= 1")
        if self.policy == "multi_instance":
            if self.n_instances < 2:
                raise ConfigError("scheduler.n_instances", "must be >= 2 for multi_instance")
            if self.inner not in INNER_POLICIES:
                raise ConfigError("scheduler.inner", f"unknown inner policy {self.inner!r}")

    @property
    def instance_count(self) -> int:
        if self.policy == "splitwiser":
            return self.P
        if self.policy == "multi_instance":
            return self.n_instances
        return 1


@dataclass
class QueueState:
    instance_id: int = 0
    requests: dict[int, Request] = field(default_factory=dict)
    waiting: deque = field(default_factory=deque)
    prompting: list[int] = field(default_factory=list)
    running: list[int] = field(default_factory=list)
    generated: dict[int, int] = field(default_factory=dict)
    prompt_active: bool = False
    step_active: bool = False
    reserved: int = 0  # final-footprint blocks of resident requests
    fresh: set[int] = field(default_factory=set)  # prompted, no decode step yet
    prompts_done: int = 0
    finished: int = 0
    gate_open: bool = True

    @property
    def resident(self) -> int:
        return len(self.prompting) + len(self.running)

    @property
    def busy(self) -> bool:
        return self.prompt_active or self.step_active


@dataclass(frozen=True)
class PolicyContext:
    gpu: GpuSpec
    cost: CostModel
    cfg: SchedulerConfig


def _admit(qs: QueueState, pool: KvBlockPool, cfg: SchedulerConfig) -> list[Request]:
    limit = cfg.max_batch if cfg.max_batch is not None else float("inf")
    admitted: list[Request] = []
    while qs.waiting and qs.resident + len(admitted) < limit:
        r = qs.requests[qs.waiting[0]]
        final = pool.blocks_for(r.input_tokens + r.output_tokens)
        if qs.reserved + final > pool.capacity:
            break
        pool.alloc(r.id, r.input_tokens)
        qs.reserved += final
        qs.waiting.popleft()
        r.advance(RequestState.PROMPTING)
        admitted.append(r)
    qs.prompting.extend(r.id for r in admitted)
    return admitted


def _prompt(qs: QueueState, pool: KvBlockPool, ctx: PolicyContext) -> list[PhaseTask]:
    if not qs.gate_open:
        return []
    admitted = _admit(qs, pool, ctx.cfg)
    if not admitted:
        return []
    qs.prompt_active = True
    return [make_prompt_task(admitted, ctx.gpu, ctx.cost, qs.instance_id)]


def _step(qs: QueueState, pool: KvBlockPool, ctx: PolicyContext) -> list[PhaseTask]:
    if not qs.running:
        return []
    batch = [qs.requests[i] for i in qs.running]
    handoff = any(i in qs.fresh for i in qs.running)
    qs.step_active = True
    return [make_token_step_task(batch, pool, ctx.gpu, ctx.cost, qs.instance_id, handoff)]


def sequential_next(qs: QueueState, pool: KvBlockPool, ctx: PolicyContext) -> list[PhaseTask]:
    """Whole batch through prompt, then decode it to completion, then next batch."""
    if qs.busy:
        return []
    if qs.running:
        return _step(qs, pool, ctx)
    return _prompt(qs, pool, ctx)


def continuous_batching_next(qs: QueueState, pool: KvBlockPool,
                             ctx: PolicyContext) -> list[PhaseTask]:
    """Binary prompt-or-decode decision; admissible waiting requests go first."""
    if qs.busy:
        return []
    return _prompt(qs, pool, ctx) or _step(qs, pool, ctx)


def mixed_batching_next(qs: QueueState, pool: KvBlockPool, ctx: PolicyContext) -> list[PhaseTask]:
    """Prompt batch and decode batch may be in flight at the same time."""
    tasks: list[PhaseTask] = []
    if not qs.prompt_active:
        tasks += _prompt(qs, pool, ctx)
    if not qs.step_active:
        tasks += _step(qs, pool, ctx)
    return tasks


NEXT: dict[str, Callable[[QueueState, KvBlockPool, PolicyContext], list[PhaseTask]]] = {
    "sequential": sequential_next,
    "continuous": continuous_batching_next,
    "mixed": mixed_batching_next,
}


def _finish(qs: QueueState, pool: KvBlockPool, r: Request) -> None:
    qs.running.remove(r.id)
    qs.fresh.discard(r.id)
    pool.free(r.id)
    qs.reserved -= pool.blocks_for(r.input_tokens + r.output_tokens)
    r.advance(RequestState.FINISHED)
    qs.finished += 1


def complete(qs: QueueState, pool: KvBlockPool, task: PhaseTask, cfg: SchedulerConfig) -> None:
    """Apply a finished task: move prompts to running, count tokens, free blocks."""
    if task.kind is TaskKind.PROMPT:
        if not qs.prompt_active:
            raise ContractViolation(f"instance {qs.instance_id}: no prompt in flight")
        qs.prompt_active = False
        qs.prompts_done += 1
        for rid in task.batch:
            r = qs.requests[rid]
            qs.prompting.remove(rid)
            r.advance(RequestState.GENERATING)
            qs.running.append(rid)
            qs.generated[rid] = 0
            qs.fresh.add(rid)
            if cfg.prompt_emits_token:
                _count_token(qs, pool, r)
    else:
        if not qs.step_active:
            raise ContractViolation(f"instance {qs.instance_id}: no decode step in flight")
        qs.step_active = False
        for rid in task.batch:
            r = qs.requests[rid]
            if r.state is not RequestState.GENERATING:
                raise ContractViolation(f"decode step for request {rid} in state {r.state.name}")
            qs.fresh.discard(rid)
            _count_token(qs, pool, r)


def _count_token(qs: QueueState, pool: KvBlockPool, r: Request) -> None:
    qs.generated[r.id] += 1
    if qs.generated[r.id] > r.output_tokens:
        raise ContractViolation(f"request {r.id} generated past its budget")
    if qs.generated[r.id] == r.output_tokens:
        _finish(qs, pool, r)
    else:
        pool.ensure(r.id, r.input_tokens + qs.generated[r.id])


def multi_instance_split(requests: Sequence[Request], n_instances: int) -> list[list[Request]]:
    """Round-robin by arrival order."""
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    order = sorted(requests, key=lambda r: (r.arrival_s, r.id))
    return [order[i::n_instances] for i in range(n_instances)]


def shard_contiguous(requests: Sequence[Request], n_shards: int) -> list[list[Request]]:
    """Contiguous shards by list position; sizes differ by at most one."""
    n = len(requests)
    base, extra = divmod(n, n_shards)
    shards, start = [], 0
    for i in range(n_shards):
        size = base + (1 if i < extra else 0)
        shards.append(list(requests[start:start + size]))
        start += size
    return shards


class Scheduler:
    """A group of logical instances driven by the engine.

    ``staggered`` makes instance i+1 wait until instance i has completed its
    first prompt (the pipelined Splitwiser start-up).
    """

    def __init__(self, shards: list[list[Request]], gpu: GpuSpec, cost: CostModel,
                 cfg: SchedulerConfig, policy: str, staggered: bool = False):
        n = len(shards)
        self.cfg = cfg
        self.policy = policy
        self.ctx = PolicyContext(gpu, cost, cfg)
        self.next_fn = NEXT[policy]
        self.staggered = staggered
        cap = gpu.kv_blocks_per_instance(n)
        self.pools = [KvBlockPool(gpu.block_tokens, cap) for _ in range(n)]
        self.queues = [QueueState(instance_id=i) for i in range(n)]
        self.route: dict[int, int] = {}
        self.shard_sizes = [len(s) for s in shards]
        for i, shard in enumerate(shards):
            for r in shard:
                if r.id in self.route:
                    raise ContractViolation(f"request {r.id} routed twice")
                self.route[r.id] = i
        if staggered:
            for q in self.queues[1:]:
                q.gate_open = False
            self._update_gates()

    @property
    def n_instances(self) -> int:
        return len(self.queues)

    def on_arrival(self, r: Request) -> None:
        if r.id not in self.route:
            raise ContractViolation(f"unknown request {r.id}")
        q = self.queues[self.route[r.id]]
        q.requests[r.id] = r
        q.waiting.append(r.id)

    def on_complete(self, task: PhaseTask) -> None:
        q = self.queues[task.instance_id]
        for rid in task.batch:
            if rid not in q.requests:
                raise ContractViolation(f"task {task.task_id} references unknown request {rid}")
        complete(q, self.pools[task.instance_id], task, self.cfg)
        if self.staggered:
            self._update_gates()

    def _update_gates(self) -> None:
        for i in range(1, self.n_instances):
            prev = self.queues[i - 1]
            if not self.queues[i].gate_open and (
                prev.gate_open and (prev.prompts_done > 0 or self.shard_sizes[i - 1] == 0)
            ):
                self.queues[i].gate_open = True

    def next_tasks(self) -> list[PhaseTask]:
        tasks: list[PhaseTask] = []
        for q, pool in zip(self.queues, self.pools):
            tasks += self.next_fn(q, pool, self.ctx)
        return tasks

    def finished(self) -> bool:
        return sum(q.finished for q in self.queues) == len(self.route)

    def generated_total(self) -> int:
        return sum(sum(q.generated.values()) for q in self.queues)


def pipelined_splitwiser_next(sched: Scheduler) -> list[PhaseTask]:
    """At most one runnable task per sub-process (each runs the sequential policy)."""
    return sched.next_tasks()


def build_scheduler(requests: Sequence[Request], gpu: GpuSpec, cost: CostModel,
                    cfg: SchedulerConfig) -> Scheduler:
    cfg.validate()
    if cfg.policy == "splitwiser":
        shards = shard_contiguous(requests, cfg.P)
        return Scheduler(shards, gpu, cost, cfg, "sequential", staggered=True)
    if cfg.policy == "multi_instance":
        return Scheduler(multi_instance_split(requests, cfg.n_instances), gpu, cost, cfg, cfg.inner)
    return Scheduler([list(requests)], gpu, cost, cfg, cfg.policy)
