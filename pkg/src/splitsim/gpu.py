"""Two-resource roofline cost model and block-granular KV-cache accounting.

A task's solo duration is ``max(compute/C, memory/M) + overhead``. Prompt
work scales with the number of input tokens in the batch; a token step reads
(a fraction of) the model weights once plus every KV block of the batch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

from splitsim.errors import AdmissionDenied, ConfigError, ContractViolation
from splitsim.workload import Request


class TaskKind(str, enum.Enum):
    PROMPT = "prompt"
    TOKEN = "token"


@dataclass(frozen=True)
class GpuSpec:
    """Device capacities.

    ``mem_budget`` and ``weight_mem_units`` are capacity figures in units of
    ``block_mem_unit``; ``mem_bandwidth`` is the per-second read budget used
    by the roofline.
    """

    compute_capacity: float = 1.0e6
    mem_bandwidth: float = 1.0e5
    mem_budget: float = 3.0e4
    block_mem_unit: float = 1.0
    weight_mem_units: float = 5.0e3
    shared_weights: bool = True
    block_tokens: int = 16

    def validate(self) -> None:
        for name in ("compute_capacity", "mem_bandwidth", "block_mem_unit"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"gpu.{name}", f"must be finite and > 0, got {v}")
        if not self.weight_mem_units >= 0:
            raise ConfigError("gpu.weight_mem_units", "must be >= 0")
        if self.block_tokens < 1:
            raise ConfigError("gpu.block_tokens", "must be >= 1")
        if self.kv_capacity_blocks < 1:
            raise ConfigError("gpu.mem_budget", "leaves no room for KV blocks after weights")

    @property
    def kv_capacity_blocks(self) -> int:
        """KV blocks available to a single instance holding one weight copy."""
        return math.floor((self.mem_budget - self.weight_mem_units) / self.block_mem_unit)

    def resident_weight_units(self, n_instances: int = 1) -> float:
        copies = 1 if (self.shared_weights or n_instances <= 1) else n_instances
        return copies * self.weight_mem_units

    def kv_blocks_total(self, n_instances: int = 1) -> int:
        """KV blocks left once every instance's weights are resident."""
        extra = self.resident_weight_units(n_instances) - self.weight_mem_units
        return self.kv_capacity_blocks - math.ceil(extra / self.block_mem_unit)

    def kv_blocks_per_instance(self, n_instances: int = 1) -> int:
        return self.kv_blocks_total(n_instances) // max(1, n_instances)


@dataclass(frozen=True)
class CostModel:
    """Per-token demand coefficients and fixed per-task overheads.

    Defaults make prompts compute-bound and decode steps memory-bound, with a
    fixed per-step overhead (launch and host-side work) that leaves the GPU
    partly idle during decode.
    """

    prompt_compute_per_token: float = 1.0
    prompt_mem_per_token: float = 0.01
    token_compute_per_req_step: float = 1.0
    token_mem_weight_fraction: float = 0.02
    token_mem_per_kv_block: float = 0.1
    prompt_overhead_s: float = 0.002
    step_overhead_s: float = 0.01
    kv_handoff_s: float = 0.0

    def validate(self) -> None:
        for name, v in vars(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"cost.{name}", f"must be finite and >= 0, got {v}")
        if self.token_mem_weight_fraction > 1:
            raise ConfigError("cost.token_mem_weight_fraction", "must lie in [0, 1]")


@dataclass(frozen=True)
class PhaseTask:
    kind: TaskKind
    batch: tuple[int, ...]
    compute_demand: float
    mem_demand: float
    duration_alone_s: float
    instance_id: int = 0
    task_id: int = -1

    @property
    def compute_rate(self) -> float:
        """Compute units/s consumed when running alone."""
        return self.compute_demand / self.duration_alone_s if self.duration_alone_s > 0 else 0.0

    @property
    def mem_rate(self) -> float:
        return self.mem_demand / self.duration_alone_s if self.duration_alone_s > 0 else 0.0


def roofline_duration(compute: float, mem: float, gpu: GpuSpec, overhead: float = 0.0) -> float:
    return max(compute / gpu.compute_capacity, mem / gpu.mem_bandwidth) + overhead


def _check_batch(batch: Sequence[Request]) -> tuple[int, ...]:
    if not batch:
        raise ContractViolation("empty batch")
    ids = tuple(r.id for r in batch)
    if len(set(ids)) != len(ids):
        raise ContractViolation(f"duplicate request in batch {ids}")
    return ids


def make_prompt_task(batch: Sequence[Request], gpu: GpuSpec, cost: CostModel,
                     instance_id: int = 0) -> PhaseTask:
    ids = _check_batch(batch)
    tokens = sum(r.input_tokens for r in batch)
    c = cost.prompt_compute_per_token * tokens
    m = cost.prompt_mem_per_token * tokens
    d = roofline_duration(c, m, gpu, cost.prompt_overhead_s)
    return PhaseTask(TaskKind.PROMPT, ids, c, m, d, instance_id)


def make_token_step_task(batch: Sequence[Request], pool: KvBlockPool, gpu: GpuSpec,
                         cost: CostModel, instance_id: int = 0,
                         handoff: bool = False) -> PhaseTask:
    """One decode step for ``batch``. ``handoff`` adds the KV handoff latency."""
    ids = _check_batch(batch)
    blocks = 0
    for rid in ids:
        if rid not in pool.allocated:
            raise ContractViolation(f"request {rid} has no KV allocation")
        blocks += pool.allocated[rid]
    c = cost.token_compute_per_req_step * len(ids)
    m = cost.token_mem_weight_fraction * gpu.weight_mem_units + cost.token_mem_per_kv_block * blocks
    overhead = cost.step_overhead_s
    if handoff:
        overhead += cost.kv_handoff_s
    d = roofline_duration(c, m, gpu, overhead)
    return PhaseTask(TaskKind.TOKEN, ids, c, m, d, instance_id)


@dataclass
class KvBlockPool:
    block_tokens: int
    capacity: int
    allocated: dict[int, int] = field(default_factory=dict)

    @property
    def used(self) -> int:
        return sum(self.allocated.values())

    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.block_tokens)

    def alloc(self, rid: int, tokens_resident: int) -> None:
        """Size ``rid``'s allocation to hold ``tokens_resident`` tokens."""
        need = self.blocks_for(tokens_resident)
        have = self.allocated.get(rid, 0)
        if need <= have:
            raise ContractViolation(f"request {rid} already holds {have} blocks (asked {need})")
        if self.used - have + need > self.capacity:
            raise AdmissionDenied(f"request {rid}: {need} blocks exceed free capacity")
        self.allocated[rid] = need

    def ensure(self, rid: int, tokens_resident: int) -> bool:
        """Grow ``rid`` if needed; returns True when blocks were added."""
        if self.blocks_for(tokens_resident) > self.allocated.get(rid, 0):
            self.alloc(rid, tokens_resident)
            return True
        return False

    def free(self, rid: int) -> int:
        if rid not in self.allocated:
            raise ContractViolation(f"request {rid} has no KV allocation")
        return self.allocated.pop(rid)

    def usage_pct(self) -> float:
        return 100.0 * self.used / self.capacity


# functional aliases


def kv_alloc(pool: KvBlockPool, request: Request, tokens_resident: int) -> KvBlockPool:
    pool.alloc(request.id, tokens_resident)
    return pool


def kv_free(pool: KvBlockPool, request: Request) -> KvBlockPool:
    pool.free(request.id)
    return pool


def kv_usage_pct(pool: KvBlockPool) -> float:
    return pool.usage_pct()

