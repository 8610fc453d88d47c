"""Layer-by-layer MCU execution model: schedules, peak-memory traces,
flash spill (network slicing) and abstract cost accounting.

A schedule is a list of steps. Each step consumes input buffers, produces at
most one output buffer, and carries the executing layer's parameter bytes.
Buffers live from their producing step until their last in-memory consumer;
a step may store a buffer to flash (freeing it afterwards) and a later step
may reload it under a fresh buffer id. The live set at a step is the step's
parameter bytes plus every buffer whose lifetime covers the step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .builder import CompositeModel
from .layers import concat_channels


@dataclass
class Buffer:
    buffer_id: str
    nbytes: int


@dataclass
class ExecutionStep:
    step_id: int
    name: str
    inputs: List[str]
    output: Optional[Buffer]
    param_bytes: int = 0
    macs: int = 0
    store_to_flash: List[str] = field(default_factory=list)
    load_from_flash: List[Buffer] = field(default_factory=list)
    # numeric execution hook: (model, layer_index) or a special op tag
    op: Optional[tuple] = None


@dataclass
class Schedule:
    steps: List[ExecutionStep]
    input_buffers: List[Buffer]
    output_buffer: str
    sliced: bool = False

    def buffer_bytes(self) -> Dict[str, int]:
        sizes = {b.buffer_id: b.nbytes for b in self.input_buffers}
        for s in self.steps:
            if s.output is not None:
                sizes[s.output.buffer_id] = s.output.nbytes
            for b in s.load_from_flash:
                sizes[b.buffer_id] = b.nbytes
        return sizes


@dataclass
class MemoryTrace:
    live_bytes: List[int]
    peak_bytes: int
    peak_step: int
    lifetimes: Dict[str, Tuple[int, int]]


@dataclass
class CostReport:
    macs_per_step: List[int]
    total_macs: int
    param_bytes: int
    spill_store_bytes: int
    spill_reload_bytes: int

    @property
    def flash_traffic_bytes(self) -> int:
        return self.param_bytes + self.spill_store_bytes + self.spill_reload_bytes


class ScheduleError(ValueError):
    """Raised on dangling buffer references or invalid schedules."""


def _act_bytes(shape) -> int:
    return 4 * int(np.prod(shape))


def _layer_macs(layer, out_shape) -> int:
    kind = layer.kind
    if kind == "conv1d":
        out_c, out_l = out_shape
        return out_c * out_l * layer.in_channels * layer.spec.kernel_width
    if kind == "fully-connected":
        return layer.in_features * layer.spec.out_channels
    return 0


def build_schedule(composite: CompositeModel, classifier_index: int,
                   sliced: bool = False) -> Schedule:
    """Inference schedule: all selector layers, then the chosen classifier.

    With aggregation the selector's post-pool conv1/conv2 outputs are
    consumed again by the classifier's concat points; un-sliced they stay
    resident until then, sliced they are stored to flash right after the
    next selector layer consumes them and reloaded at the concat.
    """
    if not 0 <= classifier_index < composite.num_classifiers:
        raise ScheduleError(f"classifier index {classifier_index} out of range")
    sel = composite.selector
    cls = composite.classifiers[classifier_index]
    agg = composite.aggregation_enabled
    tap_layers = composite.selector_tap_points() if agg else ()

    steps: List[ExecutionStep] = []
    sid = 0
    x_in = Buffer("input", _act_bytes(sel.input_shape))

    def add(name, inputs, out_buf, param_bytes=0, macs=0, op=None):
        nonlocal sid
        steps.append(ExecutionStep(sid, name, inputs, out_buf,
                                   param_bytes=param_bytes, macs=macs, op=op))
        sid += 1
        return steps[-1]

    # selector layers
    prev = "input"
    sel_shapes = sel.layer_output_shapes()
    tap_buffers = {}
    for i, layer in enumerate(sel.layers):
        out = Buffer(f"sel.{i}.{layer.kind}", _act_bytes(sel_shapes[i]))
        add(f"selector/{i}/{layer.kind}", [prev], out,
            param_bytes=4 * layer.param_count(),
            macs=_layer_macs(layer, sel_shapes[i]), op=("layer", "sel", i))
        if i in tap_layers:
            tap_buffers[i] = out
        prev = out.buffer_id
    sel_logits = prev

    # classifier layers; taps consumed via concat steps
    cls_shapes = cls.layer_output_shapes()
    prev = "input"
    for i, layer in enumerate(cls.layers):
        pre_tap_shape = layer.out_shape(
            cls_shapes[i - 1] if i else cls.input_shape)
        out = Buffer(f"cls.{i}.{layer.kind}", _act_bytes(pre_tap_shape))
        add(f"classifier/{i}/{layer.kind}", [prev], out,
            param_bytes=4 * layer.param_count(),
            macs=_layer_macs(layer, pre_tap_shape), op=("layer", "cls", i))
        prev = out.buffer_id
        if i in cls.tap_channels:
            slot = cls.tap_order.index(i)
            tap = tap_buffers[list(tap_layers)[slot]]
            cat = Buffer(f"cls.{i}.concat", _act_bytes(cls_shapes[i]))
            if sliced:
                reload_buf = Buffer(tap.buffer_id + ".reload", tap.nbytes)
                step = add(f"classifier/{i}/concat-channels",
                           [prev, reload_buf.buffer_id], cat,
                           op=("concat", "cls", i))
                step.load_from_flash.append(reload_buf)
            else:
                add(f"classifier/{i}/concat-channels",
                    [prev, tap.buffer_id], cat, op=("concat", "cls", i))
            prev = cat.buffer_id

    if sliced and agg:
        # store each tap right after its last selector-side consumer
        for li, tap in tap_buffers.items():
            consumers = [s for s in steps
                         if tap.buffer_id in s.inputs and s.op[1] == "sel"]
            last = max(consumers, key=lambda s: s.step_id)
            last.store_to_flash.append(tap.buffer_id)

    return Schedule(steps=steps, input_buffers=[x_in], output_buffer=prev,
                    sliced=sliced)


def simulate_memory(schedule: Schedule) -> MemoryTrace:
    """Walks the schedule computing per-step live-set bytes and the peak."""
    sizes = schedule.buffer_bytes()
    produced = {b.buffer_id: -1 for b in schedule.input_buffers}
    stored_at = {}
    for s in schedule.steps:
        if s.output is not None:
            produced[s.output.buffer_id] = s.step_id
        for b in s.load_from_flash:
            produced[b.buffer_id] = s.step_id
        for bid in s.store_to_flash:
            if bid not in produced:
                raise ScheduleError(f"step {s.step_id}: store of unknown "
                                    f"buffer {bid!r}")
            stored_at[bid] = s.step_id
    last_use = {}
    for s in schedule.steps:
        for bid in s.inputs:
            if bid not in produced:
                raise ScheduleError(f"step {s.step_id}: dangling buffer "
                                    f"reference {bid!r}")
            if produced[bid] > s.step_id:
                raise ScheduleError(f"step {s.step_id}: buffer {bid!r} read "
                                    "before being produced")
            last_use[bid] = s.step_id
    # live until the later of: last in-memory consumer, the flash store step
    lifetimes = {}
    for bid, born in produced.items():
        end = max(last_use.get(bid, born), stored_at.get(bid, born))
        lifetimes[bid] = (born, end)
    live = []
    for s in schedule.steps:
        total = s.param_bytes
        for bid, (born, end) in lifetimes.items():
            if born <= s.step_id <= end:
                total += sizes[bid]
        live.append(total)
    if not live:
        return MemoryTrace([], 0, -1, lifetimes)
    peak_step = int(np.argmax(live))
    return MemoryTrace(live_bytes=live, peak_bytes=int(live[peak_step]),
                       peak_step=peak_step, lifetimes=lifetimes)


class FlashStore:
    """Simulated flash key-value store for spilled activations."""

    def __init__(self):
        self.data: Dict[str, np.ndarray] = {}
        self.stores = 0
        self.loads = 0

    def store(self, key, value):
        self.data[key] = value
        self.stores += 1

    def load(self, key):
        if key not in self.data:
            raise ScheduleError(f"missing flash entry {key!r}")
        self.loads += 1
        return self.data.pop(key)


def execute_schedule(schedule: Schedule, composite: CompositeModel,
                     classifier_index: int, x,
                     flash_store: Optional[FlashStore] = None):
    """Numerically executes a schedule on one (C, L) input; honors spill
    directives through ``flash_store``. Returns the classifier logits."""
    if flash_store is None:
        flash_store = FlashStore()
    sel = composite.selector
    cls = composite.classifiers[classifier_index]
    env: Dict[str, np.ndarray] = {"input": np.asarray(x, dtype=sel.dtype)[None]}
    for s in schedule.steps:
        for b in s.load_from_flash:
            env[b.buffer_id] = flash_store.load(b.buffer_id.rsplit(".reload", 1)[0])
        vals = []
        for bid in s.inputs:
            if bid not in env:
                raise ScheduleError(f"step {s.step_id}: buffer {bid!r} not "
                                    "in memory")
            vals.append(env[bid])
        op_kind, net, idx = s.op
        if op_kind == "layer":
            layer = (sel if net == "sel" else cls).layers[idx]
            out, _ = layer.forward(vals[0])
        elif op_kind == "concat":
            out = concat_channels(vals)
        else:
            raise ScheduleError(f"unknown op {s.op!r}")
        if s.output is not None:
            env[s.output.buffer_id] = out
        for bid in s.store_to_flash:
            flash_store.store(bid, env[bid])
    return env[schedule.output_buffer][0]


def estimate_cost(schedule: Schedule) -> CostReport:
    """MAC counts plus flash traffic (parameters + spill round-trips)."""
    sizes = schedule.buffer_bytes()
    macs = [s.macs for s in schedule.steps]
    store_b = sum(sizes[bid] for s in schedule.steps for bid in s.store_to_flash)
    reload_b = sum(b.nbytes for s in schedule.steps for b in s.load_from_flash)
    return CostReport(
        macs_per_step=macs,
        total_macs=int(sum(macs)),
        param_bytes=int(sum(s.param_bytes for s in schedule.steps)),
        spill_store_bytes=int(store_b),
        spill_reload_bytes=int(reload_b),
    )


def trace_to_records(schedule: Schedule, trace: MemoryTrace) -> List[dict]:
    """Per-step JSON-friendly records for reports and CSV export."""
    recs = []
    for s, live in zip(schedule.steps, trace.live_bytes):
        recs.append({
            "step": s.step_id,
            "name": s.name,
            "param_bytes": s.param_bytes,
            "macs": s.macs,
            "live_bytes": live,
            "stores": list(s.store_to_flash),
            "loads": [b.buffer_id for b in s.load_from_flash],
        })
    return recs
