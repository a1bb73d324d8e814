"""Workload traces (CSV), synthetic trace generation and run reports.

A trace lives in a directory::

    trace.csv      time,vm_id,cpu,mem,storage_io,net_io
    arrivals.csv   arrival_time,request_id,vm_count,cpu,mem,duration,origin_x,origin_y,anti_affinity
    meta.json      {"step_seconds": ..., "max_storage_io": ..., "max_net_io": ...}   (optional)

Floats are written with ``repr`` (shortest round-trip decimal), so
``load_trace(write_trace(t))`` reproduces ``t`` exactly.
"""

from __future__ import annotations

import csv
import json
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import AntiAffinity, Proximity, UserRequest, VirtualMachine
from .simkernel import (
    MIGRATION_COMPLETED,
    REQUEST_ADMITTED,
    REQUEST_DEFERRED,
    REPORT_KEYS,
    SimEvent,
    StepMetrics,
)

TRACE_HEADER = ["time", "vm_id", "cpu", "mem", "storage_io", "net_io"]
ARRIVALS_HEADER = ["arrival_time", "request_id", "vm_count", "cpu", "mem", "duration",
                   "origin_x", "origin_y", "anti_affinity"]


class TraceParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass(frozen=True)
class TraceRecord:
    time: int
    vm_id: str
    cpu: float
    mem: float
    storage_io: float = 0.0
    net_io: float = 0.0


@dataclass
class TraceMeta:
    step_seconds: float = 300.0
    max_storage_io: float = 1.0
    max_net_io: float = 1.0


@dataclass
class WorkloadTrace:
    meta: TraceMeta
    records: list[TraceRecord] = field(default_factory=list)
    arrivals: list[UserRequest] = field(default_factory=list)

    def __post_init__(self):
        self._times = [r.time for r in self.records]
        self._arrival_times = [r.arrival_time for r in self.arrivals]

    def records_at(self, t: int) -> list[TraceRecord]:
        return self.records[bisect_left(self._times, t):bisect_right(self._times, t)]

    def arrivals_at(self, t: int) -> list[UserRequest]:
        return self.arrivals[bisect_left(self._arrival_times, t):bisect_right(self._arrival_times, t)]

    def vm_ids(self) -> list[str]:
        return sorted({r.vm_id for r in self.records})

    def cpu_series(self, vm_id: str, horizon: int | None = None) -> np.ndarray:
        """Per-step cpu of one VM with zero-order hold across gaps."""
        recs = [r for r in self.records if r.vm_id == vm_id]
        if not recs:
            return np.zeros(0)
        end = horizon if horizon is not None else recs[-1].time + 1
        out = np.zeros(end)
        k, current = 0, recs[0].cpu
        for t in range(end):
            while k < len(recs) and recs[k].time <= t:
                current = recs[k].cpu
                k += 1
            out[t] = current
        return out


def request_from_row(request_id: str, arrival_time: int, vm_count: int, cpu: float, mem: float,
                     duration: int, origin: tuple[float, float], anti_affinity: bool,
                     proximity_weight: float = 1.0) -> UserRequest:
    group = request_id if anti_affinity else None
    vms = [VirtualMachine(id=f"{request_id}-{k}", cpu_demand=cpu, mem_demand=mem,
                          mem_footprint=mem, group=group) for k in range(vm_count)]
    return UserRequest(
        id=request_id, arrival_time=arrival_time, vms=vms, duration=duration,
        hard=[AntiAffinity(request_id)] if anti_affinity else [],
        soft=[Proximity(proximity_weight, origin)] if proximity_weight > 0 else [],
        origin=origin,
    )


def _num(text: str, path, line: int, col: str, kind=float):
    try:
        v = kind(text)
    except ValueError:
        raise TraceParseError(path, line, f"malformed {col} value {text!r}") from None
    if kind is float and not math.isfinite(v):
        raise TraceParseError(path, line, f"non-finite {col} value {text!r}")
    return v


def _read_rows(path: Path, header: list[str]):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            first = next(reader)
        except StopIteration:
            raise TraceParseError(path, 1, "missing header") from None
        if first != header:
            missing = [c for c in header if c not in first]
            detail = f"missing columns {missing}" if missing else f"expected header {','.join(header)}"
            raise TraceParseError(path, 1, detail)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise TraceParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def load_trace(path, proximity_weight: float = 1.0) -> WorkloadTrace:
    """Parse a trace directory (or the path of its ``trace.csv``)."""
    path = Path(path)
    csv_path = path / "trace.csv" if path.is_dir() else path
    base = csv_path.parent

    records = []
    prev = None
    for lineno, row in _read_rows(csv_path, TRACE_HEADER):
        t = _num(row[0], csv_path, lineno, "time", int)
        cpu = _num(row[2], csv_path, lineno, "cpu")
        mem = _num(row[3], csv_path, lineno, "mem")
        sio = _num(row[4], csv_path, lineno, "storage_io")
        nio = _num(row[5], csv_path, lineno, "net_io")
        if not 0.0 <= cpu <= 1.0:
            raise TraceParseError(csv_path, lineno, f"cpu {cpu} outside [0, 1]")
        if t < 0 or mem < 0 or sio < 0 or nio < 0:
            raise TraceParseError(csv_path, lineno, "negative time or resource value")
        key = (t, row[1])
        if prev is not None and key <= prev:
            raise TraceParseError(csv_path, lineno, "rows not strictly sorted by (time, vm_id)")
        prev = key
        records.append(TraceRecord(t, row[1], cpu, mem, sio, nio))

    arrivals = []
    arr_path = base / "arrivals.csv"
    if arr_path.exists():
        prev_t = None
        for lineno, row in _read_rows(arr_path, ARRIVALS_HEADER):
            t = _num(row[0], arr_path, lineno, "arrival_time", int)
            if prev_t is not None and t < prev_t:
                raise TraceParseError(arr_path, lineno, "arrivals not sorted by arrival_time")
            prev_t = t
            try:
                arrivals.append(request_from_row(
                    row[1], t,
                    _num(row[2], arr_path, lineno, "vm_count", int),
                    _num(row[3], arr_path, lineno, "cpu"),
                    _num(row[4], arr_path, lineno, "mem"),
                    _num(row[5], arr_path, lineno, "duration", int),
                    (_num(row[6], arr_path, lineno, "origin_x"), _num(row[7], arr_path, lineno, "origin_y")),
                    bool(_num(row[8], arr_path, lineno, "anti_affinity", int)),
                    proximity_weight,
                ))
            except ValueError as e:
                if isinstance(e, TraceParseError):
                    raise
                raise TraceParseError(arr_path, lineno, str(e)) from None

    meta_path = base / "meta.json"
    if meta_path.exists():
        meta = TraceMeta(**json.loads(meta_path.read_text()))
    else:
        meta = TraceMeta(
            max_storage_io=max((r.storage_io for r in records), default=0.0) or 1.0,
            max_net_io=max((r.net_io for r in records), default=0.0) or 1.0,
        )
    return WorkloadTrace(meta, records, arrivals)


def write_trace(trace: WorkloadTrace, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "trace.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in trace.records:
            w.writerow([r.time, r.vm_id, repr(float(r.cpu)), repr(float(r.mem)),
                        repr(float(r.storage_io)), repr(float(r.net_io))])
    with open(directory / "arrivals.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ARRIVALS_HEADER)
        for req in trace.arrivals:
            vm = req.vms[0]
            w.writerow([req.arrival_time, req.id, len(req.vms), repr(float(vm.cpu_demand)),
                        repr(float(vm.mem_demand)), req.duration, repr(float(req.origin[0])),
                        repr(float(req.origin[1])), int(bool(req.hard))])
    (directory / "meta.json").write_text(json.dumps({
        "step_seconds": trace.meta.step_seconds,
        "max_storage_io": trace.meta.max_storage_io,
        "max_net_io": trace.meta.max_net_io,
    }) + "\n")
    return directory


@dataclass
class SynthConfig:
    num_vms: int = 12
    horizon: int = 100
    base: float = 0.5
    amplitude: float = 0.2
    period: int = 24
    noise_sigma: float = 0.0
    arrival_rate: float = 0.0
    seed: int = 0
    mem: float = 1024.0
    storage_io: float = 0.0
    net_io: float = 0.0
    step_seconds: float = 300.0
    request_cpu: float = 0.25
    request_mem: float = 1024.0
    request_duration: int = 10

    def __post_init__(self):
        if self.num_vms < 0 or self.horizon < 0:
            raise ValueError("num_vms and horizon must be nonnegative")
        if self.period <= 0:
            raise ValueError("period must be positive")
        if self.noise_sigma < 0 or self.arrival_rate < 0:
            raise ValueError("noise_sigma and arrival_rate must be nonnegative")


def synthetic_vm_ids(n: int) -> list[str]:
    return [f"vm{i:03d}" for i in range(n)]


def generate_synthetic(cfg: SynthConfig) -> WorkloadTrace:
    """Sinusoidal per-VM cpu with seeded phases and Gaussian noise, plus Poisson
    arrivals of single-VM requests. Exactly periodic in ``period`` when noise is 0.
    """
    rng = np.random.default_rng(cfg.seed)
    ids = synthetic_vm_ids(cfg.num_vms)
    phases = rng.uniform(0.0, cfg.period, size=cfg.num_vms)
    noise = rng.normal(0.0, 1.0, size=(cfg.horizon, cfg.num_vms)) * cfg.noise_sigma
    records = []
    for t in range(cfg.horizon):
        for k, vm_id in enumerate(ids):
            angle = 2.0 * math.pi * ((t % cfg.period) + phases[k]) / cfg.period
            cpu = cfg.base + cfg.amplitude * math.sin(angle) + float(noise[t, k])
            records.append(TraceRecord(t, vm_id, min(1.0, max(0.0, cpu)), cfg.mem,
                                       cfg.storage_io, cfg.net_io))
    arrivals = []
    if cfg.arrival_rate > 0:
        counts = rng.poisson(cfg.arrival_rate, size=cfg.horizon)
        n = 0
        for t, c in enumerate(counts):
            for _ in range(int(c)):
                origin = (float(rng.uniform(0, 10)), float(rng.uniform(0, 10)))
                arrivals.append(request_from_row(f"req{n:05d}", t, 1, cfg.request_cpu, cfg.request_mem,
                                                 cfg.request_duration, origin, False))
                n += 1
    meta = TraceMeta(cfg.step_seconds, cfg.storage_io or 1.0, cfg.net_io or 1.0)
    return WorkloadTrace(meta, records, arrivals)


def summarize(metrics: list[StepMetrics], events: list[SimEvent], episode_return: float | None = None) -> dict:
    n = len(metrics)
    kinds = [e.kind for e in events]
    summary = {
        "total_energy_joules": float(sum(m.energy_joules for m in metrics)),
        "mean_utilization": sum(m.cpu_utilization for m in metrics) / n if n else 0.0,
        "total_downtime_steps": int(sum(m.downtime_steps for m in metrics)),
        "migrations_completed": kinds.count(MIGRATION_COMPLETED),
        "requests_admitted": kinds.count(REQUEST_ADMITTED),
        "requests_deferred": kinds.count(REQUEST_DEFERRED),
        "mean_soft_penalty": sum(m.soft_penalty_total for m in metrics) / n if n else 0.0,
    }
    if episode_return is not None:
        summary["episode_return"] = float(episode_return)
    return summary


def write_metrics(metrics: list[StepMetrics], path) -> None:
    with open(path, "w") as f:
        for m in metrics:
            f.write(json.dumps(m.to_record()) + "\n")


def read_metrics(path) -> list[StepMetrics]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                if tuple(rec) != REPORT_KEYS:
                    raise ValueError(f"unexpected metric keys {list(rec)}")
                out.append(StepMetrics.from_record(rec))
    return out


def write_report(metrics: list[StepMetrics], events: list[SimEvent], directory,
                 episode_return: float | None = None, figures: bool = True) -> dict:
    """Write metrics.ndjson, events.ndjson, summary.json and (optionally) figures.

    Returns the summary dict.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, directory / "metrics.ndjson")
    with open(directory / "events.ndjson", "w") as f:
        for e in events:
            f.write(json.dumps(e.to_dict()) + "\n")
    summary = summarize(metrics, events, episode_return)
    (directory / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if figures and metrics:
        from .plots import plot_metrics
        plot_metrics(metrics, directory / "metrics.png")
    return summary
