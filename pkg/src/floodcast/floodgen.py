"""Synthetic channel-network flood simulator and dataset builder.

A drainage network is a DAG of sensors with physical attributes (bank
height, cross-section, impermeable surface share). Rainfall events drive a
per-sensor linear reservoir: effective rain raises the water level, the
channel discharges proportionally to its level and cross-section, and any
water above the bank top spills a configured fraction to downstream
neighbors, producing cascades.

Traces are windowed into (9, 96) samples whose rows follow the fixed
variable order: own future-6h rainfall, own level, mean predecessor
future-6h rainfall, mean predecessor level, mean successor future-6h
rainfall, mean successor level, impermeable percentage, summed predecessor
cross-sections, summed successor cross-sections. A window is labeled 1 iff
the level 6 hours past its end is strictly above the bank top.

Water levels are stored relative to the bank top (negative = below bank),
matching the sensor CSV schema; rainfall is inches per 30-minute step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .errors import ConfigurationError, DivergenceError, ParseError, WindowError

TIME_STEP_MINUTES = 30
STEPS_PER_DAY = 48
WINDOW_STEPS = 96        # two days of 30-minute intervals
HORIZON_STEPS = 12       # six hours
N_FEATURES = 9

MIN_EVENT_STEPS = 3 * STEPS_PER_DAY
MAX_EVENT_STEPS = 5 * STEPS_PER_DAY

CSV_HEADER = ["timestamp", "level_to_bank_ft", "rainfall_in"]
NODES_HEADER = ["sensor_id", "bank_height_ft", "cross_section_ft2", "impermeable_pct"]
EDGES_HEADER = ["from_id", "to_id"]
_TIME_FORMATS = ("%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M")


# =====================================================================
# Network
# =====================================================================

@dataclass(frozen=True)
class SensorNode:
    id: str
    bank_height: float          # feet above channel bottom
    cross_section_area: float   # square feet
    impermeable_pct: float      # 0..100
    coordinates: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.bank_height <= 0 or self.cross_section_area <= 0:
            raise ConfigurationError(
                f"sensor {self.id}: bank height and cross-section must be positive")
        if not (0.0 <= self.impermeable_pct <= 100.0):
            raise ConfigurationError(
                f"sensor {self.id}: impermeable_pct outside [0, 100]")


class SensorGraph:
    """Directed acyclic drainage network (edges point downstream)."""

    def __init__(self, nodes, edges):
        self.nodes: tuple[SensorNode, ...] = tuple(nodes)
        self.edges: tuple[tuple[str, str], ...] = tuple((str(a), str(b)) for a, b in edges)
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate sensor ids")
        self._index = {sid: i for i, sid in enumerate(ids)}
        self._preds: dict[str, list[str]] = {sid: [] for sid in ids}
        self._succs: dict[str, list[str]] = {sid: [] for sid in ids}
        for a, b in self.edges:
            if a == b:
                raise ConfigurationError(f"self-loop at sensor {a}")
            if a not in self._index or b not in self._index:
                raise ConfigurationError(f"edge ({a}, {b}) references unknown sensor")
            self._succs[a].append(b)
            self._preds[b].append(a)
        self._check_acyclic()

    def _check_acyclic(self):
        indegree = {sid: len(self._preds[sid]) for sid in self.sensor_ids}
        frontier = [sid for sid, d in indegree.items() if d == 0]
        seen = 0
        while frontier:
            sid = frontier.pop()
            seen += 1
            for nxt in self._succs[sid]:
                indegree[nxt] -= 1
                if indegree[nxt] == 0:
                    frontier.append(nxt)
        if seen != len(self.nodes):
            raise ConfigurationError("sensor network contains a cycle")

    @property
    def sensor_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, sensor_id: str) -> SensorNode:
        return self.nodes[self._index[sensor_id]]

    def index(self, sensor_id: str) -> int:
        return self._index[sensor_id]

    def predecessors(self, sensor_id: str) -> list[str]:
        return list(self._preds[sensor_id])

    def successors(self, sensor_id: str) -> list[str]:
        return list(self._succs[sensor_id])

    def __len__(self):
        return len(self.nodes)


def generate_graph(n_sensors: int, rng: Rng, max_degree: int = 3,
                   bank_range=(10.0, 30.0), cross_range=(500.0, 6500.0),
                   impermeable_range=(10.0, 90.0)) -> SensorGraph:
    """Random layered DAG with in/out degree <= 3.

    Sensors are ordered by elevation (node 0 highest); every sensor after
    the first drains from one to three higher sensors, so edges always
    point downstream and every node is reachable from a source.
    """
    if n_sensors < 2:
        raise ConfigurationError(f"graph needs at least 2 sensors, got {n_sensors}")
    coords = rng.uniform((n_sensors, 2), 0.0, 100.0)
    banks = rng.uniform((n_sensors,), *bank_range)
    crosses = rng.uniform((n_sensors,), *cross_range)
    imperms = rng.uniform((n_sensors,), *impermeable_range)
    nodes = [SensorNode(id=f"S{i:03d}", bank_height=float(banks[i]),
                        cross_section_area=float(crosses[i]),
                        impermeable_pct=float(imperms[i]),
                        coordinates=(float(coords[i, 0]), float(coords[i, 1])))
             for i in range(n_sensors)]

    edges: list[tuple[str, str]] = []
    out_degree = [0] * n_sensors
    for i in range(1, n_sensors):
        eligible = [j for j in range(i) if out_degree[j] < max_degree]
        k = int(rng.integers(1, min(max_degree, len(eligible)) + 1))
        picks = [eligible[p] for p in rng.permutation(len(eligible))[:k]]
        for j in sorted(picks):
            edges.append((nodes[j].id, nodes[i].id))
            out_degree[j] += 1
    return SensorGraph(nodes, edges)


# =====================================================================
# Storms and routing
# =====================================================================

@dataclass(frozen=True)
class StormConfig:
    center: tuple[float, float]
    sigma: float            # spatial spread, coordinate units
    peak_intensity: float   # inches per 30-minute step at the center
    start_step: int
    duration_steps: int


@dataclass(frozen=True)
class SimulationConfig:
    catchment_gain: float = 9.0       # feet of channel rise per inch of effective rain
    discharge_coeff: float = 0.11     # per-step drain fraction at the reference section
    reference_cross_section: float = 3000.0
    spill_fraction: float = 0.35      # share of overflow sent downstream
    initial_fill: float = 0.25        # starting depth as a fraction of bank height
    rain_noise_sigma: float = 0.25    # lognormal sigma on rainfall draws


@dataclass
class EventTrace:
    """Aligned per-sensor series over uniform 30-minute steps."""

    sensor_ids: tuple[str, ...]
    rainfall: np.ndarray      # (S, T) inches per step, >= 0
    water_level: np.ndarray   # (S, T) feet relative to bank top (negative = below)
    start_time: datetime

    def __post_init__(self):
        self.rainfall = np.asarray(self.rainfall, dtype=np.float64)
        self.water_level = np.asarray(self.water_level, dtype=np.float64)
        s = len(self.sensor_ids)
        if self.rainfall.shape != self.water_level.shape or self.rainfall.shape[0] != s:
            raise ConfigurationError(
                f"trace arrays disagree: rain {self.rainfall.shape}, "
                f"level {self.water_level.shape}, {s} sensors")
        if np.any(self.rainfall < 0):
            raise ConfigurationError("rainfall must be non-negative")

    @property
    def n_steps(self) -> int:
        return self.rainfall.shape[1]

    def timestamps(self) -> list[datetime]:
        return [self.start_time + timedelta(minutes=TIME_STEP_MINUTES * t)
                for t in range(self.n_steps)]


def rainfall_field(graph: SensorGraph, storms, duration_steps: int, rng: Rng,
                   noise_sigma: float) -> np.ndarray:
    """(S, T) rainfall from spatial-Gaussian, Hann-pulse storms with
    multiplicative lognormal noise (mean one)."""
    coords = np.array([n.coordinates for n in graph.nodes])
    total = np.zeros((len(graph), duration_steps))
    for storm in storms:
        d2 = ((coords - np.asarray(storm.center)) ** 2).sum(axis=1)
        spatial = storm.peak_intensity * np.exp(-d2 / (2.0 * storm.sigma ** 2))
        t = np.arange(duration_steps)
        u = (t - storm.start_step) / max(storm.duration_steps, 1)
        pulse = np.where((u >= 0) & (u <= 1), np.sin(np.pi * np.clip(u, 0, 1)) ** 2, 0.0)
        total += spatial[:, None] * pulse[None, :]
    if noise_sigma > 0:
        z = rng.normal(total.shape)
        total = total * np.exp(noise_sigma * z - 0.5 * noise_sigma ** 2)
    return total


def simulate_event(graph: SensorGraph, storms, duration_steps: int, rng: Rng,
                   sim: SimulationConfig = SimulationConfig(),
                   start_time: datetime = datetime(2016, 4, 16)) -> EventTrace:
    """Integrate the routing model over one event.

    Per step, from the previous state: each sensor gains its rainfall
    runoff plus its share of upstream spill, loses discharge proportional
    to its level, and sheds ``spill_fraction`` of any water above its bank
    to successors (so downstream response lags upstream overflow by at
    least one step).
    """
    if not (MIN_EVENT_STEPS <= duration_steps <= MAX_EVENT_STEPS):
        raise ConfigurationError(
            f"event duration must be 3-5 days "
            f"({MIN_EVENT_STEPS}-{MAX_EVENT_STEPS} steps), got {duration_steps}")
    n = len(graph)
    rain = rainfall_field(graph, storms, duration_steps, rng, sim.rain_noise_sigma)

    banks = np.array([node.bank_height for node in graph.nodes])
    imperm = np.array([node.impermeable_pct for node in graph.nodes]) / 100.0
    cross = np.array([node.cross_section_area for node in graph.nodes])
    drain = np.minimum(sim.discharge_coeff * cross / sim.reference_cross_section, 0.95)

    # share[u, v]: fraction of u's spill received by v
    share = np.zeros((n, n))
    for u in graph.sensor_ids:
        succs = graph.successors(u)
        for v in succs:
            share[graph.index(u), graph.index(v)] = 1.0 / len(succs)

    runoff = rain * imperm[:, None] * sim.catchment_gain
    depth = sim.initial_fill * banks
    levels = np.empty((n, duration_steps))
    for t in range(duration_steps):
        overflow = np.maximum(depth - banks, 0.0)
        spill_out = sim.spill_fraction * overflow
        inflow = runoff[:, t] + share.T @ spill_out
        depth = depth + inflow - drain * np.maximum(depth, 0.0) - spill_out
        if not np.isfinite(depth).all():
            raise DivergenceError(f"simulation diverged at step {t}", step=t)
        levels[:, t] = depth - banks
    return EventTrace(tuple(graph.sensor_ids), rain, levels, start_time)


# =====================================================================
# Features and windows
# =====================================================================

def _future_rain_sums(rain: np.ndarray) -> np.ndarray:
    """fut[s, t] = sum of rain over (t, t + 12]; NaN where the horizon
    runs past the end of the trace."""
    s, t_len = rain.shape
    fut = np.full((s, t_len), np.nan)
    if t_len > HORIZON_STEPS:
        csum = np.concatenate([np.zeros((s, 1)), np.cumsum(rain, axis=1)], axis=1)
        fut[:, :t_len - HORIZON_STEPS] = (
            csum[:, HORIZON_STEPS + 1:] - csum[:, 1:t_len - HORIZON_STEPS + 1])
    return fut


def _feature_matrix(graph: SensorGraph, trace: EventTrace, sensor_id: str,
                    fut: np.ndarray | None = None) -> np.ndarray:
    """All nine variable rows over the full trace length."""
    if fut is None:
        fut = _future_rain_sums(trace.rainfall)
    pos = {sid: i for i, sid in enumerate(trace.sensor_ids)}
    s = pos[sensor_id]
    node = graph.node(sensor_id)
    preds = [pos[p] for p in graph.predecessors(sensor_id)]
    succs = [pos[p] for p in graph.successors(sensor_id)]
    t_len = trace.n_steps
    level = trace.water_level

    rows = np.zeros((N_FEATURES, t_len))
    rows[0] = fut[s]
    rows[1] = level[s]
    if preds:
        rows[2] = fut[preds].mean(axis=0)
        rows[3] = level[preds].mean(axis=0)
        rows[7] = sum(graph.node(p).cross_section_area
                      for p in graph.predecessors(sensor_id))
    if succs:
        rows[4] = fut[succs].mean(axis=0)
        rows[5] = level[succs].mean(axis=0)
        rows[8] = sum(graph.node(p).cross_section_area
                      for p in graph.successors(sensor_id))
    rows[6] = node.impermeable_pct
    return rows


def derive_features(graph: SensorGraph, trace: EventTrace, sensor_id: str,
                    t_end: int) -> np.ndarray:
    """The (9, 96) window ending at step ``t_end`` (inclusive).

    Requires the trace to cover ``[t_end - 95, t_end + 12]`` so the
    future-rainfall rows are defined for every in-window step.
    """
    if t_end - (WINDOW_STEPS - 1) < 0 or t_end + HORIZON_STEPS > trace.n_steps - 1:
        raise WindowError(
            f"window ending at {t_end} needs steps "
            f"[{t_end - WINDOW_STEPS + 1}, {t_end + HORIZON_STEPS}], "
            f"trace has [0, {trace.n_steps - 1}]")
    rows = _feature_matrix(graph, trace, sensor_id)
    return rows[:, t_end - WINDOW_STEPS + 1:t_end + 1].copy()


@dataclass
class Sample:
    features: np.ndarray  # (9, 96)
    label: int
    sensor_id: str
    window_end_time: datetime


@dataclass
class DatasetSummary:
    n_samples: int
    n_positive: int
    n_negative: int

    @property
    def ratio(self) -> str:
        if self.n_positive == 0:
            return f"0:{self.n_negative}"
        return f"1:{self.n_negative / self.n_positive:.2f}"

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_samples, N_FEATURES, WINDOW_STEPS)

    def describe(self) -> str:
        return (f"{self.n_samples} samples {self.shape}, "
                f"{self.n_positive} positive / {self.n_negative} negative "
                f"(ratio {self.ratio})")


@dataclass
class Dataset:
    samples: list[Sample]
    summary: DatasetSummary

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.samples:
            return (np.zeros((0, N_FEATURES, WINDOW_STEPS)), np.zeros(0, dtype=np.int64))
        x = np.stack([s.features for s in self.samples])
        y = np.array([s.label for s in self.samples], dtype=np.int64)
        return x, y


def build_dataset(graph: SensorGraph, traces, label_horizon: int = HORIZON_STEPS,
                  stride: int = 1, zero_future_rain: bool = False) -> Dataset:
    """Slide (9, 96) windows over every sensor of every trace.

    A window ending at ``t_end`` is labeled 1 iff the sensor's water level
    at ``t_end + label_horizon`` is strictly above the bank top. Traces too
    short for one window contribute nothing. ``zero_future_rain`` blanks
    the three forecast rows for leakage-free experiments.
    """
    if stride < 1 or label_horizon < 1:
        raise ConfigurationError("stride and label_horizon must be positive")
    samples: list[Sample] = []
    reach = max(label_horizon, HORIZON_STEPS)
    for trace in traces:
        t_len = trace.n_steps
        last_end = t_len - 1 - reach
        if last_end < WINDOW_STEPS - 1:
            continue
        fut = _future_rain_sums(trace.rainfall)
        for sensor_id in trace.sensor_ids:
            rows = _feature_matrix(graph, trace, sensor_id, fut)
            s = trace.sensor_ids.index(sensor_id)
            for t_end in range(WINDOW_STEPS - 1, last_end + 1, stride):
                window = rows[:, t_end - WINDOW_STEPS + 1:t_end + 1].copy()
                if zero_future_rain:
                    window[[0, 2, 4]] = 0.0
                label = int(trace.water_level[s, t_end + label_horizon] > 0.0)
                samples.append(Sample(
                    features=window, label=label, sensor_id=sensor_id,
                    window_end_time=trace.start_time
                    + timedelta(minutes=TIME_STEP_MINUTES * t_end)))
    positive = sum(s.label for s in samples)
    summary = DatasetSummary(len(samples), positive, len(samples) - positive)
    return Dataset(samples, summary)


# =====================================================================
# CSV interchange
# =====================================================================

def _format_float(x: float) -> str:
    return repr(float(x))


def write_graph_csv(graph: SensorGraph, nodes_path, edges_path,
                    comment: str | None = None) -> None:
    with open(nodes_path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(",".join(NODES_HEADER + ["x", "y"]) + "\n")
        for n in graph.nodes:
            fh.write(",".join([n.id, _format_float(n.bank_height),
                               _format_float(n.cross_section_area),
                               _format_float(n.impermeable_pct),
                               _format_float(n.coordinates[0]),
                               _format_float(n.coordinates[1])]) + "\n")
    with open(edges_path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(",".join(EDGES_HEADER) + "\n")
        for a, b in graph.edges:
            fh.write(f"{a},{b}\n")


def _read_csv_rows(path) -> list[tuple[int, list[str]]]:
    """(1-based line number, fields) for non-comment, non-blank lines."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            rows.append((lineno, line.split(",")))
    return rows


def read_graph_csv(nodes_path, edges_path) -> SensorGraph:
    rows = _read_csv_rows(nodes_path)
    if not rows:
        raise ParseError("empty sensor file", path=str(nodes_path))
    lineno, header = rows[0]
    if header[:4] != NODES_HEADER or len(header) not in (4, 6):
        raise ParseError(f"malformed header {header!r}", path=str(nodes_path), line=lineno)
    has_coords = len(header) == 6
    nodes = []
    for lineno, fields in rows[1:]:
        if len(fields) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(fields)}",
                             path=str(nodes_path), line=lineno)
        try:
            coords = (float(fields[4]), float(fields[5])) if has_coords else (0.0, 0.0)
            nodes.append(SensorNode(fields[0], float(fields[1]), float(fields[2]),
                                    float(fields[3]), coords))
        except (ValueError, ConfigurationError) as exc:
            raise ParseError(str(exc), path=str(nodes_path), line=lineno) from exc

    rows = _read_csv_rows(edges_path)
    if not rows or rows[0][1] != EDGES_HEADER:
        raise ParseError("malformed edge header", path=str(edges_path),
                         line=rows[0][0] if rows else None)
    edges = []
    for lineno, fields in rows[1:]:
        if len(fields) != 2:
            raise ParseError(f"expected 2 fields, got {len(fields)}",
                             path=str(edges_path), line=lineno)
        edges.append((fields[0], fields[1]))
    try:
        return SensorGraph(nodes, edges)
    except ConfigurationError as exc:
        raise ParseError(str(exc), path=str(edges_path)) from exc


def write_event_csv(trace: EventTrace, dir_path, comment: str | None = None) -> None:
    """One file per sensor: timestamp,level_to_bank_ft,rainfall_in."""
    directory = Path(dir_path)
    directory.mkdir(parents=True, exist_ok=True)
    stamps = [t.strftime(_TIME_FORMATS[0]) for t in trace.timestamps()]
    for i, sensor_id in enumerate(trace.sensor_ids):
        with open(directory / f"{sensor_id}.csv", "w", encoding="utf-8") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            fh.write(",".join(CSV_HEADER) + "\n")
            for t, stamp in enumerate(stamps):
                fh.write(f"{stamp},{_format_float(trace.water_level[i, t])},"
                         f"{_format_float(trace.rainfall[i, t])}\n")


def _parse_timestamp(text: str, path: str, lineno: int) -> datetime:
    for fmt in _TIME_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ParseError(f"unparseable timestamp {text!r}", path=path, line=lineno)


def _parse_value(text: str, name: str, path: str, lineno: int) -> float:
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"bad {name} value {text!r}", path=path, line=lineno) from None


def parse_sensor_csv(path) -> tuple[datetime, np.ndarray, np.ndarray]:
    """One sensor file -> (start time, levels, rainfall) on a uniform
    30-minute grid, with missing rows/cells as NaN.

    Timestamps must be strictly increasing and offset by multiples of 30
    minutes; negative rainfall is rejected as a unit error.
    """
    path = str(path)
    rows = _read_csv_rows(path)
    if not rows:
        raise ParseError("empty sensor file", path=path)
    lineno, header = rows[0]
    if header != CSV_HEADER:
        raise ParseError(f"malformed header {header!r}, expected {CSV_HEADER}",
                         path=path, line=lineno)
    if len(rows) < 2:
        raise ParseError("no data rows", path=path)

    times: list[datetime] = []
    levels: list[float] = []
    rains: list[float] = []
    for lineno, fields in rows[1:]:
        if len(fields) != 3:
            raise ParseError(f"expected 3 fields, got {len(fields)}", path=path, line=lineno)
        stamp = _parse_timestamp(fields[0], path, lineno)
        if times:
            delta = (stamp - times[-1]).total_seconds() / 60.0
            if delta <= 0:
                raise ParseError(f"non-monotone timestamp {fields[0]!r}",
                                 path=path, line=lineno)
            if delta % TIME_STEP_MINUTES != 0:
                raise ParseError(
                    f"timestamp {fields[0]!r} not on the 30-minute grid",
                    path=path, line=lineno)
        level = _parse_value(fields[1], "level", path, lineno)
        rain = _parse_value(fields[2], "rainfall", path, lineno)
        if not math.isnan(rain) and rain < 0:
            raise ParseError(f"negative rainfall {rain} (unit mismatch?)",
                             path=path, line=lineno)
        times.append(stamp)
        levels.append(level)
        rains.append(rain)

    start = times[0]
    n_steps = int((times[-1] - start).total_seconds() / 60.0 / TIME_STEP_MINUTES) + 1
    level_arr = np.full(n_steps, np.nan)
    rain_arr = np.full(n_steps, np.nan)
    for stamp, level, rain in zip(times, levels, rains):
        idx = int((stamp - start).total_seconds() / 60.0 / TIME_STEP_MINUTES)
        level_arr[idx] = level
        rain_arr[idx] = rain
    return start, level_arr, rain_arr


def _forward_fill(values: np.ndarray, max_gap: int = 2) -> np.ndarray:
    """Fill NaN runs of length <= max_gap with the preceding value."""
    out = values.copy()
    i = 0
    n = len(out)
    while i < n:
        if math.isnan(out[i]):
            j = i
            while j < n and math.isnan(out[j]):
                j += 1
            if i > 0 and (j - i) <= max_gap:
                out[i:j] = out[i - 1]
            i = j
        else:
            i += 1
    return out


def read_event_dir(graph: SensorGraph, dir_path, max_gap: int = 2) -> list[EventTrace]:
    """Assemble aligned event traces from one directory of sensor files.

    Every graph sensor must have a ``<id>.csv`` file. Series are placed on
    a shared 30-minute timeline; NaN gaps of up to ``max_gap`` steps are
    forward-filled per sensor, and any remaining hole splits the event into
    separate traces at that step.
    """
    directory = Path(dir_path)
    parsed = {}
    for sensor_id in graph.sensor_ids:
        path = directory / f"{sensor_id}.csv"
        if not path.exists():
            raise ParseError(f"missing sensor file for {sensor_id}", path=str(path))
        parsed[sensor_id] = parse_sensor_csv(path)

    global_start = min(start for start, _, _ in parsed.values())
    global_end = max(start + timedelta(minutes=TIME_STEP_MINUTES * (len(lv) - 1))
                     for start, lv, _ in parsed.values())
    n_steps = int((global_end - global_start).total_seconds() / 60.0
                  / TIME_STEP_MINUTES) + 1

    n = len(graph.sensor_ids)
    levels = np.full((n, n_steps), np.nan)
    rains = np.full((n, n_steps), np.nan)
    for i, sensor_id in enumerate(graph.sensor_ids):
        start, lv, rn = parsed[sensor_id]
        offset_min = (start - global_start).total_seconds() / 60.0
        if offset_min % TIME_STEP_MINUTES != 0:
            raise ParseError(f"sensor {sensor_id} misaligned with the event grid",
                             path=str(directory / f"{sensor_id}.csv"))
        offset = int(offset_min / TIME_STEP_MINUTES)
        levels[i, offset:offset + len(lv)] = _forward_fill(lv, max_gap)
        rains[i, offset:offset + len(rn)] = _forward_fill(rn, max_gap)

    complete = np.isfinite(levels).all(axis=0) & np.isfinite(rains).all(axis=0)
    traces: list[EventTrace] = []
    t = 0
    while t < n_steps:
        if complete[t]:
            t0 = t
            while t < n_steps and complete[t]:
                t += 1
            traces.append(EventTrace(
                tuple(graph.sensor_ids), rains[:, t0:t].copy(), levels[:, t0:t].copy(),
                global_start + timedelta(minutes=TIME_STEP_MINUTES * t0)))
        else:
            t += 1
    return traces


def ingest_csv(nodes_path, edges_path, event_dirs) -> tuple[SensorGraph, list[EventTrace]]:
    """Read a graph plus one or more event directories of sensor files."""
    graph = read_graph_csv(nodes_path, edges_path)
    traces: list[EventTrace] = []
    for event_dir in event_dirs:
        traces.extend(read_event_dir(graph, event_dir))
    return graph, traces


# =====================================================================
# Dataset tensor files
# =====================================================================

def save_dataset(path, x: np.ndarray, y: np.ndarray,
                 sensor_ids=None, end_times=None) -> None:
    """Pack a windowed dataset into a self-describing .npz tensor file."""
    payload = {"features": np.asarray(x, dtype=np.float64),
               "labels": np.asarray(y, dtype=np.int64)}
    if sensor_ids is not None:
        payload["sensor_ids"] = np.asarray(sensor_ids, dtype="U")
    if end_times is not None:
        payload["end_times"] = np.asarray(end_times, dtype="U")
    np.savez(path, **payload)


def load_dataset(path) -> tuple[np.ndarray, np.ndarray, dict]:
    with np.load(path, allow_pickle=False) as data:
        x = data["features"]
        y = data["labels"]
        meta = {key: data[key] for key in data.files if key not in ("features", "labels")}
    return x, y, meta


# =====================================================================
# Default synthetic pipeline
# =====================================================================

@dataclass(frozen=True)
class EventProfile:
    """Randomized storm recipe for one event class."""

    duration_steps: int
    n_storms: int
    peak_range: tuple[float, float]
    sigma_range: tuple[float, float]
    storm_steps_range: tuple[int, int]


# Calibrated against the default pipeline at seed 0: training pool lands
# near 1:3.5 positive:negative, the rarer-storm test pool near 1:15.8.
TRAIN_PROFILE = EventProfile(duration_steps=168, n_storms=4,
                             peak_range=(0.56, 1.0), sigma_range=(28.0, 48.0),
                             storm_steps_range=(40, 80))
TEST_PROFILE = EventProfile(duration_steps=216, n_storms=2,
                            peak_range=(0.65, 0.95), sigma_range=(30.0, 48.0),
                            storm_steps_range=(28, 56))


def sample_storms(profile: EventProfile, graph: SensorGraph, rng: Rng,
                  center_jitter: float = 20.0) -> list[StormConfig]:
    """Draw storm pulses for one event.

    Centers land near randomly chosen sensors (with jitter) so the storms
    always interact with the network instead of wandering off the domain.
    """
    coords = np.array([n.coordinates for n in graph.nodes])
    storms = []
    for _ in range(profile.n_storms):
        steps = int(rng.integers(*profile.storm_steps_range))
        start_max = max(profile.duration_steps - steps, 1)
        anchor = coords[int(rng.integers(0, len(coords)))]
        offset = rng.normal((2,), scale=center_jitter)
        storms.append(StormConfig(
            center=(float(anchor[0] + offset[0]), float(anchor[1] + offset[1])),
            sigma=float(rng.uniform((), *profile.sigma_range)),
            peak_intensity=float(rng.uniform((), *profile.peak_range)),
            start_step=int(rng.integers(0, start_max)),
            duration_steps=steps,
        ))
    return storms


@dataclass(frozen=True)
class PipelineConfig:
    n_sensors: int = 40
    train_events: int = 3
    test_events: int = 1
    train_profile: EventProfile = TRAIN_PROFILE
    test_profile: EventProfile = TEST_PROFILE
    sim: SimulationConfig = field(default_factory=SimulationConfig)
    train_stride: int = 8
    test_stride: int = 3
    val_fraction: float = 0.2
    zero_future_rain: bool = False


@dataclass
class PipelineResult:
    graph: SensorGraph
    train_traces: list[EventTrace]
    test_traces: list[EventTrace]
    train_dataset: Dataset
    test_dataset: Dataset
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def run_pipeline(config: PipelineConfig, seed: int) -> PipelineResult:
    """Generate a network, simulate train and test events, window them,
    and split the training pool into train/validation."""
    rng = Rng(seed)
    graph = generate_graph(config.n_sensors, rng.split("graph"))

    train_traces = []
    for e in range(config.train_events):
        storms = sample_storms(config.train_profile, graph, rng.split("train_storms", e))
        train_traces.append(simulate_event(
            graph, storms, config.train_profile.duration_steps,
            rng.split("train_sim", e), config.sim,
            start_time=datetime(2016, 4, 16) + timedelta(days=30 * e)))
    test_traces = []
    for e in range(config.test_events):
        storms = sample_storms(config.test_profile, graph, rng.split("test_storms", e))
        test_traces.append(simulate_event(
            graph, storms, config.test_profile.duration_steps,
            rng.split("test_sim", e), config.sim,
            start_time=datetime(2019, 9, 17) + timedelta(days=30 * e)))

    train_dataset = build_dataset(graph, train_traces, stride=config.train_stride,
                                  zero_future_rain=config.zero_future_rain)
    test_dataset = build_dataset(graph, test_traces, stride=config.test_stride,
                                 zero_future_rain=config.zero_future_rain)

    x_pool, y_pool = train_dataset.to_arrays()
    order = rng.split("val_split").permutation(len(x_pool))
    n_val = int(round(config.val_fraction * len(x_pool)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_test, y_test = test_dataset.to_arrays()
    return PipelineResult(
        graph=graph, train_traces=train_traces, test_traces=test_traces,
        train_dataset=train_dataset, test_dataset=test_dataset,
        x_train=x_pool[train_idx], y_train=y_pool[train_idx],
        x_val=x_pool[val_idx], y_val=y_pool[val_idx],
        x_test=x_test, y_test=y_test)
