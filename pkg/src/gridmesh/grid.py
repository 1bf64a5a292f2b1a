"""Balanced radial feeder model, power-flow oracle, and scenario runner.

The network is a single-phase (positive-sequence) equivalent of a radial
feeder: a tree of series impedances rooted at the slack node, with
constant-power loads at the nodes. The solver is a plain backward current
sweep / forward voltage drop iteration, which doubles as the ground-truth
generator for the whole pipeline: scenarios perturb the loads over time
(a DER insertion is a negative-demand step) and every 20 ms tick gets a
solved snapshot.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field, replace

import numpy as np

from .kv import KvDocument, KvFormatError, load_kv, parse_kv, save_kv
from .wire import TIME_BASE, GpsTimestamp, Phasor


class GridModelError(Exception):
    """Model fails validation; message names the offending element."""


class NonRadialError(GridModelError):
    """Branch set is not a tree rooted at the slack node."""


class PowerFlowError(Exception):
    """Sweep failed to converge (infeasible loading)."""


@dataclass(frozen=True)
class Branch:
    from_node: int
    to_node: int
    z: complex  # series impedance, per-unit

    def __post_init__(self):
        if self.z.real < 0:
            raise GridModelError(
                f"branch {self.from_node}-{self.to_node}: negative resistance"
            )


@dataclass
class GridModel:
    """Radial feeder: nodes (slack first), oriented tree branches, loads."""

    name: str
    nodes: list[int]
    branches: list[Branch]
    loads: dict[int, complex]
    slack_voltage: Phasor = Phasor(1.0, 0.0)
    base_voltage_v: float = 4160.0
    base_power_va: float = 5_000_000.0
    pmu_nodes: list[int] = field(default_factory=list)

    # derived topology, filled by validate()
    parent: dict[int, int] = field(default_factory=dict, repr=False)
    children: dict[int, list[int]] = field(default_factory=dict, repr=False)
    branch_index: dict[int, int] = field(default_factory=dict, repr=False)  # child -> branch idx
    order: list[int] = field(default_factory=list, repr=False)  # topological, root first

    def __post_init__(self):
        self.validate()

    @property
    def slack(self) -> int:
        return self.nodes[0]

    def validate(self) -> None:
        if not self.nodes:
            raise GridModelError("model has no nodes")
        if len(set(self.nodes)) != len(self.nodes):
            raise GridModelError("duplicate node ids")
        known = set(self.nodes)
        for b in self.branches:
            if b.from_node not in known or b.to_node not in known:
                raise GridModelError(f"branch {b.from_node}-{b.to_node}: unknown node")
        for n in self.loads:
            if n not in known:
                raise GridModelError(f"load at unknown node {n}")
        for n in self.pmu_nodes:
            if n not in known:
                raise GridModelError(f"pmu at unknown node {n}")
        if len(self.branches) != len(self.nodes) - 1:
            raise NonRadialError(
                f"{len(self.branches)} branches for {len(self.nodes)} nodes"
            )

        # Orient the tree away from the slack node; any branch may be listed
        # in either direction. State-vector branch currents flow parent->child.
        adjacency: dict[int, list[tuple[int, int]]] = {n: [] for n in self.nodes}
        for idx, b in enumerate(self.branches):
            adjacency[b.from_node].append((b.to_node, idx))
            adjacency[b.to_node].append((b.from_node, idx))

        parent, children, branch_index = {}, {n: [] for n in self.nodes}, {}
        order = [self.slack]
        seen = {self.slack}
        queue = [self.slack]
        while queue:
            node = queue.pop(0)
            for neigh, idx in adjacency[node]:
                if neigh in seen:
                    if parent.get(node) != neigh:
                        raise NonRadialError(
                            f"cycle through branch {neigh}-{node}"
                        )
                    continue
                seen.add(neigh)
                parent[neigh] = node
                children[node].append(neigh)
                branch_index[neigh] = idx
                order.append(neigh)
                queue.append(neigh)
        if len(seen) != len(self.nodes):
            missing = sorted(set(self.nodes) - seen)
            raise NonRadialError(f"nodes unreachable from slack: {missing}")

        self.parent = parent
        self.children = children
        self.branch_index = branch_index
        self.order = order

    def branch_z(self, child: int) -> complex:
        return self.branches[self.branch_index[child]].z

    def path_from_slack(self, node: int) -> list[int]:
        """Branch indices on the slack->node path."""
        path = []
        while node != self.slack:
            path.append(self.branch_index[node])
            node = self.parent[node]
        return list(reversed(path))

    def with_loads(self, loads: dict[int, complex]) -> "GridModel":
        return replace(self, loads=dict(loads))


@dataclass(frozen=True)
class PowerFlowSolution:
    voltages: dict[int, complex]       # per node
    currents: dict[int, complex]       # per branch index, parent->child flow
    iterations: int

    def kcl_residual(self, model: GridModel) -> float:
        """Worst-case KCL mismatch over all non-slack nodes, per-unit."""
        worst = 0.0
        for node in model.nodes[1:]:
            inflow = self.currents[model.branch_index[node]]
            outflow = sum(
                (self.currents[model.branch_index[c]] for c in model.children[node]),
                start=0j,
            )
            load = model.loads.get(node, 0j)
            i_load = np.conj(load / self.voltages[node]) if load else 0j
            worst = max(worst, abs(inflow - outflow - i_load))
        return worst

    def drop_residual(self, model: GridModel) -> float:
        """Worst-case |V_parent - V_child - Z*I| over all branches."""
        worst = 0.0
        for node in model.nodes[1:]:
            p = model.parent[node]
            z = model.branch_z(node)
            i = self.currents[model.branch_index[node]]
            worst = max(worst, abs(self.voltages[p] - self.voltages[node] - z * i))
        return worst


def solve_radial_power_flow(
    model: GridModel,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> PowerFlowSolution:
    """Backward current sweep / forward voltage drop to a fixed point.

    Flat start from the slack voltage; converges when the largest voltage
    change over one full sweep drops below ``tol``.
    """
    v_slack = model.slack_voltage.to_complex()
    volts = {n: v_slack for n in model.nodes}
    currents = {i: 0j for i in range(len(model.branches))}

    for iteration in range(1, max_iter + 1):
        subtree = {n: 0j for n in model.nodes}
        for node in reversed(model.order):
            load = model.loads.get(node, 0j)
            inj = np.conj(load / volts[node]) if load else 0j
            subtree[node] += inj
            if node != model.slack:
                subtree[model.parent[node]] += subtree[node]
                currents[model.branch_index[node]] = subtree[node]

        delta = 0.0
        for node in model.order[1:]:
            parent_v = volts[model.parent[node]]
            new_v = parent_v - model.branch_z(node) * currents[model.branch_index[node]]
            delta = max(delta, abs(new_v - volts[node]))
            volts[node] = new_v
        if delta < tol:
            return PowerFlowSolution(volts, currents, iteration)

    raise PowerFlowError(
        f"no convergence after {max_iter} iterations (last delta {delta:.3e} pu)"
    )


@dataclass(frozen=True)
class ScenarioEvent:
    time_s: float
    node: int
    delta: complex   # complex power change, pu; a DER is a negative delta
    ramp_s: float = 0.0

    def applied_fraction(self, t: float) -> float:
        if t < self.time_s:
            return 0.0
        if self.ramp_s <= 0:
            return 1.0
        return min(1.0, (t - self.time_s) / self.ramp_s)


@dataclass
class ScenarioScript:
    """Timed load perturbations on a fixed sample grid."""

    name: str
    duration_s: float
    sample_period_s: float = 0.02
    events: list[ScenarioEvent] = field(default_factory=list)
    epoch_soc: int = 0
    freq_hz: float = 50.0
    rocof: float = 0.0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise KvFormatError("scenario: duration_s must be positive")
        tps = round(1.0 / self.sample_period_s)
        if tps <= 0 or abs(tps * self.sample_period_s - 1.0) > 1e-9:
            raise KvFormatError("scenario: sample_period_s must divide 1 s exactly")
        if TIME_BASE % tps != 0:
            raise KvFormatError("scenario: sample period not representable on the time base")
        self.events = sorted(self.events, key=lambda e: e.time_s)
        for ev in self.events:
            if not 0 <= ev.time_s < self.duration_s:
                raise KvFormatError(
                    f"scenario: event at {ev.time_s}s outside [0, {self.duration_s})"
                )

    @property
    def ticks_per_second(self) -> int:
        return round(1.0 / self.sample_period_s)

    @property
    def tick_count(self) -> int:
        return round(self.duration_s * self.ticks_per_second)

    def timestamp(self, tick: int) -> GpsTimestamp:
        tps = self.ticks_per_second
        soc, sub = divmod(tick, tps)
        return GpsTimestamp(self.epoch_soc + soc, sub * (TIME_BASE // tps))

    def loads_at(self, base_loads: dict[int, complex], t: float) -> dict[int, complex]:
        loads = dict(base_loads)
        for ev in self.events:
            frac = ev.applied_fraction(t)
            if frac:
                loads[ev.node] = loads.get(ev.node, 0j) + frac * ev.delta
        return loads


@dataclass
class TruthSeries:
    """Ground-truth phasor series for every node on the sample grid."""

    node_ids: list[int]
    timestamps: list[GpsTimestamp]
    voltages: dict[int, np.ndarray]   # complex per tick
    freq_hz: np.ndarray
    rocof: np.ndarray
    epoch_soc: int = 0

    def __len__(self) -> int:
        return len(self.timestamps)

    def voltage(self, node: int, tick: int) -> Phasor:
        return Phasor.from_complex(complex(self.voltages[node][tick]))

    def sample(self, node: int, tick: int) -> tuple[GpsTimestamp, Phasor, float, float]:
        return (
            self.timestamps[tick],
            self.voltage(node, tick),
            float(self.freq_hz[tick]),
            float(self.rocof[tick]),
        )

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("time_s,node,vmag_pu,vangle_rad,freq_hz,rocof\n")
            for tick, ts in enumerate(self.timestamps):
                t = ts.seconds()
                for node in self.node_ids:
                    v = self.voltages[node][tick]
                    fh.write(
                        f"{t:.6f},{node},{abs(v):.15g},{np.angle(v):.15g},"
                        f"{self.freq_hz[tick]:.15g},{self.rocof[tick]:.15g}\n"
                    )

    @classmethod
    def from_csv(cls, path) -> "TruthSeries":
        rows: dict[float, dict[int, complex]] = {}
        freqs: dict[float, tuple[float, float]] = {}
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "time_s,node,vmag_pu,vangle_rad,freq_hz,rocof":
                raise KvFormatError(f"unexpected truth CSV header: {header!r}")
            for line in fh:
                if not line.strip():
                    continue
                t_s, node_s, mag_s, ang_s, f_s, r_s = line.strip().split(",")
                t = float(t_s)
                rows.setdefault(t, {})[int(node_s)] = (
                    float(mag_s) * np.exp(1j * float(ang_s))
                )
                freqs[t] = (float(f_s), float(r_s))
        times = sorted(rows)
        if not times:
            raise KvFormatError("truth CSV has no samples")
        node_ids = sorted(rows[times[0]])
        timestamps = []
        for t in times:
            soc = int(t)
            frac = round((t - soc) * TIME_BASE)
            if frac >= TIME_BASE:  # guard float rounding at second boundaries
                soc, frac = soc + 1, 0
            timestamps.append(GpsTimestamp(soc, frac))
        voltages = {
            n: np.array([rows[t][n] for t in times], dtype=complex) for n in node_ids
        }
        freq = np.array([freqs[t][0] for t in times])
        rocof = np.array([freqs[t][1] for t in times])
        return cls(node_ids, timestamps, voltages, freq, rocof,
                   epoch_soc=timestamps[0].soc)


def run_scenario(model: GridModel, script: ScenarioScript) -> TruthSeries:
    """One power-flow solve per tick with event-adjusted loads.

    Consecutive ticks with identical load vectors reuse the previous
    solution, so piecewise-constant scenarios cost one solve per segment.
    """
    n_ticks = script.tick_count
    timestamps = [script.timestamp(k) for k in range(n_ticks)]
    voltages = {n: np.empty(n_ticks, dtype=complex) for n in model.nodes}

    prev_loads: dict[int, complex] | None = None
    solution: PowerFlowSolution | None = None
    for tick in range(n_ticks):
        t = tick * script.sample_period_s
        loads = script.loads_at(model.loads, t)
        if loads != prev_loads:
            try:
                solution = solve_radial_power_flow(model.with_loads(loads))
            except PowerFlowError as exc:
                raise PowerFlowError(f"tick {tick} (t={t:.2f}s): {exc}") from exc
            prev_loads = loads
        for node in model.nodes:
            voltages[node][tick] = solution.voltages[node]

    freq = np.full(n_ticks, script.freq_hz)
    rocof = np.full(n_ticks, script.rocof)
    return TruthSeries(list(model.nodes), timestamps, voltages, freq, rocof,
                       epoch_soc=script.epoch_soc)


# ---------------------------------------------------------------------------
# On-disk formats


def _parse_complex_pair(doc: str, key: str, re_s: str, im_s: str) -> complex:
    try:
        return complex(float(re_s), float(im_s))
    except ValueError as exc:
        raise KvFormatError(f"{doc}: key '{key}' has non-numeric parts") from exc


def grid_model_from_kv(doc: KvDocument) -> GridModel:
    if doc.doctype != "model":
        raise KvFormatError(f"expected gridmesh/model, got gridmesh/{doc.doctype}")
    name = doc.get("name", "unnamed")
    slack_parts = doc.require("slack_voltage").split()
    if len(slack_parts) != 2:
        raise KvFormatError("model: slack_voltage needs 'magnitude_pu angle_rad'")
    slack_v = Phasor(float(slack_parts[0]), float(slack_parts[1]))

    nodes: list[int] = []
    loads: dict[int, complex] = {}
    for raw in doc.get_all("node"):
        parts = raw.split()
        if len(parts) not in (1, 3):
            raise KvFormatError(f"model: node entry needs 'id [P_pu Q_pu]': {raw!r}")
        try:
            node = int(parts[0])
        except ValueError as exc:
            raise KvFormatError(f"model: node id not an integer: {parts[0]!r}") from exc
        nodes.append(node)
        if len(parts) == 3:
            load = _parse_complex_pair("model", "node", parts[1], parts[2])
            if load != 0:
                loads[node] = load

    branches: list[Branch] = []
    for raw in doc.get_all("branch"):
        parts = raw.split()
        if len(parts) != 4:
            raise KvFormatError(f"model: branch entry needs 'from to R_pu X_pu': {raw!r}")
        z = _parse_complex_pair("model", "branch", parts[2], parts[3])
        branches.append(Branch(int(parts[0]), int(parts[1]), z))

    pmu_nodes = [int(v) for v in doc.get_all("pmu")]
    return GridModel(
        name=name,
        nodes=nodes,
        branches=branches,
        loads=loads,
        slack_voltage=slack_v,
        base_voltage_v=doc.get_float("base_voltage_v", 4160.0),
        base_power_va=doc.get_float("base_power_va", 5_000_000.0),
        pmu_nodes=pmu_nodes,
    )


def grid_model_to_kv(model: GridModel) -> KvDocument:
    doc = KvDocument("model", 1)
    doc.add("name", model.name)
    doc.add("base_voltage_v", f"{model.base_voltage_v:.15g}")
    doc.add("base_power_va", f"{model.base_power_va:.15g}")
    doc.add("slack_voltage",
            f"{model.slack_voltage.magnitude:.15g} {model.slack_voltage.angle:.15g}")
    for node in model.nodes:
        load = model.loads.get(node)
        if load:
            doc.add("node", f"{node} {load.real:.15g} {load.imag:.15g}")
        else:
            doc.add("node", str(node))
    for b in model.branches:
        doc.add("branch", f"{b.from_node} {b.to_node} {b.z.real:.15g} {b.z.imag:.15g}")
    for node in model.pmu_nodes:
        doc.add("pmu", str(node))
    return doc


def load_grid_model(path) -> GridModel:
    return grid_model_from_kv(load_kv(path, "model"))


def save_grid_model(model: GridModel, path) -> None:
    save_kv(grid_model_to_kv(model), path)


def scenario_from_kv(doc: KvDocument) -> ScenarioScript:
    if doc.doctype != "scenario":
        raise KvFormatError(f"expected gridmesh/scenario, got gridmesh/{doc.doctype}")
    events = []
    for raw in doc.get_all("event"):
        parts = raw.split()
        if len(parts) not in (4, 5):
            raise KvFormatError(
                f"scenario: event needs 'time_s node dP_pu dQ_pu [ramp_s]': {raw!r}"
            )
        events.append(ScenarioEvent(
            time_s=float(parts[0]),
            node=int(parts[1]),
            delta=_parse_complex_pair("scenario", "event", parts[2], parts[3]),
            ramp_s=float(parts[4]) if len(parts) == 5 else 0.0,
        ))
    return ScenarioScript(
        name=doc.get("name", "unnamed"),
        duration_s=doc.get_float("duration_s"),
        sample_period_s=doc.get_float("sample_period_s", 0.02),
        events=events,
        epoch_soc=doc.get_int("epoch_soc", 0),
        freq_hz=doc.get_float("freq_hz", 50.0),
        rocof=doc.get_float("rocof", 0.0),
    )


def scenario_to_kv(script: ScenarioScript) -> KvDocument:
    doc = KvDocument("scenario", 1)
    doc.add("name", script.name)
    doc.add("duration_s", f"{script.duration_s:.15g}")
    doc.add("sample_period_s", f"{script.sample_period_s:.15g}")
    doc.add("epoch_soc", script.epoch_soc)
    doc.add("freq_hz", f"{script.freq_hz:.15g}")
    doc.add("rocof", f"{script.rocof:.15g}")
    for ev in script.events:
        parts = f"{ev.time_s:.15g} {ev.node} {ev.delta.real:.15g} {ev.delta.imag:.15g}"
        if ev.ramp_s:
            parts += f" {ev.ramp_s:.15g}"
        doc.add("event", parts)
    return doc


def load_scenario(path) -> ScenarioScript:
    return scenario_from_kv(load_kv(path, "scenario"))


def save_scenario(script: ScenarioScript, path) -> None:
    save_kv(scenario_to_kv(script), path)


def load_bundled(name: str):
    """Load a model or scenario shipped in gridmesh/data (by bare name)."""
    ref = importlib.resources.files("gridmesh.data").joinpath(f"{name}.kv")
    doc = parse_kv(ref.read_text(encoding="utf-8"))
    if doc.doctype == "model":
        return grid_model_from_kv(doc)
    if doc.doctype == "scenario":
        return scenario_from_kv(doc)
    raise KvFormatError(f"bundled document {name} has unexpected type {doc.doctype}")
