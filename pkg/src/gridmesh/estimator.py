"""Weighted-least-squares branch-current state estimation.

State is the vector of branch currents in rectangular coordinates
(interleaved ``[Re I0, Im I0, Re I1, Im I1, ...]``, one pair per branch in
model order); the slack voltage is a known reference carried alongside,
not estimated. With phasor measurements and power injections linearized
to equivalent current injections the measurement model is exactly linear,
so one solve against a constant, factorize-once gain matrix G = H'WH is
the whole estimation step:

* voltage rows (PMU phasor at node n): V_n = V_slack - sum over the
  slack->n path of Z_b * I_b, i.e. per rectangular pair the coefficients
  are [-R, +X] on the real row and [-X, -R] on the imaginary row;
* injection rows (pseudomeasurement at node n): the node's load current
  equals the parent-branch current minus its child-branch currents.

Measurement values move between estimates; the gain matrix only depends
on topology, measurement configuration, and variances, so it is built and
factorized once and reused (the "fast" property asserted by the
factorization counter).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .grid import GridModel
from .wire import GpsTimestamp, Phasor

PMU_SIGMA_DEFAULT = 1e-3        # pu, per rectangular component
PSEUDO_SIGMA_FRACTION = 0.3     # of |S|
PSEUDO_SIGMA_FLOOR = 0.03       # pu; keeps zero-load pseudos usable

VOLTAGE = "pmu-voltage-phasor"
INJECTION = "pseudo-power-injection"


class EstimatorError(Exception):
    pass


class ObservabilityError(EstimatorError):
    """Network (or configuration) leaves part of the state unobservable."""

    def __init__(self, message: str, unobservable_dim: int = 0):
        super().__init__(message)
        self.unobservable_dim = unobservable_dim


class ConfigMismatchError(EstimatorError):
    """Measurement set does not match the cached configuration."""


@dataclass(frozen=True)
class MeasurementSpec:
    kind: str
    node: int
    variance: tuple[float, float]  # (re, im), per-unit squared

    def __post_init__(self):
        if self.kind not in (VOLTAGE, INJECTION):
            raise EstimatorError(f"unknown measurement kind {self.kind!r}")
        if min(self.variance) <= 0:
            raise EstimatorError(f"{self.kind}@{self.node}: variances must be > 0")


@dataclass(frozen=True)
class Measurement:
    kind: str
    node: int
    value: complex
    variance: tuple[float, float]
    timestamp: GpsTimestamp | None = None

    def spec(self) -> MeasurementSpec:
        return MeasurementSpec(self.kind, self.node, self.variance)


@dataclass
class MeasurementSet:
    entries: list[Measurement]

    def __post_init__(self):
        if not any(m.kind == VOLTAGE for m in self.entries):
            raise ObservabilityError(
                "no voltage measurement anchors the voltage profile",
                unobservable_dim=2,
            )


@dataclass(frozen=True)
class StateVector:
    """Interleaved rectangular branch currents plus the slack reference."""

    values: np.ndarray
    slack_voltage: Phasor

    def __post_init__(self):
        if len(self.values) % 2 != 0:
            raise EstimatorError("state vector length must be even")

    @property
    def branch_count(self) -> int:
        return len(self.values) // 2

    def branch_current(self, index: int) -> complex:
        return complex(self.values[2 * index], self.values[2 * index + 1])


@dataclass
class GainCache:
    model: GridModel
    specs: tuple[MeasurementSpec, ...]
    H: np.ndarray                       # (2k, 2m)
    weights: np.ndarray                 # (2k,)
    offsets: np.ndarray                 # (2k,) subtracted from z
    factor: tuple = field(repr=False, default=None)
    factorizations: int = 0

    @property
    def state_dim(self) -> int:
        return self.H.shape[1]


def pseudo_injection(s: complex, v_guess: complex,
                     variance: tuple[float, float]) -> tuple[complex, tuple[float, float]]:
    """Equivalent current injection for a power pseudomeasurement.

    I = conj(S / V): linear in (P, Q) for a fixed linearization voltage, so
    the first-order variance transform is exact in S. Returns the injection
    and the transformed (re, im) variances.
    """
    if abs(v_guess) < 1e-6:
        raise EstimatorError("linearization voltage magnitude too close to zero")
    inj = np.conj(s / v_guess)
    c, d = v_guess.real, v_guess.imag
    m4 = (c * c + d * d) ** 2
    var_p, var_q = variance
    var_re = (c * c * var_p + d * d * var_q) / m4
    var_im = (d * d * var_p + c * c * var_q) / m4
    return complex(inj), (var_re, var_im)


def pseudo_variance(s: complex,
                    fraction: float = PSEUDO_SIGMA_FRACTION,
                    floor: float = PSEUDO_SIGMA_FLOOR) -> tuple[float, float]:
    sigma = max(fraction * abs(s), floor)
    return (sigma * sigma, sigma * sigma)


def linearize_pseudomeasurements(
    loads: dict[int, complex],
    v_guess: dict[int, complex],
    variances: dict[int, tuple[float, float]] | None = None,
    timestamp: GpsTimestamp | None = None,
) -> list[Measurement]:
    """Injection pseudomeasurements for every node in ``loads``.

    Sign convention: loads are consumption, so the injected equivalent is
    the load current drawn at the node (what the H injection rows model).
    """
    out = []
    for node in loads:
        s = loads[node]
        base_var = (variances or {}).get(node) or pseudo_variance(s)
        inj, var = pseudo_injection(s, v_guess[node], base_var)
        out.append(Measurement(INJECTION, node, inj, var, timestamp))
    return out


def default_measurement_config(model: GridModel,
                               pmu_nodes: list[int] | None = None,
                               pmu_sigma: float = PMU_SIGMA_DEFAULT,
                               pseudo_sigma_fraction: float = PSEUDO_SIGMA_FRACTION,
                               pseudo_sigma_floor: float = PSEUDO_SIGMA_FLOOR,
                               ) -> list[MeasurementSpec]:
    """Voltage rows at the PMU nodes, injection rows at every other node."""
    specs = []
    for node in (pmu_nodes if pmu_nodes is not None else model.pmu_nodes):
        specs.append(MeasurementSpec(VOLTAGE, node, (pmu_sigma ** 2, pmu_sigma ** 2)))
    for node in model.nodes[1:]:
        var = pseudo_variance(model.loads.get(node, 0j),
                              pseudo_sigma_fraction, pseudo_sigma_floor)
        specs.append(MeasurementSpec(INJECTION, node, var))
    return specs


def build_gain(model: GridModel, specs: list[MeasurementSpec]) -> GainCache:
    """Assemble H and W and factorize G = H'WH once.

    Raises ObservabilityError when the configuration leaves the network
    unobservable, reporting the unobservable subspace dimension.
    """
    if not any(s.kind == VOLTAGE for s in specs):
        raise ObservabilityError(
            "no voltage measurement anchors the voltage profile",
            unobservable_dim=2,
        )
    m = len(model.branches)
    rows = 2 * len(specs)
    H = np.zeros((rows, 2 * m))
    weights = np.empty(rows)
    offsets = np.zeros(rows)
    slack = model.slack_voltage.to_complex()

    for i, spec in enumerate(specs):
        re_row, im_row = 2 * i, 2 * i + 1
        weights[re_row] = 1.0 / spec.variance[0]
        weights[im_row] = 1.0 / spec.variance[1]
        if spec.kind == VOLTAGE:
            offsets[re_row] = slack.real
            offsets[im_row] = slack.imag
            for b in model.path_from_slack(spec.node):
                z = model.branches[b].z
                H[re_row, 2 * b] += -z.real
                H[re_row, 2 * b + 1] += z.imag
                H[im_row, 2 * b] += -z.imag
                H[im_row, 2 * b + 1] += -z.real
        else:
            if spec.node == model.slack:
                raise EstimatorError("injection pseudomeasurement at the slack node")
            parent_b = model.branch_index[spec.node]
            H[re_row, 2 * parent_b] += 1.0
            H[im_row, 2 * parent_b + 1] += 1.0
            for child in model.children[spec.node]:
                cb = model.branch_index[child]
                H[re_row, 2 * cb] += -1.0
                H[im_row, 2 * cb + 1] += -1.0

    G = H.T @ (weights[:, None] * H)
    try:
        factor = cho_factor(G, lower=True)
    except np.linalg.LinAlgError:
        rank = int(np.linalg.matrix_rank(H))
        raise ObservabilityError(
            f"gain matrix not positive definite: {2 * m - rank} unobservable "
            f"state dimensions",
            unobservable_dim=2 * m - rank,
        ) from None
    cache = GainCache(model=model, specs=tuple(specs), H=H, weights=weights,
                      offsets=offsets, factor=factor)
    cache.factorizations += 1
    return cache


@dataclass
class EstimationResult:
    state: StateVector
    node_voltages: dict[int, complex]
    residual_norm: float
    solve_ms: float


def derive_node_voltages(model: GridModel, state: StateVector) -> dict[int, complex]:
    """Forward-accumulate voltage drops from the slack reference."""
    volts = {model.slack: state.slack_voltage.to_complex()}
    for node in model.order[1:]:
        b = model.branch_index[node]
        volts[node] = volts[model.parent[node]] - model.branches[b].z * state.branch_current(b)
    return volts


def estimate(cache: GainCache, measurements: MeasurementSet) -> EstimationResult:
    """Single linear solve against the cached factorization."""
    entries = measurements.entries
    if len(entries) != len(cache.specs):
        raise ConfigMismatchError(
            f"{len(entries)} measurements for {len(cache.specs)} configured"
        )
    z = np.empty(2 * len(entries))
    for i, (m, spec) in enumerate(zip(entries, cache.specs)):
        if (m.kind, m.node) != (spec.kind, spec.node):
            raise ConfigMismatchError(
                f"entry {i} is {m.kind}@{m.node}, configured {spec.kind}@{spec.node}"
            )
        if m.variance != spec.variance:
            raise ConfigMismatchError(
                f"entry {i} variance {m.variance} differs from cached {spec.variance}"
            )
        if not (math.isfinite(m.value.real) and math.isfinite(m.value.imag)):
            raise EstimatorError(f"entry {i} ({m.kind}@{m.node}) is non-finite")
        z[2 * i] = m.value.real
        z[2 * i + 1] = m.value.imag

    t0 = time.perf_counter()
    with np.errstate(all="ignore"):
        rhs = cache.H.T @ (cache.weights * (z - cache.offsets))
        x = cho_solve(cache.factor, rhs, check_finite=False)
    solve_ms = (time.perf_counter() - t0) * 1000.0
    if not np.all(np.isfinite(x)):
        raise EstimatorError("estimation produced a non-finite state "
                             "(measurement overflow)")

    state = StateVector(values=x, slack_voltage=cache.model.slack_voltage)
    residual = (z - cache.offsets) - cache.H @ x
    return EstimationResult(
        state=state,
        node_voltages=derive_node_voltages(cache.model, state),
        residual_norm=float(np.linalg.norm(residual)),
        solve_ms=solve_ms,
    )
