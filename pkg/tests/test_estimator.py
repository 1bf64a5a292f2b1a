import math
import random

import numpy as np
import pytest

from gridmesh.estimator import (
    INJECTION,
    VOLTAGE,
    ConfigMismatchError,
    EstimatorError,
    Measurement,
    MeasurementSet,
    MeasurementSpec,
    ObservabilityError,
    build_gain,
    default_measurement_config,
    derive_node_voltages,
    estimate,
    linearize_pseudomeasurements,
    pseudo_injection,
    pseudo_variance,
)
from gridmesh.grid import Branch, GridModel, load_bundled, solve_radial_power_flow
from gridmesh.wire import Phasor


def random_radial_model(rng: random.Random, max_branches=12) -> GridModel:
    n_branches = rng.randint(1, max_branches)
    nodes = list(range(n_branches + 1))
    branches = []
    for child in nodes[1:]:
        parent = rng.choice(nodes[:child])
        z = complex(rng.uniform(0.001, 0.05), rng.uniform(0.001, 0.08))
        branches.append(Branch(parent, child, z))
    loads = {
        n: complex(rng.uniform(0, 0.3), rng.uniform(-0.05, 0.15))
        for n in nodes[1:] if rng.random() < 0.8
    }
    return GridModel(name=f"rand{n_branches}", nodes=nodes, branches=branches,
                     loads=loads)


def random_config(rng: random.Random, model: GridModel) -> list[MeasurementSpec]:
    non_slack = model.nodes[1:]
    n_voltage = rng.randint(1, len(non_slack))
    voltage_nodes = rng.sample(non_slack, n_voltage)
    specs = [
        MeasurementSpec(VOLTAGE, n, (rng.uniform(1e-7, 1e-5),) * 2)
        for n in voltage_nodes
    ]
    specs += [
        MeasurementSpec(INJECTION, n,
                        (rng.uniform(1e-4, 1e-2), rng.uniform(1e-4, 1e-2)))
        for n in non_slack
    ]
    return specs


def dense_normal_equation_oracle(cache, z_rect):
    """Brute-force (H' W H)^-1 H' W z via numpy dense inverse."""
    H, w = cache.H, cache.weights
    G = H.T @ np.diag(w) @ H
    rhs = H.T @ np.diag(w) @ (z_rect - cache.offsets)
    return np.linalg.solve(G, rhs)


def measurement_values(cache, rng):
    z = np.empty(2 * len(cache.specs))
    entries = []
    for i, spec in enumerate(cache.specs):
        value = complex(rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2))
        entries.append(Measurement(spec.kind, spec.node, value, spec.variance))
        z[2 * i] = value.real
        z[2 * i + 1] = value.imag
    return entries, z


class TestPseudoLinearization:
    def test_zero_power_gives_zero_injection(self):
        inj, var = pseudo_injection(0j, 1.0 + 0j, (0.01, 0.01))
        assert inj == 0j
        assert var == (0.01, 0.01)

    def test_unit_case(self):
        inj, _ = pseudo_injection(1.0 + 0j, 1.0 + 0j, (0.01, 0.01))
        assert inj == 1.0 - 0j

    def test_injection_formula_at_offset_voltage(self):
        s = 0.5 + 0.2j
        v = 0.95 * np.exp(0.1j)
        inj, _ = pseudo_injection(s, complex(v), (0.01, 0.01))
        assert inj == pytest.approx(np.conj(s / v))

    def test_zero_voltage_guess_rejected(self):
        with pytest.raises(EstimatorError):
            pseudo_injection(1.0 + 0j, 0j, (0.01, 0.01))

    def test_variance_propagation_matches_monte_carlo(self):
        rng = np.random.default_rng(11)
        s = 0.4 + 0.15j
        v = 0.93 * np.exp(-0.12j)
        var_p, var_q = 0.012 ** 2, 0.009 ** 2
        _, (var_re, var_im) = pseudo_injection(s, complex(v), (var_p, var_q))

        n = 100_000
        p = s.real + rng.normal(0, math.sqrt(var_p), n)
        q = s.imag + rng.normal(0, math.sqrt(var_q), n)
        inj = np.conj((p + 1j * q) / v)
        assert np.var(inj.real) == pytest.approx(var_re, rel=0.05)
        assert np.var(inj.imag) == pytest.approx(var_im, rel=0.05)

    def test_linearize_covers_all_load_nodes(self):
        loads = {2: 0.1 + 0.05j, 3: 0j}
        guess = {2: 1.0 + 0j, 3: 0.98 + 0.01j}
        out = linearize_pseudomeasurements(loads, guess)
        assert {m.node for m in out} == {2, 3}
        assert all(m.kind == INJECTION for m in out)
        assert all(min(m.variance) > 0 for m in out)

    def test_sigma_floor_keeps_variances_positive(self):
        assert min(pseudo_variance(0j)) > 0


class TestBuildGain:
    def test_two_bus_shapes(self):
        model = GridModel(name="m", nodes=[1, 2],
                          branches=[Branch(1, 2, 0.01 + 0.02j)],
                          loads={2: 0.5 + 0.1j})
        specs = [
            MeasurementSpec(VOLTAGE, 2, (1e-6, 1e-6)),
            MeasurementSpec(INJECTION, 2, (1e-2, 1e-2)),
        ]
        cache = build_gain(model, specs)
        assert cache.H.shape == (4, 2)
        assert cache.factorizations == 1
        # voltage rows carry the impedance pattern
        np.testing.assert_allclose(cache.H[0], [-0.01, 0.02])
        np.testing.assert_allclose(cache.H[1], [-0.02, -0.01])
        # injection rows are the incidence pattern
        np.testing.assert_allclose(cache.H[2], [1.0, 0.0])
        np.testing.assert_allclose(cache.H[3], [0.0, 1.0])

    def test_missing_voltage_anchor_is_rank_deficiency(self):
        model = GridModel(name="m", nodes=[1, 2],
                          branches=[Branch(1, 2, 0.01 + 0.02j)], loads={})
        with pytest.raises(ObservabilityError) as err:
            build_gain(model, [MeasurementSpec(INJECTION, 2, (1e-2, 1e-2))])
        assert err.value.unobservable_dim > 0

    def test_unobservable_subtree_reported(self):
        # three-node chain, only a voltage row at node 2: branch 2->3 unseen
        model = GridModel(name="m", nodes=[1, 2, 3],
                          branches=[Branch(1, 2, 0.01 + 0.02j),
                                    Branch(2, 3, 0.01 + 0.02j)],
                          loads={3: 0.1})
        with pytest.raises(ObservabilityError) as err:
            build_gain(model, [MeasurementSpec(VOLTAGE, 2, (1e-6, 1e-6))])
        assert err.value.unobservable_dim == 2

    def test_duplicated_rows_never_weaken_observability(self):
        # duplication adds a PSD term, so the smallest eigenvalue of G can
        # only grow; duplicating the whole row set leaves the condition
        # number exactly unchanged (G doubles).
        model = load_bundled("ieee13-balanced")
        specs = default_measurement_config(model)
        cache = build_gain(model, specs)
        G = cache.H.T @ (cache.weights[:, None] * cache.H)

        partial = build_gain(model, specs + specs[:2])
        Gp = partial.H.T @ (partial.weights[:, None] * partial.H)
        assert np.linalg.eigvalsh(Gp)[0] >= np.linalg.eigvalsh(G)[0] * (1 - 1e-12)

        full = build_gain(model, specs + specs)
        Gf = full.H.T @ (full.weights[:, None] * full.H)
        assert np.linalg.cond(Gf) == pytest.approx(np.linalg.cond(G), rel=1e-9)

    def test_injection_at_slack_rejected(self):
        model = load_bundled("ieee13-balanced")
        with pytest.raises(EstimatorError):
            build_gain(model, [MeasurementSpec(VOLTAGE, 71, (1e-6, 1e-6)),
                               MeasurementSpec(INJECTION, 31, (1e-2, 1e-2))])


class TestEstimate:
    def test_noiseless_consistency_recovers_truth(self):
        model = load_bundled("ieee13-balanced")
        sol = solve_radial_power_flow(model)
        cache = build_gain(model, default_measurement_config(model))
        entries = []
        for spec in cache.specs:
            if spec.kind == VOLTAGE:
                value = sol.voltages[spec.node]
            else:
                inflow = sol.currents[model.branch_index[spec.node]]
                out = sum((sol.currents[model.branch_index[c]]
                           for c in model.children[spec.node]), start=0j)
                value = inflow - out
            entries.append(Measurement(spec.kind, spec.node, value,
                                       spec.variance))
        result = estimate(cache, MeasurementSet(entries))
        for i in range(len(model.branches)):
            assert result.state.branch_current(i) == \
                pytest.approx(sol.currents[i], abs=1e-10)
        assert result.residual_norm < 1e-10
        for node, v in sol.voltages.items():
            assert result.node_voltages[node] == pytest.approx(v, abs=1e-10)

    def test_oracle_equivalence_on_randomized_instances(self):
        rng = random.Random(2024)
        for _ in range(100):
            model = random_radial_model(rng)
            cache = build_gain(model, random_config(rng, model))
            entries, z = measurement_values(cache, rng)
            result = estimate(cache, MeasurementSet(entries))
            expected = dense_normal_equation_oracle(cache, z)
            np.testing.assert_allclose(result.state.values, expected,
                                       rtol=0, atol=1e-9)

    def test_weight_scaling_invariance(self):
        rng = random.Random(5)
        model = random_radial_model(rng)
        specs = random_config(rng, model)
        cache = build_gain(model, specs)
        entries, _ = measurement_values(cache, rng)
        base = estimate(cache, MeasurementSet(entries))

        scale = 37.5
        scaled_specs = [
            MeasurementSpec(s.kind, s.node,
                            (s.variance[0] * scale, s.variance[1] * scale))
            for s in specs
        ]
        scaled_cache = build_gain(model, scaled_specs)
        scaled_entries = [
            Measurement(m.kind, m.node, m.value,
                        (m.variance[0] * scale, m.variance[1] * scale))
            for m in entries
        ]
        scaled = estimate(scaled_cache, MeasurementSet(scaled_entries))
        np.testing.assert_allclose(scaled.state.values, base.state.values,
                                   rtol=0, atol=1e-9)

    def test_gain_constancy_zero_refactorizations(self):
        model = load_bundled("ieee13-balanced")
        cache = build_gain(model, default_measurement_config(model))
        assert cache.factorizations == 1
        rng = random.Random(1)
        for _ in range(25):
            entries, _ = measurement_values(cache, rng)
            estimate(cache, MeasurementSet(entries))
        assert cache.factorizations == 1

    def test_derived_voltages_satisfy_branch_drop_equation(self):
        rng = random.Random(9)
        model = random_radial_model(rng)
        cache = build_gain(model, random_config(rng, model))
        entries, _ = measurement_values(cache, rng)
        result = estimate(cache, MeasurementSet(entries))
        for child in model.nodes[1:]:
            parent = model.parent[child]
            b = model.branch_index[child]
            drop = (result.node_voltages[parent] - result.node_voltages[child])
            assert drop == pytest.approx(
                model.branches[b].z * result.state.branch_current(b), abs=1e-14
            )

    def test_config_mismatch_rejected(self):
        model = load_bundled("ieee13-balanced")
        cache = build_gain(model, default_measurement_config(model))
        with pytest.raises(ConfigMismatchError):
            estimate(cache, MeasurementSet(
                [Measurement(VOLTAGE, 31, 1 + 0j, (1e-6, 1e-6))]
            ))

    def test_non_finite_measurement_rejected(self):
        model = load_bundled("ieee13-balanced")
        cache = build_gain(model, default_measurement_config(model))
        entries, _ = measurement_values(cache, random.Random(3))
        entries[0] = Measurement(entries[0].kind, entries[0].node,
                                 complex(float("nan"), 0), entries[0].variance)
        with pytest.raises(EstimatorError):
            estimate(cache, MeasurementSet(entries))

    def test_measurement_set_requires_voltage_anchor(self):
        with pytest.raises(ObservabilityError):
            MeasurementSet([Measurement(INJECTION, 2, 0j, (1e-2, 1e-2))])


def test_state_vector_interleaving():
    model = load_bundled("ieee13-balanced")
    cache = build_gain(model, default_measurement_config(model))
    entries, _ = measurement_values(cache, random.Random(8))
    result = estimate(cache, MeasurementSet(entries))
    assert len(result.state.values) == 2 * len(model.branches)
    assert result.state.branch_current(0) == complex(result.state.values[0],
                                                     result.state.values[1])
    volts = derive_node_voltages(model, result.state)
    assert volts[model.slack] == model.slack_voltage.to_complex()
