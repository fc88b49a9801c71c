import dataclasses
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fd_jacobian, fixed_point_power_flow
from voltplan.grid_model import Branch
from voltplan.power_flow import (ControlSet, PowerFlowError, PowerFlowModel,
                                 PowerFlowOptions, VoltageState,
                                 branch_currents, branch_currents_to,
                                 deviation_index, residuals, solve_power_flow,
                                 solve_snapshot, violation_metric)
from voltplan.timeseries import baseline_snapshot, snapshot


def two_bus_state(net2, v1, v2):
    order = [net2.bus_index["b1"], net2.bus_index["b2"]]
    vr = np.zeros(2)
    vi = np.zeros(2)
    vr[order[0]], vi[order[0]] = v1.real, v1.imag
    vr[order[1]], vi[order[1]] = v2.real, v2.imag
    return VoltageState(vr, vi)


class TestBranchCurrents:
    def test_no_voltage_difference(self, net2):
        br = Branch("b1", "b2", series_g=1.0, series_b=0.0)
        state = two_bus_state(net2, 1 + 0j, 1 + 0j)
        assert branch_currents(state, br, net2) == pytest.approx((0.0, 0.0))

    def test_pure_reactance(self, net2):
        # hand evaluation: g=0, b=-10, V_i=1, V_j=1-0.1j gives I = 1.0 + 0j
        br = Branch("b1", "b2", series_g=0.0, series_b=-10.0)
        state = two_bus_state(net2, 1 + 0j, 1 - 0.1j)
        i_r, i_i = branch_currents(state, br, net2)
        assert i_r == pytest.approx(1.0, abs=1e-12)
        assert i_i == pytest.approx(0.0, abs=1e-12)

    def test_pure_conductance(self, net2):
        # hand evaluation: g=1, V_i=1, V_j=0.9 gives I = 0.1 + 0j
        br = Branch("b1", "b2", series_g=1.0, series_b=0.0)
        state = two_bus_state(net2, 1 + 0j, 0.9 + 0j)
        assert branch_currents(state, br, net2) == pytest.approx((0.1, 0.0))

    @settings(max_examples=60, deadline=None)
    @given(
        g=st.floats(0.0, 5.0), b=st.floats(-20.0, -0.1),
        bc=st.floats(0.0, 0.1), tau=st.floats(0.9, 1.1),
        shift=st.floats(-0.2, 0.2),
        va=st.tuples(st.floats(-1.2, 1.2), st.floats(-1.2, 1.2)),
        vb=st.tuples(st.floats(-1.2, 1.2), st.floats(-1.2, 1.2)),
        alpha=st.floats(-2.0, 2.0),
    )
    def test_linearity_superposition(self, net2, g, b, bc, tau, shift, va, vb,
                                     alpha):
        br = Branch("b1", "b2", series_g=g, series_b=b, charging_b=bc,
                    tap_ratio=tau, phase_shift=shift)
        sa = two_bus_state(net2, complex(*va), complex(*vb))
        sb = two_bus_state(net2, complex(*vb), complex(*va))
        combo = VoltageState(sa.v_r + alpha * sb.v_r, sa.v_i + alpha * sb.v_i)
        for fn in (branch_currents, branch_currents_to):
            ia = np.array(fn(sa, br, net2))
            ib = np.array(fn(sb, br, net2))
            ic = np.array(fn(combo, br, net2))
            assert ic == pytest.approx(ia + alpha * ib, abs=1e-9)


class TestResiduals:
    def isolated(self, net2, shunt_b=0.0, demand=0.0):
        buses = tuple(dataclasses.replace(b, shunt_b=shunt_b, demand_p=demand,
                                          demand_q=0.0) for b in net2.buses)
        return dataclasses.replace(net2, buses=buses, branches=())

    def test_isolated_bus_zero(self, net2):
        net = self.isolated(net2)
        snap = baseline_snapshot(net)
        state = VoltageState(np.ones(2), np.zeros(2))
        dp, dq = residuals(net, snap, state, ControlSet.schedule(net, snap))
        k = net.bus_index["b2"]
        assert dp[k] == pytest.approx(0.0) and dq[k] == pytest.approx(0.0)

    def test_shunt_susceptance_term(self, net2):
        net = self.isolated(net2, shunt_b=0.1)
        snap = baseline_snapshot(net)
        state = VoltageState(np.ones(2), np.zeros(2))
        _, dq = residuals(net, snap, state, ControlSet.schedule(net, snap))
        assert dq[net.bus_index["b2"]] == pytest.approx(0.1)

    def test_converged_solution_residuals(self, net2):
        snap = baseline_snapshot(net2)
        sol = solve_snapshot(net2, snap)
        ctrl = ControlSet.schedule(net2, snap)
        ctrl.gen_q = sol.gen_q
        ctrl.slack_p = sol.slack_p
        dp, dq = residuals(net2, snap, sol.state, ctrl)
        assert np.max(np.abs(np.concatenate([dp, dq]))) <= 1e-8


class TestNewtonSolver:
    def test_no_load_flat(self, net2):
        buses = tuple(dataclasses.replace(b, demand_p=0.0, demand_q=0.0)
                      for b in net2.buses)
        net = dataclasses.replace(net2, buses=buses)
        sol = solve_snapshot(net, baseline_snapshot(net))
        assert sol.converged and sol.iterations <= 1
        assert np.allclose(sol.v_mag, 1.0, atol=1e-9)

    def test_two_bus_closed_form(self, net2):
        # lossless feeder: V2 solves V^2 (1 - V^2) = (P x)^2
        sol = solve_snapshot(net2, baseline_snapshot(net2))
        px = 0.5 * 0.1
        v2 = np.sqrt((1 + np.sqrt(1 - 4 * px**2)) / 2)
        angle = -np.arccos(v2)
        k = net2.bus_index["b2"]
        assert sol.converged
        assert sol.v_mag[k] == pytest.approx(v2, abs=1e-6)
        assert np.arctan2(sol.state.v_i[k], sol.state.v_r[k]) == pytest.approx(
            angle, abs=1e-5)
        assert np.degrees(angle) == pytest.approx(-2.868, abs=2e-3)

    def test_14bus_against_fixed_point_oracle(self, net14, snap14):
        ctrl = ControlSet.schedule(net14, snap14)
        sol = solve_power_flow(net14, snap14, ctrl,
                               PowerFlowOptions(enforce_q_limits=False))
        assert sol.converged and sol.max_residual <= 1e-8
        v_oracle, ok = fixed_point_power_flow(net14, snap14, ctrl)
        assert ok
        assert np.max(np.abs(np.abs(v_oracle) - sol.v_mag)) <= 1e-6

    def test_14bus_iterations_and_runtime(self, net14, snap14):
        model = PowerFlowModel(net14)
        sol = solve_snapshot(net14, snap14, model=model)
        assert sol.converged and sol.iterations <= 6
        t0 = time.perf_counter()
        n = 20
        for _ in range(n):
            solve_snapshot(net14, snap14, model=model)
        assert (time.perf_counter() - t0) / n < 0.050

    def test_warm_start_supported(self, net14, snap14):
        cold = solve_snapshot(net14, snap14)
        warm = solve_snapshot(net14, snap14,
                              PowerFlowOptions(start=cold.state))
        assert warm.converged and warm.iterations <= 1

    def test_nonconvergence_reported(self, net2):
        buses = tuple(dataclasses.replace(b, demand_p=8.0, demand_q=4.0)
                      for b in net2.buses)  # far past loadability
        net = dataclasses.replace(net2, buses=buses)
        sol = solve_snapshot(net, baseline_snapshot(net),
                             PowerFlowOptions(max_iter=8))
        assert not sol.converged
        assert sol.max_residual > 1e-8

    def test_q_limit_switching(self, net14, snap14):
        gens = tuple(
            dataclasses.replace(g, q_max=0.05) if g.id == "g6" else g
            for g in net14.generators)
        net = dataclasses.replace(net14, generators=gens)
        sol = solve_snapshot(net, baseline_snapshot(net))
        assert sol.converged
        assert "6" in sol.q_limited_buses
        k = [i for i, g in enumerate(net.generators) if g.id == "g6"][0]
        assert sol.gen_q[k] == pytest.approx(0.05, abs=1e-6)
        vset = net.generators[k].v_sched
        assert sol.v_mag[net.bus_index["6"]] < vset

    def test_jacobian_matches_finite_differences(self, net14, snap14):
        model = PowerFlowModel(net14)
        ctrl = ControlSet.schedule(net14, snap14)
        rng = np.random.default_rng(0)
        n = model.n
        for _ in range(100):
            vr = 1.0 + 0.1 * rng.standard_normal(n)
            vi = 0.1 * rng.standard_normal(n)

            def f(z):
                dp, dq = model.balance_residuals(snap14, ctrl, z[:n], z[n:])
                return np.concatenate([dp, dq])

            z0 = np.concatenate([vr, vi])
            jp_r, jp_i, jq_r, jq_i = model.balance_jacobian(ctrl, vr, vi)
            J = np.block([[jp_r.toarray(), jp_i.toarray()],
                          [jq_r.toarray(), jq_i.toarray()]])
            J_fd = fd_jacobian(f, z0)
            scale = max(1.0, np.abs(J_fd).max())
            assert np.abs(J - J_fd).max() / scale <= 1e-6
            # dense fast path agrees with the sparse assembly
            blocks = model.balance_jacobian_dense(ctrl, vr, vi)
            J_dense = np.block([[blocks[0], blocks[1]], [blocks[2], blocks[3]]])
            assert np.abs(J - J_dense).max() <= 1e-12


class TestMetrics:
    def test_deviation_zero_at_target(self, net14, snap14):
        sol = solve_snapshot(net14, snap14)
        state = sol.state.copy()
        for b in net14.target_buses:
            k = net14.bus_index[b]
            t = net14.bus(b).v_target
            ang = np.arctan2(state.v_i[k], state.v_r[k])
            state.v_r[k] = t * np.cos(ang)
            state.v_i[k] = t * np.sin(ang)
        forced = dataclasses.replace(sol, state=state,
                                     v_mag=np.hypot(state.v_r, state.v_i))
        assert deviation_index(forced, net14) == pytest.approx(0.0, abs=1e-12)

    def test_deviation_simple_sum(self, net14, snap14):
        sol = solve_snapshot(net14, snap14)
        devs = {"4": 0.01, "5": 0.02, "9": 0.005}
        v = sol.v_mag.copy()
        for b in net14.target_buses:
            k = net14.bus_index[b]
            v[k] = net14.bus(b).v_target + devs.get(b, 0.0)
        forced = dataclasses.replace(sol, v_mag=v)
        assert deviation_index(forced, net14) == pytest.approx(0.035)
        # non-target buses do not contribute
        v2 = v.copy()
        v2[net14.bus_index["1"]] += 0.3
        forced2 = dataclasses.replace(forced, v_mag=v2)
        assert deviation_index(forced2, net14) == pytest.approx(0.035)

    def test_violation_metric_examples(self, net14, snap14):
        sol = solve_snapshot(net14, snap14)
        v = sol.v_mag.copy()
        for b in net14.target_buses:
            v[net14.bus_index[b]] = net14.bus(b).v_target
        v[net14.bus_index["4"]] += 0.004
        v[net14.bus_index["5"]] -= 0.006
        forced = dataclasses.replace(sol, v_mag=v)
        assert violation_metric(forced, net14, 0.005) == pytest.approx(0.001)
        assert violation_metric(forced, net14, 0.0) == pytest.approx(
            deviation_index(forced, net14))
        assert violation_metric(forced, net14, 0.01) == 0.0

    def test_unconverged_rejected(self, net14, snap14):
        sol = solve_snapshot(net14, snap14)
        bad = dataclasses.replace(sol, converged=False)
        with pytest.raises(PowerFlowError):
            deviation_index(bad, net14)
        with pytest.raises(PowerFlowError):
            violation_metric(bad, net14, 0.005)

    @settings(max_examples=40, deadline=None)
    @given(d1=st.floats(0.0, 0.05), d2=st.floats(0.0, 0.05))
    def test_violation_monotone_in_deadband(self, net14, snap14, d1, d2):
        sol = solve_snapshot(net14, snap14)
        lo, hi = sorted([d1, d2])
        assert violation_metric(sol, net14, lo) >= violation_metric(sol, net14, hi)


def test_slack_imaginary_part_exactly_zero(net14, snap14):
    sol = solve_snapshot(net14, snap14)
    assert sol.state.v_i[net14.bus_index[net14.slack_bus]] == 0.0
