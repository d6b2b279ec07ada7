"""Water-filling solver tests, anchored by exhaustive grid search."""

import numpy as np
import pytest

from safelb.model import SystemConfig
from safelb.rates import (
    GainSpec,
    InfeasibleProgramError,
    KKTReport,
    RateProgram,
    TargetRates,
    expected_occupancy,
    gain_floor,
    generic_gain_program,
    link_capacity_program,
    solve_generic_gain,
    solve_link_capacity,
    targets_from_rates,
    verify_kkt,
)

from oracles import grid_search_rates


def make_cfg(mu, xi, theta=()):
    return SystemConfig(n_queues=len(mu), n_constrained=len(theta),
                        arrival_rate=xi, service_rates=tuple(mu),
                        constraints=tuple(theta))


def free_program(mu, xi):
    """No dispatch-fraction limits: caps are the stability bounds only."""
    cfg = make_cfg(mu, xi)
    return link_capacity_program(cfg)


def random_program(rng, n=None):
    n = n or int(rng.integers(2, 6))
    mu = rng.uniform(0.5, 2.5, size=n)
    xi = rng.uniform(0.3, 0.9) * mu.sum()
    cfg = make_cfg(tuple(mu), float(xi))
    caps = mu * rng.uniform(0.55, 1.0 - 1e-6, size=n)
    while caps.sum() <= xi * 1.02:
        caps = np.minimum(caps * 1.1, mu * (1 - 1e-6))
    floors = caps * rng.uniform(0.0, 0.25, size=n)
    if floors.sum() > 0.8 * xi:
        floors *= 0.8 * xi / floors.sum()
    return RateProgram(cfg=cfg, caps=tuple(caps), floors=tuple(floors),
                       margin=0.0)


class TestSolveLinkCapacity:
    def test_symmetric_split_exact(self):
        t = solve_link_capacity(free_program((1.0, 1.0), 1.0))
        assert t.xi[0] == t.xi[1]
        assert t.xi[0] == pytest.approx(0.5, abs=1e-9)
        assert t.targets[0] == pytest.approx(1.0, abs=1e-8)

    def test_active_cap_takes_residual(self):
        cfg = make_cfg((1.0, 1.0), 1.0)
        prog = RateProgram(cfg=cfg, caps=(0.3, 1.0 - 1e-9),
                           floors=(0.0, 0.0), margin=0.0)
        t = solve_link_capacity(prog)
        assert t.xi[0] == pytest.approx(0.3, abs=1e-9)
        assert t.xi[1] == pytest.approx(0.7, abs=1e-9)

    def test_matches_grid_search_uncapped(self):
        t = solve_link_capacity(free_program((2.0, 1.0), 1.5))
        best, _ = grid_search_rates(1.5, (2.0, 1.0), (0.0, 0.0),
                                    (2.0 - 1e-6, 1.0 - 1e-6))
        assert np.allclose(t.xi, best, atol=1e-3)

    def test_matches_grid_search_random_boxes(self):
        rng = np.random.default_rng(42)
        for n in (2, 3, 2):
            prog = random_program(rng, n=n)
            t = solve_link_capacity(prog)
            best, best_val = grid_search_rates(
                prog.cfg.arrival_rate, prog.cfg.service_rates,
                prog.floors, prog.caps, step=2e-4 if n == 2 else 8e-4)
            assert np.allclose(t.xi, best, atol=1e-3), (t.xi, best)
            ours = expected_occupancy(t.xi, prog.cfg.service_rates)
            assert ours <= best_val + 1e-6

    def test_rate_sum_and_boxes(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            prog = random_program(rng)
            t = solve_link_capacity(prog)
            assert abs(t.total - prog.cfg.arrival_rate) < 1e-9
            for x, lo, hi in zip(t.xi, prog.floors, prog.caps):
                assert lo - 1e-12 <= x <= hi + 1e-12

    def test_infeasible_reports_slack(self):
        cfg = make_cfg((1.0, 1.0), 1.5)
        prog = RateProgram(cfg=cfg, caps=(0.7, 0.7), floors=(0.0, 0.0),
                           margin=0.0)
        with pytest.raises(InfeasibleProgramError, match="slack"):
            solve_link_capacity(prog)

    def test_single_queue(self):
        t = solve_link_capacity(free_program((2.0,), 1.2))
        assert t.xi[0] == pytest.approx(1.2, abs=1e-9)

    def test_near_saturation_margin_autoscales(self):
        # config stabilizable by a hair: the fixed 1% default cap margin
        # would exceed the feasibility slack, so it must shrink
        cfg = make_cfg((1.0, 1.0), 1.99, theta=(0.52, 0.52))
        prog = link_capacity_program(cfg)
        assert prog.margin < 0.01
        t = solve_link_capacity(prog)
        assert abs(t.total - 1.99) < 1e-9


class TestKKT:
    def test_residual_small_on_random_programs(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            prog = random_program(rng)
            rep = verify_kkt(solve_link_capacity(prog), prog)
            assert rep.passed, rep
            worst = max(worst, rep.max_residual)
        assert worst < 1e-8

    def test_perturbation_never_improves(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            prog = random_program(rng)
            t = solve_link_capacity(prog)
            mu = prog.cfg.service_rates
            base = expected_occupancy(t.xi, mu)
            n = len(mu)
            for i in range(n):
                for j in range(n):
                    if i == j:
                        continue
                    xi = np.array(t.xi)
                    xi[i] += 1e-3
                    xi[j] -= 1e-3
                    if ((xi < np.array(prog.floors) - 1e-12).any()
                            or (xi > np.array(prog.caps) + 1e-12).any()):
                        continue
                    assert expected_occupancy(xi, mu) >= base - 1e-9

    def test_detects_bad_candidate(self):
        prog = free_program((2.0, 1.0), 1.5)
        bad = targets_from_rates((1.4, 0.1), prog.cfg)
        rep = verify_kkt(bad, prog)
        assert not rep.passed

    def test_objective_midpoint_convexity(self):
        rng = np.random.default_rng(3)
        mu = (1.5, 0.9, 2.2)
        for _ in range(50):
            a = rng.uniform(0, 0.8, size=3) * mu
            b = rng.uniform(0, 0.8, size=3) * mu
            mid = 0.5 * (a + b)
            assert expected_occupancy(mid, mu) <= 0.5 * (
                expected_occupancy(a, mu) + expected_occupancy(b, mu)) + 1e-12

    def test_tightening_caps_never_helps(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            prog = random_program(rng)
            t = solve_link_capacity(prog)
            base = expected_occupancy(t.xi, prog.cfg.service_rates)
            caps = np.array(prog.caps)
            i = int(np.argmax(np.array(t.xi) / caps))
            caps[i] = max(prog.floors[i] + 1e-9, caps[i] * 0.9)
            if caps.sum() <= prog.cfg.arrival_rate:
                continue
            tighter = RateProgram(cfg=prog.cfg, caps=tuple(caps),
                                  floors=prog.floors, margin=0.0)
            t2 = solve_link_capacity(tighter)
            assert expected_occupancy(
                t2.xi, prog.cfg.service_rates) >= base - 1e-9


class TestGenericGain:
    def test_identity_zero_thresholds_reduce_to_capacity_case(self):
        cfg = make_cfg((1.0, 2.0), 1.3, theta=(0.6,))
        prog = link_capacity_program(cfg)
        gains = GainSpec.linear((1.0, 1.0), (0.0, 0.0))
        plain = solve_link_capacity(prog)
        with_gains = solve_generic_gain(prog, gains)
        assert np.allclose(plain.xi, with_gains.xi, atol=1e-12)

    def test_identity_floor_activates_symmetric_residual(self):
        cfg = make_cfg((1.0, 1.0), 1.0)
        prog = link_capacity_program(cfg)
        gains = GainSpec.linear((1.0, 1.0), (1.0, 0.0))
        t = solve_generic_gain(prog, gains)
        # occupancy floor of 1 on queue 0 forces xi_0 >= 0.5; the
        # unconstrained optimum already sits there
        assert t.xi[0] == pytest.approx(0.5, abs=1e-6)
        assert t.xi[1] == pytest.approx(0.5, abs=1e-6)

    def test_matches_grid_search_with_raw_gain_constraint(self):
        # oracle enforces c_i(L(x_i)) >= theta_i directly on the grid,
        # exercising the floor inversion end to end
        rng = np.random.default_rng(31)
        mu = (1.8, 1.1)
        cfg = make_cfg(mu, 1.6)
        for _ in range(3):
            slopes = rng.uniform(0.4, 2.0, size=2)
            breaks = rng.uniform(0.5, 2.0, size=2)
            gains = GainSpec(
                gains=tuple(_PiecewiseGain(a, b)
                            for a, b in zip(slopes, breaks)),
                thresholds=(float(rng.uniform(0.2, 0.9)),
                            float(rng.uniform(0.2, 0.9))))
            prog = link_capacity_program(cfg)
            t = solve_generic_gain(prog, gains)

            def ok(x, gains=gains, mu=mu):
                L = x / (np.asarray(mu) - x)
                return all(g(l) >= th for g, l, th in
                           zip(gains.gains, L, gains.thresholds))

            best, _ = grid_search_rates(1.6, mu, (0.0, 0.0), prog.caps,
                                        step=1e-4, feasible=ok)
            assert np.allclose(t.xi, best, atol=1e-3), (t.xi, best)

    def test_floor_inversion_quadratic(self):
        # c(L) = 2 L^2 >= 8 -> L >= 2 -> xi = mu*L/(1+L) = 2/3 mu
        lo = gain_floor(lambda x: 2 * x * x, 8.0, 1.5)
        assert lo == pytest.approx(1.5 * 2 / 3, rel=1e-5)

    def test_unsatisfiable_floors_raise(self):
        cfg = make_cfg((1.0, 1.0), 0.4)
        prog = link_capacity_program(cfg)
        gains = GainSpec.linear((1.0, 1.0), (3.0, 3.0))
        # L >= 3 per queue needs xi >= 0.75 each, but only 0.4 arrives
        with pytest.raises(InfeasibleProgramError):
            solve_generic_gain(prog, gains)

    def test_floor_above_cap_raises(self):
        cfg = make_cfg((1.0, 1.0), 1.0, theta=(0.3,))
        gains = GainSpec.linear((1.0, 1.0), (9.0, 0.0))
        with pytest.raises(InfeasibleProgramError, match="floor"):
            generic_gain_program(cfg, gains)


class TestGainSpec:
    def test_rejects_nonconvex(self):
        with pytest.raises(ValueError, match="convex"):
            GainSpec(gains=(np.sqrt,), thresholds=(1.0,))

    def test_rejects_decreasing(self):
        with pytest.raises(ValueError, match="nondecreasing"):
            GainSpec(gains=(lambda x: -x,), thresholds=(1.0,))

    def test_preset_roundtrip(self, tmp_path):
        spec = GainSpec.quadratic((1.0, 2.5), (4.0, 0.0))
        path = tmp_path / "gains.yaml"
        spec.save(path)
        back = GainSpec.load(path)
        assert back.kind == "quadratic"
        assert back.coefficients == (1.0, 2.5)
        assert back.thresholds == (4.0, 0.0)
        assert back.gains[1](3.0) == pytest.approx(22.5)

    def test_custom_gains_do_not_serialize(self):
        spec = GainSpec(gains=(lambda x: x,), thresholds=(0.5,))
        with pytest.raises(ValueError, match="preset"):
            spec.to_dict()


class TestTargetRates:
    def test_direct_formula(self):
        cfg = make_cfg((1.0, 2.0), 1.0)
        t = targets_from_rates((0.5, 0.0), cfg)
        assert t.targets == (1.0, 0.0)

    def test_rejects_saturated(self):
        cfg = make_cfg((1.0,), 0.5)
        with pytest.raises(ValueError):
            targets_from_rates((1.0,), cfg)

    def test_solver_targets_stay_finite(self):
        rng = np.random.default_rng(88)
        for _ in range(20):
            prog = random_program(rng)
            t = solve_link_capacity(prog)
            assert max(t.targets) < 1e6

    def test_file_roundtrip(self, tmp_path):
        t = TargetRates(xi=(0.4, 0.6), targets=(1.0, 2.0))
        path = tmp_path / "targets.yaml"
        t.save(path)
        assert TargetRates.load(path) == t
        import yaml
        doc = yaml.safe_load(path.read_text())
        assert set(doc) == {"xi", "targets"}


class _PiecewiseGain:
    """max of two nondecreasing lines through the origin region: convex."""

    def __init__(self, slope, knee):
        self.slope = float(slope)
        self.knee = float(knee)

    def __call__(self, x):
        return max(self.slope * x,
                   2.0 * self.slope * (x - self.knee) + self.slope * self.knee)
