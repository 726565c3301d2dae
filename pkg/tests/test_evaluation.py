import json

import numpy as np
import pytest

from bespoke_ode.bespoke_scheme import SmoothScheme, identity_params, materialize
from bespoke_ode.errors import ConfigError
from bespoke_ode.evaluation import (
    EvalReport,
    SweepSolver,
    base_solver_order,
    bespoke_global_order,
    bespoke_local_order,
    counting_field,
    fit_order,
    map_scale_time,
    psnr,
    reference_endpoints,
    scheduler_equivalence,
    sweep,
)
from bespoke_ode.flow_fields import affine_oracle_solution, circle_mixture
from bespoke_ode.schedulers import make_cosine_scheduler, make_ot_scheduler


def identity_smooth_scheme():
    return SmoothScheme(
        t_fn=lambda r: np.asarray(r, dtype=float),
        dt_fn=lambda r: np.ones_like(np.asarray(r, dtype=float)),
        s_fn=lambda r: np.ones_like(np.asarray(r, dtype=float)),
        ds_fn=lambda r: np.zeros_like(np.asarray(r, dtype=float)),
    )


class TestPsnr:
    def test_oracle(self):
        ref = np.array([[1.0, 0.0]])
        cand = np.array([[0.0, 0.0]])
        # peak 1, mse 0.5
        assert np.isclose(psnr(ref, cand), 10.0 * np.log10(2.0), rtol=1e-12)
        assert psnr(ref, ref) == float("inf")
        assert np.isclose(psnr(ref, cand, peak=2.0), 10.0 * np.log10(8.0), rtol=1e-12)


class TestCountingField:
    def test_counts_eval_only(self, gmm_field):
        counted, counter = counting_field(gmm_field)
        x = np.zeros((4, 2))
        counted(0.3, x)
        counted(0.5, x)
        assert counter.calls == 2
        counted.jac_x(0.3, x)
        counted.dt(0.3, x)
        assert counter.calls == 2
        assert np.allclose(counted(0.3, x), gmm_field(0.3, x))
        assert counter.calls == 3


class TestFitOrder:
    def test_exact_power_law(self):
        h = np.array([0.1, 0.05, 0.025])
        slope, dropped = fit_order(h, 3.7 * h**2.5)
        assert np.isclose(slope, 2.5, atol=1e-12)
        assert dropped == 0

    def test_floor_dropping(self):
        h = np.array([0.1, 0.05, 0.025, 0.0125])
        errs = 1e-6 * h**3
        errs[-1] = 1e-16
        with pytest.warns(UserWarning):
            slope, dropped = fit_order(h, errs)
        assert dropped == 1
        assert np.isclose(slope, 3.0, atol=1e-6)
        with pytest.raises(ValueError):
            with pytest.warns(UserWarning):
                fit_order(h, np.full(4, 1e-16))


class TestOrderHarnesses:
    def test_base_solver_orders(self, gmm_field, gmm_paths):
        fit1 = base_solver_order(gmm_field, "rk1", gmm_paths)
        fit2 = base_solver_order(gmm_field, "rk2", gmm_paths)
        # local error of an order-p method scales like h^(p+1)
        assert abs(fit1.slope - 2.0) < 0.4
        assert abs(fit2.slope - 3.0) < 0.4
        assert fit1.per_anchor_slopes.shape == (4,)
        assert fit1.half_width >= 0.0
        assert fit1.label == "rk1-local"
        doc = fit1.to_json_dict()
        assert doc["slope"] == fit1.slope

    def test_identity_scheme_matches_plain_rates(self, gmm_field, gmm_paths):
        scheme = identity_smooth_scheme()
        local = bespoke_local_order(scheme, "rk2", gmm_field, gmm_paths)
        assert abs(local.slope - 3.0) < 0.4
        x0 = np.stack([p.states[0] for p in gmm_paths])
        ends = np.stack([p.end_state for p in gmm_paths])
        glob = bespoke_global_order(scheme, "rk2", gmm_field, x0, ends)
        assert abs(glob.slope - 2.0) < 0.5


class TestScaleTimeMap:
    def test_identity_pair(self):
        ot = make_ot_scheduler()
        for r in (0.1, 0.5, 0.9):
            t, s, tdot, sdot = map_scale_time(ot, ot, r)
            assert np.isclose(t, r, atol=1e-12)
            assert np.isclose(s, 1.0, atol=1e-12)
            assert np.isclose(tdot, 1.0, atol=1e-9)
            assert np.isclose(sdot, 0.0, atol=1e-9)

    def test_linear_to_cosine_midpoint(self):
        # equal signal-to-noise at one half on both schedules, and the
        # noise scales differ by exactly sqrt(2)
        t, s, _, _ = map_scale_time(make_ot_scheduler(), make_cosine_scheduler(), 0.5)
        assert np.isclose(t, 0.5, atol=1e-12)
        assert np.isclose(s, np.sqrt(2.0), atol=1e-12)


class TestEquivalence:
    def test_linear_vs_cosine_small(self):
        mixture = circle_mixture(3, 2.0, 0.09, dim=2)
        rep = scheduler_equivalence(
            make_ot_scheduler(),
            make_cosine_scheduler(),
            mixture,
            batch=4,
            r_points=17,
            field_probes=30,
            rtol=1e-7,
            atol=1e-7,
        )
        assert rep.max_field_rel_err <= 1e-8
        assert rep.max_path_residual <= 1e-4
        assert rep.clipped_points == 0
        assert rep.pair == ("ot", "cosine")
        doc = rep.to_json_dict()
        json.dumps(doc)


class TestReferenceEndpoints:
    def test_affine_matches_oracle(self, affine_field):
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((5, 2))
        ends = reference_endpoints(affine_field, x0, rtol=1e-9, atol=1e-9)
        want = np.stack([affine_oracle_solution(affine_field, x, 1.0) for x in x0])
        assert np.max(np.abs(ends - want)) <= 1e-7

    def test_gmm_extends_to_one(self, gmm_field, gmm_paths):
        x0 = np.stack([p.states[0] for p in gmm_paths[:3]])
        ends = reference_endpoints(gmm_field, x0, rtol=1e-7, atol=1e-7)
        # extension adds the end-gap drift on top of the solver endpoint
        raw = np.stack([p.end_state for p in gmm_paths[:3]])
        gap = 1.0 - gmm_paths[0].end_time
        want = raw + gmm_field(gmm_paths[0].end_time, raw) * gap
        assert np.max(np.abs(ends - want)) <= 1e-5


class TestSweep:
    def test_rows_and_accounting(self, gmm_field):
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((6, 2))
        ends = reference_endpoints(gmm_field, x0, rtol=1e-7, atol=1e-7)
        schemes = {n: materialize(identity_params("rk2", n)) for n in (4, 8)}
        solvers = [
            SweepSolver(label="euler", kind="rk1"),
            SweepSolver(label="midpoint", kind="rk2"),
            SweepSolver(label="rk4", kind="rk4"),
            SweepSolver(label="learned", kind="bespoke", schemes=schemes, base_kind="rk2"),
        ]
        report = sweep(gmm_field, solvers, [8, 16], x0, endpoints=ends)
        assert len(report.rows) == 8
        for row in report.rows:
            assert row.nfe_actual == row.nfe
            assert np.isfinite(row.psnr_db)
        by = {(r.solver, r.nfe): r for r in report.rows}
        assert by[("euler", 8)].steps == 8
        assert by[("midpoint", 8)].steps == 4
        assert by[("rk4", 8)].steps == 2
        assert by[("learned", 16)].steps == 8
        # identity bespoke runs the same arithmetic as the plain method
        assert np.isclose(by[("learned", 16)].rmse, by[("midpoint", 16)].rmse, rtol=1e-9)
        assert by[("midpoint", 16)].rmse < by[("midpoint", 8)].rmse
        json.dumps(report.to_json_dict())

    def test_config_errors(self, gmm_field):
        x0 = np.zeros((2, 2))
        ends = np.zeros((2, 2))
        with pytest.raises(ConfigError):
            sweep(gmm_field, [SweepSolver(label="rk4", kind="rk4")], [6], x0, endpoints=ends)
        schemes = {4: materialize(identity_params("rk2", 8))}
        bad = SweepSolver(label="learned", kind="bespoke", schemes=schemes, base_kind="rk2")
        with pytest.raises(ConfigError):
            sweep(gmm_field, [bad], [8], x0, endpoints=ends)
        none_registered = SweepSolver(label="learned", kind="bespoke", schemes={}, base_kind="rk2")
        with pytest.raises(ConfigError):
            sweep(gmm_field, [none_registered], [8], x0, endpoints=ends)
