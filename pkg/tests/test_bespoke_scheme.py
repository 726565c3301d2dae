import json

import numpy as np
import pytest

from bespoke_ode.bespoke_scheme import (
    SCHEME_FORMAT_VERSION,
    SchemeParams,
    SmoothScheme,
    bespoke_rk1_step,
    bespoke_rk2_step,
    bespoke_rollout,
    bespoke_sample,
    identity_params,
    load_scheme,
    materialize,
    materialize_with_jacobian,
    random_scheme_params,
    random_smooth_scheme,
    save_scheme,
    step_theta,
    transformed_field_at_node,
)
from bespoke_ode.errors import DegenerateGridError, DivergenceError, SchemeFormatError
from bespoke_ode.ode_solvers import solve_fixed


class TestSchemeParams:
    def test_param_counts(self):
        assert identity_params("rk1", 5).n_params == 19
        assert identity_params("rk2", 5).n_params == 39
        assert identity_params("rk2", 5).segments == 10

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            SchemeParams(
                base_kind="rk1",
                n=3,
                theta_t=np.ones(3),
                theta_dt=np.ones(3),
                theta_s=np.zeros(3),
                theta_ds=np.zeros(3),
            )
        with pytest.raises(ValueError):
            identity_params("rk3", 4)
        with pytest.raises(ValueError):
            identity_params("rk1", 0)

    def test_vector_roundtrip(self):
        rng = np.random.default_rng(0)
        p = random_scheme_params(rng, "rk2", 3)
        vec = p.to_vector()
        assert vec.shape == (p.n_params,)
        back = SchemeParams.from_vector("rk2", 3, vec)
        assert np.array_equal(back.to_vector(), vec)
        with pytest.raises(ValueError):
            SchemeParams.from_vector("rk2", 3, vec[:-1])


class TestMaterialize:
    def test_identity_grids_are_uniform(self):
        g = materialize(identity_params("rk2", 4))
        assert np.array_equal(g.t, np.arange(9) / 8)
        assert np.all(g.dt == 1.0)
        assert np.all(g.s == 1.0)
        assert np.all(g.ds == 0.0)
        assert g.h == 0.25
        assert np.array_equal(g.nodes, np.arange(9) / 2)
        assert np.array_equal(g.step_times(), np.arange(5) / 4)

    def test_endpoints_pinned(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            g = materialize(random_scheme_params(rng, "rk2", 4))
            assert g.t[0] == 0.0
            assert g.t[-1] == 1.0
            assert g.s[0] == 1.0
            assert np.all(np.diff(g.t) > 0)

    def test_negative_increments_folded(self):
        p = identity_params("rk1", 3)
        vec = p.to_vector()
        vec[:2] = [-1.0, 1.0]
        g = materialize(SchemeParams.from_vector("rk1", 3, vec))
        assert np.array_equal(g.t, np.arange(4) / 3)

    def test_degenerate_grids_rejected(self):
        p = identity_params("rk1", 3)
        with pytest.raises(DegenerateGridError):
            vec = p.to_vector()
            vec[2] = 0.0
            materialize(SchemeParams.from_vector("rk1", 3, vec))
        with pytest.raises(DegenerateGridError):
            vec = p.to_vector()
            vec[0] = 1e12
            materialize(SchemeParams.from_vector("rk1", 3, vec))
        with pytest.raises(DegenerateGridError):
            vec = p.to_vector()
            vec[0] = np.nan
            materialize(SchemeParams.from_vector("rk1", 3, vec))


class TestGridJacobian:
    @pytest.mark.parametrize("base_kind,n", [("rk1", 3), ("rk2", 2)])
    def test_matches_central_differences(self, base_kind, n):
        rng = np.random.default_rng(2)
        params = random_scheme_params(rng, base_kind, n)
        vec = params.to_vector()
        grids, jac = materialize_with_jacobian(params)
        eps = 1e-6
        for m in range(vec.size):
            vp = vec.copy()
            vp[m] += eps
            vm = vec.copy()
            vm[m] -= eps
            gp = materialize(SchemeParams.from_vector(base_kind, n, vp))
            gm = materialize(SchemeParams.from_vector(base_kind, n, vm))
            for name in ("t", "dt", "s", "ds"):
                fd = (getattr(gp, name) - getattr(gm, name)) / (2 * eps)
                assert np.allclose(getattr(jac, name)[:, m], fd, atol=1e-6), (name, m)


class TestBespokeSteps:
    def test_identity_rollout_is_plain_solver(self, gmm_field):
        # dyadic n: grid nodes are exact floats, so comparison can be bitwise
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal((3, 2))
        for kind, n in (("rk1", 8), ("rk2", 8)):
            g = materialize(identity_params(kind, n))
            states = bespoke_rollout(g, gmm_field, x0)
            ref = solve_fixed(gmm_field, kind, n, x0, t_end=1.0)
            assert np.array_equal(states, ref.states), kind

    def test_sample_matches_rollout_endpoint(self, gmm_field):
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((3, 2))
        for kind in ("rk1", "rk2"):
            g = materialize(random_scheme_params(rng, kind, 5))
            end = bespoke_rollout(g, gmm_field, x0)[-1]
            samp = bespoke_sample(g, gmm_field, x0)
            assert np.allclose(samp, end, rtol=1e-11, atol=1e-13), kind

    def test_transformed_field_formula(self):
        g = materialize(identity_params("rk1", 2))
        object.__setattr__(g, "s", np.array([1.0, 2.0, 0.5]))
        object.__setattr__(g, "ds", np.array([0.3, -0.2]))
        object.__setattr__(g, "dt", np.array([1.5, 0.7]))
        f = lambda t, x: x + t
        x = np.array([4.0])
        want = (-0.2 / 2.0) * x + 0.7 * 2.0 * (x / 2.0 + g.t[1])
        assert np.allclose(transformed_field_at_node(g, 1, f, x), want, rtol=1e-15)
        with pytest.raises(IndexError):
            transformed_field_at_node(g, 2, f, x)

    def test_kind_guards(self, gmm_field):
        g1 = materialize(identity_params("rk1", 3))
        g2 = materialize(identity_params("rk2", 3))
        x = np.zeros(2)
        with pytest.raises(ValueError):
            bespoke_rk1_step(g2, 0, x, gmm_field)
        with pytest.raises(ValueError):
            bespoke_rk2_step(g1, 0, x, gmm_field)
        with pytest.raises(IndexError):
            step_theta(g1, 3, x, gmm_field)

    def test_divergence_guard(self):
        g = materialize(identity_params("rk1", 4))
        blowup = lambda t, x: 1e9 * (x + 1.0)
        with pytest.raises(DivergenceError) as exc:
            bespoke_rollout(g, blowup, np.ones(2))
        assert exc.value.step >= 1
        with pytest.raises(DivergenceError):
            bespoke_sample(g, blowup, np.ones(2))


class TestSmoothScheme:
    def test_identity_member(self):
        ident = SmoothScheme(
            t_fn=lambda r: np.asarray(r, dtype=float),
            dt_fn=lambda r: np.ones_like(np.asarray(r, dtype=float)),
            s_fn=lambda r: np.ones_like(np.asarray(r, dtype=float)),
            ds_fn=lambda r: np.zeros_like(np.asarray(r, dtype=float)),
        )
        g = ident.grids("rk2", 4)
        ref = materialize(identity_params("rk2", 4))
        assert np.allclose(g.t, ref.t, atol=1e-15)
        assert np.allclose(g.s, ref.s)

    def test_random_family_always_valid(self):
        # regression: monotone-cubic endpoint derivatives used to clip to
        # zero for sharp knot layouts and fail the positive-speed check
        for seed in range(50):
            scheme = random_smooth_scheme(np.random.default_rng(seed))
            for kind, n in (("rk1", 7), ("rk2", 5), ("rk2", 40)):
                g = scheme.grids(kind, n)
                assert g.t[0] == 0.0 and g.t[-1] == 1.0
                assert g.s[0] == 1.0
                assert np.all(g.dt > 0)
                assert np.all(np.diff(g.t) > 0)

    def test_consistent_discretization(self):
        # derivative grids must be samples of the same continuous maps
        scheme = random_smooth_scheme(np.random.default_rng(9))
        g = scheme.grids("rk1", 20)
        r = np.arange(20) / 20
        fd = (scheme.t_fn(r + 1e-7) - scheme.t_fn(r - 1e-7)) / 2e-7
        assert np.allclose(g.dt, fd, atol=1e-6)


class TestSchemeFiles:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        params = random_scheme_params(rng, "rk2", 4)
        path = tmp_path / "scheme.json"
        save_scheme(path, params, metadata={"note": "test", "iters": 12})
        back, meta = load_scheme(path)
        assert back.base_kind == "rk2"
        assert back.n == 4
        assert np.array_equal(back.to_vector(), params.to_vector())
        assert meta == {"note": "test", "iters": 12}

    def test_resave_byte_identical(self, tmp_path):
        params = identity_params("rk2", 3)
        p1 = tmp_path / "a.json"
        p2 = tmp_path / "b.json"
        save_scheme(p1, params, metadata={"k": 1})
        save_scheme(p2, params, metadata={"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_format_errors(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(SchemeFormatError):
            load_scheme(bad)
        bad.write_text("[1, 2]")
        with pytest.raises(SchemeFormatError):
            load_scheme(bad)
        bad.write_text(json.dumps({"format_version": 99}))
        with pytest.raises(SchemeFormatError):
            load_scheme(bad)
        doc = {"format_version": SCHEME_FORMAT_VERSION, "base_kind": "rk1", "n": 2}
        bad.write_text(json.dumps(doc))
        with pytest.raises(SchemeFormatError):
            load_scheme(bad)
