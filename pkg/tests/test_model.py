import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from core.errors import ContractError, DataConsistencyError
from core.model import (
    LatentEffects,
    ModelOptions,
    ModelState,
    OccupancyModel,
    VisitCodes,
    build_layout,
    detection_logit,
    log_prior,
    occupancy_logit,
    site_year_loglik,
    sum_to_zero_inverse,
    sum_to_zero_transform,
)
from core.records import LL_CLASSES, ListLengthClass
from core.sim import SimulationDesign, simulate_dataset

from conftest import SMALL_OPTIONS, TINY_ROWS, make_prepared

NO_PHENOLOGY = ModelOptions(phenology=False, spline_n=4, trend_spline_n=4)


def _effects(S=1, T=1, O=1, **kw) -> LatentEffects:
    base = dict(
        b_obs=np.zeros(O),
        f_phen=np.zeros(53),
        delta=np.zeros(T),
        upsilon=np.zeros(S),
        varsigma=np.zeros(S),
        upsilon_unstr=np.zeros(S),
        upsilon_str=np.zeros(S),
    )
    base.update({k: np.asarray(v, dtype=float) for k, v in kw.items()})
    return LatentEffects(**base)


def _theta(model: OccupancyModel, seed: int, scale: float = 0.5) -> np.ndarray:
    """随机无约束状态，长度尺度固定在 0.7 附近，保持核矩阵条件数温和"""
    theta = np.random.default_rng(seed).normal(scale=scale, size=model.dim)
    for i, name in enumerate(model.unconstrained_names):
        if name.startswith("ell_"):
            theta[i] = math.log(0.7)
    return theta


LENGTH_RANGES = {"ell_phen": (0.06, 0.14), "ell_delta": (0.3, 1.0), "ell_w": (0.3, 1.0), "ell_v": (0.3, 1.0)}


def _random_lengths(model: OccupancyModel, theta: np.ndarray, seed: int) -> np.ndarray:
    """长度尺度随机取在核矩阵良态的区间内（53 周周期核在 l≈1 时数值上秩亏）"""
    rng = np.random.default_rng(seed)
    theta = theta.copy()
    for i, name in enumerate(model.unconstrained_names):
        block = name.split("__")[0]
        if block in LENGTH_RANGES:
            lo, hi = LENGTH_RANGES[block]
            theta[i] = rng.uniform(math.log(lo), math.log(hi))
    return theta


def _index_of(model: OccupancyModel, name: str) -> int:
    return model.unconstrained_names.index(name)


class TestSiteYearLoglik:
    def test_confirmed_single_detection(self):
        assert site_year_loglik(1, [1], [0.5], 0.5) == pytest.approx(math.log(0.25))
        assert site_year_loglik(1, [1], [0.5], 0.5) == pytest.approx(-1.38629, abs=1e-5)

    def test_unconfirmed_no_visits(self):
        assert site_year_loglik(0, [], [], 0.3) == pytest.approx(0.0)

    def test_unconfirmed_two_visits(self):
        assert site_year_loglik(0, [0, 0], [0.3, 0.4], 0.6) == pytest.approx(math.log(0.652))
        assert site_year_loglik(0, [0, 0], [0.3, 0.4], 0.6) == pytest.approx(-0.42771, abs=1e-5)

    def test_confirmed_without_detection_allowed(self):
        # a=1 可以来自非熟练观察者的审核记录
        expected = math.log(0.7) + math.log(0.8) + math.log(0.9)
        assert site_year_loglik(1, [0, 0], [0.2, 0.1], 0.7) == pytest.approx(expected)

    def test_inconsistent_cell(self):
        with pytest.raises(DataConsistencyError):
            site_year_loglik(0, [0, 1], [0.3, 0.4], 0.6)

    @pytest.mark.parametrize("seed", range(5))
    def test_enumerates_latent_state(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.05, 0.95, 4)
        psi = rng.uniform(0.05, 0.95)
        y = (rng.uniform(size=4) < 0.5).astype(int)
        lik_z1 = psi * np.prod(np.where(y == 1, p, 1 - p))
        assert math.exp(site_year_loglik(1, y, p, psi)) == pytest.approx(lik_z1, rel=1e-12)
        zeros = np.zeros(4, dtype=int)
        lik = (1 - psi) + psi * np.prod(1 - p)
        assert math.exp(site_year_loglik(0, zeros, p, psi)) == pytest.approx(lik, rel=1e-12)

    def test_unconfirmed_limits(self):
        p = [0.3, 0.6]
        assert 0 < math.exp(site_year_loglik(0, [0, 0], p, 0.5)) <= 1
        assert site_year_loglik(0, [0, 0], p, 1e-14) == pytest.approx(0.0, abs=1e-12)
        assert site_year_loglik(0, [0, 0], p, 1 - 1e-14) == pytest.approx(math.log(0.7 * 0.4), abs=1e-10)

    def test_permutation_and_negligible_visit(self):
        base = site_year_loglik(0, [0, 0, 0], [0.1, 0.5, 0.8], 0.4)
        assert site_year_loglik(0, [0, 0, 0], [0.8, 0.1, 0.5], 0.4) == pytest.approx(base, abs=1e-14)
        assert site_year_loglik(0, [0, 0, 0, 0], [0.1, 0.5, 0.8, 1e-12], 0.4) == pytest.approx(base, abs=1e-9)


class TestLinearPredictors:
    def test_detection_all_zero(self):
        eta = detection_logit(VisitCodes(ListLengthClass.L1, 0, 1), {"beta0_p": 0.0, "beta_p": [0.0, 0.0]}, _effects())
        assert eta == 0.0
        assert 1 / (1 + math.exp(-eta)) == 0.5

    def test_detection_list_length(self):
        state = {"beta0_p": -1.0, "beta_p": [0.0, 2.0]}
        assert detection_logit(VisitCodes(ListLengthClass.L4PLUS, 0, 5), state, _effects()) == pytest.approx(1.0)

    def test_detection_hand_sum(self):
        f_phen = np.zeros(53)
        f_phen[26] = 1.5
        effects = _effects(O=2, b_obs=[0.0, 0.5], f_phen=f_phen)
        state = {"beta0_p": -2.0, "beta_p": [0.3, 0.0]}
        eta = detection_logit(VisitCodes(ListLengthClass.L2_3, 1, 27), state, effects)
        assert eta == pytest.approx(0.3)
        assert 1 / (1 + math.exp(-eta)) == pytest.approx(0.5744, abs=1e-4)

    def test_occupancy_intercept_only(self):
        state = {"beta0_psi": 0.7, "beta_psi": [0.0], "beta_delta": 0.0}
        assert occupancy_logit(0, 0, state, _effects(), [0.4], 0.3) == pytest.approx(0.7)

    def test_occupancy_midpoint_year(self):
        state = {"beta0_psi": 0.1, "beta_psi": [1.0], "beta_delta": 5.0}
        effects = _effects(varsigma=[3.0], upsilon=[0.2], delta=[0.4])
        assert occupancy_logit(0, 0, state, effects, [0.5], 0.0) == pytest.approx(0.1 + 0.5 + 0.2 + 0.4)


class TestSumToZero:
    def test_zero(self):
        assert np.allclose(sum_to_zero_transform(jnp.zeros(4)), 0.0)

    def test_sums_to_zero(self):
        raw = np.random.default_rng(3).normal(size=11)
        out = np.asarray(sum_to_zero_transform(raw))
        assert out.shape == (12,)
        assert abs(out.sum()) <= 1e-12

    def test_isometry_and_inverse(self):
        raw = np.random.default_rng(4).normal(size=6)
        out = np.asarray(sum_to_zero_transform(raw))
        assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(raw))
        assert np.allclose(sum_to_zero_inverse(out), raw)

    def test_unit_marginal_variance(self):
        raw = jax.random.normal(jax.random.PRNGKey(0), (100_000, 9), dtype=jnp.float64) * math.sqrt(10 / 9)
        out = np.asarray(jax.vmap(sum_to_zero_transform)(raw))
        sd = out.std(axis=0)
        assert ((sd >= 0.98) & (sd <= 1.02)).all()

    def test_too_short(self):
        with pytest.raises(ContractError):
            sum_to_zero_transform(jnp.zeros(0))
        with pytest.raises(ContractError):
            sum_to_zero_inverse([1.0])


class TestLogPrior:
    @pytest.fixture
    def layout(self):
        options = ModelOptions(phenology=False, temporal_gp=False, spatial=False, trend_surface=False)
        return build_layout(3, 2, 3, 1, 0, 0, 0, options)

    def test_zero_state(self, layout):
        c = -0.5 * math.log(2 * math.pi)
        normals = 6 * (c - math.log(3.0))
        scales = 2 * (math.log(2.0) + c - math.log(3.0) - 1 / 18)
        zerosum = 3 * (c - 0.5 * math.log(1.5)) + 2 * (c - 0.5 * math.log(2.0))
        assert log_prior(np.zeros(layout.dim), layout) == pytest.approx(normals + scales + zerosum)

    def test_intercept_shift(self, layout):
        theta = np.zeros(layout.dim)
        base = log_prior(theta, layout)
        theta[layout.unconstrained_names.index("beta0_psi__u")] = 3.0
        assert log_prior(theta, layout) - base == pytest.approx(-0.5)

    def test_spatial_signal_is_flat(self):
        layout = build_layout(2, 2, 3, 1, 0, 0, 0, ModelOptions(phenology=False, trend_surface=False))
        k = layout.unconstrained_names.index("p_mix__u")
        theta = np.zeros(layout.dim)
        base = log_prior(theta, layout)
        theta[k] = 1.0
        jac = (math.log(1 / (1 + math.exp(-1))) + math.log(1 / (1 + math.exp(1)))) - 2 * math.log(0.5)
        assert log_prior(theta, layout) - base == pytest.approx(jac)


class TestLayout:
    def test_names(self, tiny_model):
        names = tiny_model.names
        assert names[:4] == ["beta0_p", "beta_p[0]", "beta_p[1]", "sigma_obs"]
        assert "b_obs_raw[2]" in names
        assert "b_obs_raw__u[2]" not in tiny_model.unconstrained_names
        assert len(names) == tiny_model.layout.constrained_dim
        assert len(tiny_model.unconstrained_names) == tiny_model.dim

    def test_disabled_terms_drop_blocks(self, tiny_prepared):
        model = OccupancyModel(tiny_prepared, ModelOptions(phenology=False, spatial=False, trend_surface=False))
        assert not model.layout.has("z_phen_raw")
        assert not model.layout.has("p_mix")
        assert model.layout.has("delta_iid_raw")

    def test_zero_sum_scope_all(self, tiny_prepared):
        model = OccupancyModel(tiny_prepared, SMALL_OPTIONS.model_copy(update={"zero_sum_scope": "all"}))
        assert model.layout.block("z_delta_raw").kind == "zerosum"
        assert model.layout.block("z_delta_raw").raw_size == 1


class TestLikelihoodIndex:
    def test_cells(self, tiny_model):
        idx = tiny_model.index
        assert list(zip(idx.cell_site, idx.cell_year)) == [(0, 0), (1, 1), (2, 0)]
        assert idx.cell_a.tolist() == [1, 0, 0]
        assert (idx.cell_stop - idx.cell_start).tolist() == [2, 1, 2]
        assert idx.observers == ["obsA", "obsB", "obsC"]

    def test_confirmed_cell_without_visits_kept(self):
        a = np.zeros((3, 2), dtype=np.int8)
        a[0, 0] = 1
        a[2, 1] = 1
        model = OccupancyModel(make_prepared(TINY_ROWS, a), NO_PHENOLOGY)
        assert model.index.n_cells == 4
        table = model.cell_loglik_table(_theta(model, 0))
        assert table.loc[table["site_id"] == 2].set_index("year").loc[2021, "n_visits"] == 0

    def test_inconsistent_data(self):
        with pytest.raises(DataConsistencyError):
            OccupancyModel(make_prepared(TINY_ROWS, np.zeros((3, 2), dtype=np.int8)), SMALL_OPTIONS)


class TestLogPosterior:
    def test_empty_data_is_prior(self):
        model = OccupancyModel(make_prepared([], np.zeros((3, 2), dtype=np.int8)), SMALL_OPTIONS)
        assert model.index.n_cells == 0
        theta = _theta(model, 1)
        assert model.log_posterior(theta) == pytest.approx(log_prior(theta, model.layout))

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_composed_terms(self, tiny_model, seed):
        theta = _theta(tiny_model, seed)
        state = tiny_model.constrain(theta)
        effects = tiny_model.effects(state)
        idx = tiny_model.index
        sites = tiny_model.prepared.sites
        total = log_prior(theta, tiny_model.layout)
        for c in range(idx.n_cells):
            s, t = int(idx.cell_site[c]), int(idx.cell_year[c])
            visits = range(idx.cell_start[c], idx.cell_stop[c])
            p = [
                1 / (1 + math.exp(-detection_logit(
                    VisitCodes(LL_CLASSES[idx.visit_ll[v]], int(idx.visit_obs[v]), int(idx.visit_week[v])), state, effects
                )))
                for v in visits
            ]
            eta = occupancy_logit(s, t, state, effects, sites.X[s], tiny_model.tstar[t])
            total += site_year_loglik(int(idx.cell_a[c]), idx.visit_y[list(visits)], p, 1 / (1 + math.exp(-eta)))
        assert tiny_model.log_posterior(theta) == pytest.approx(total, abs=1e-9)

    def test_cell_table_sums_to_likelihood(self, tiny_model):
        theta = _theta(tiny_model, 7)
        table = tiny_model.cell_loglik_table(theta)
        assert list(table.columns) == ["site_id", "year", "a", "n_visits", "loglik"]
        expected = tiny_model.log_posterior(theta) - log_prior(theta, tiny_model.layout)
        assert table["loglik"].sum() == pytest.approx(expected, abs=1e-9)
        assert tiny_model.explain(theta) is None

    def test_raw_blocks_zero_reduce_to_fixed_effects(self, tiny_model):
        theta = np.zeros(tiny_model.dim)
        theta[_index_of(tiny_model, "beta0_psi__u")] = 0.4
        theta[_index_of(tiny_model, "beta_psi__u[0]")] = -1.2
        theta[_index_of(tiny_model, "beta_delta__u")] = 0.8
        logits = tiny_model.occupancy_logits(tiny_model.constrain(theta))
        X = tiny_model.prepared.sites.X[:, 0]
        expected = 0.4 - 1.2 * X[:, None] + 0.8 * tiny_model.tstar[None, :]
        assert np.allclose(logits, expected)

    def test_full_mixing_ignores_unstructured(self, tiny_model):
        state = tiny_model.constrain(_theta(tiny_model, 2))
        state.values["p_mix"] = np.float64(1.0)
        before = tiny_model.occupancy_logits(state)
        state.values["z_unstr_raw"] = np.array([3.0, -1.0, -2.0])
        assert np.allclose(tiny_model.occupancy_logits(state), before)

    def test_state_round_trip(self, tiny_model):
        theta = _theta(tiny_model, 5)
        state = tiny_model.constrain(theta)
        assert abs(np.sum(state["b_obs_raw"])) <= 1e-12
        assert np.allclose(tiny_model.unconstrain(state), theta)
        flat = state.to_flat()
        assert np.allclose(ModelState.from_flat(flat, tiny_model.layout).to_unconstrained(), theta)

    def test_constrain_draws(self, tiny_model):
        thetas = np.stack([_theta(tiny_model, s) for s in range(6)]).reshape(2, 3, tiny_model.dim)
        flat = tiny_model.constrain_draws(thetas)
        assert flat.shape == (2, 3, tiny_model.layout.constrained_dim)
        assert np.allclose(flat[1, 2], tiny_model.constrain(thetas[1, 2]).to_flat())

    def test_conditional_occupancy(self, tiny_model):
        state = tiny_model.constrain(_theta(tiny_model, 4))
        cond = tiny_model.conditional_occupancy(state)
        psi = tiny_model.occupancy_probability(state)
        assert cond.shape == (3, 2)
        assert cond[0, 0] == pytest.approx(1.0)
        # 没有访问的格子保持先验 ψ；有未探测访问的格子被压低
        assert cond[1, 0] == pytest.approx(psi[1, 0])
        assert cond[2, 0] < psi[2, 0]


class TestGradient:
    @pytest.fixture
    def model(self, tiny_prepared):
        return OccupancyModel(tiny_prepared, NO_PHENOLOGY)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, model, seed):
        theta = _theta(model, 100 + seed)
        grad = model.grad_log_posterior(theta)
        h = 1e-5
        fd = np.empty(model.dim)
        for i in range(model.dim):
            e = np.zeros(model.dim)
            e[i] = h
            fd[i] = (model.logp_and_grad(theta + e)[0] - model.logp_and_grad(theta - e)[0]) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-6)

    @pytest.fixture(scope="class")
    def full_model(self):
        design = SimulationDesign(n_sites=5, n_years=3, n_observers=4, n_visits=30, seed=8)
        return OccupancyModel(simulate_dataset(design, options=SMALL_OPTIONS).prepared, SMALL_OPTIONS)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences_all_components(self, full_model, seed):
        theta = _random_lengths(full_model, np.random.default_rng(200 + seed).normal(scale=0.5, size=full_model.dim), seed)
        grad = full_model.grad_log_posterior(theta)
        h = 1e-5
        fd = np.empty(full_model.dim)
        for i in range(full_model.dim):
            e = np.zeros(full_model.dim)
            e[i] = h
            fd[i] = (full_model.logp_and_grad(theta + e)[0] - full_model.logp_and_grad(theta - e)[0]) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-5)
        assert grad[_index_of(full_model, "ell_phen__u")] != 0.0

    @pytest.mark.parametrize("ell", [1.0, 3.0, 7.0])
    def test_gradient_finite_with_smooth_phenology(self, full_model, ell):
        theta = _random_lengths(full_model, np.zeros(full_model.dim), 0)
        theta[_index_of(full_model, "ell_phen__u")] = math.log(ell)
        value, grad = full_model.logp_and_grad(theta)
        assert np.isfinite(value)
        assert np.all(np.isfinite(grad))

    def test_spatial_signal_flat_when_fields_coincide(self, model):
        theta = _theta(model, 9)
        for i, name in enumerate(model.unconstrained_names):
            if name.startswith(("z_unstr_raw", "z_w_raw")) or name == "p_mix__u":
                theta[i] = 0.0
        grad = model.grad_log_posterior(theta)
        assert grad[_index_of(model, "p_mix__u")] == pytest.approx(0.0, abs=1e-12)
