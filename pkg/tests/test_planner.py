"""Tests for the latent-space MPPI planner and its cost machinery."""

import numpy as np
import pytest

from mcmppi.codec import AnalyticChart
from mcmppi.kinematics import load_model, planar_constraint_batch, planar_fk_batch
from mcmppi.planner import (
    CostWeights,
    PlannerConfig,
    SceneSnapshot,
    evaluate_cost,
    importance_weights,
    plan_step,
    rollout,
    sample_perturbations,
    vanilla_plan_step,
)


@pytest.fixture(scope="module")
def planar():
    return load_model("planar_dual_3r")


@pytest.fixture(scope="module")
def chart(planar):
    return AnalyticChart(planar)


def make_cfg(**kw):
    base = dict(K=8, T=3, dt=0.01, lam=1.0, sigma=np.full(3, 0.2), R=np.full(3, 0.1))
    base.update(kw)
    return PlannerConfig(**base)


def make_scene(goal=(0.0, 0.35, 0.0), **kw):
    return SceneSnapshot(goal=np.asarray(goal, float), **kw)


class StubDecoder:
    """Maps any latent point to one fixed configuration (for latent-only
    integration checks)."""

    def __init__(self, q):
        self.q = np.asarray(q, float)
        self.latent_dim = 1

    def decode_total(self, Z):
        Q = np.broadcast_to(self.q, (Z.shape[0], self.q.size)).copy()
        return Q, np.ones(Z.shape[0], dtype=bool)


class TestConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            make_cfg(K=0)
        with pytest.raises(ValueError):
            make_cfg(dt=0.0)
        with pytest.raises(ValueError):
            make_cfg(lam=-1.0)
        with pytest.raises(ValueError):
            make_cfg(sampling_mode="bogus")

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            CostWeights(w_coll=-1.0)


class TestSamplePerturbations:
    def test_zero_sigma_gives_zero_noise(self):
        cfg = make_cfg(sigma=np.zeros(3))
        for k in range(cfg.K):
            assert np.all(sample_perturbations(cfg, seed=1, k=k) == 0.0)

    def test_single_instance_constant_over_horizon(self):
        cfg = make_cfg(T=4, sampling_mode="single_instance")
        e = sample_perturbations(cfg, seed=2, k=3)
        assert np.array_equal(e[0], e[-1])
        assert np.array_equal(e[1], e[2])

    def test_per_step_varies_over_horizon(self):
        cfg = make_cfg(T=4, sampling_mode="per_step")
        e = sample_perturbations(cfg, seed=2, k=3)
        assert not np.array_equal(e[0], e[1])

    def test_scheduling_independence(self):
        # the draw for sample k must not depend on evaluation order
        cfg = make_cfg(K=8)
        forward = [sample_perturbations(cfg, 3, k) for k in range(8)]
        backward = [sample_perturbations(cfg, 3, k) for k in reversed(range(8))]
        for k in range(8):
            assert np.array_equal(forward[k], backward[7 - k])

    def test_iteration_decorrelates(self):
        cfg = make_cfg()
        a = sample_perturbations(cfg, 4, 0, iteration=0)
        b = sample_perturbations(cfg, 4, 0, iteration=1)
        assert not np.array_equal(a, b)

    def test_empirical_covariance_matches_sigma(self):
        # 1e5 draws: K=1000 samples x T=100 per-step rows
        sigma = np.array([0.3, 0.1, 0.5])
        cfg = make_cfg(K=1000, T=100, sigma=sigma, sampling_mode="per_step")
        draws = np.concatenate(
            [sample_perturbations(cfg, 5, k) for k in range(cfg.K)]
        )
        assert draws.shape == (100000, 3)
        var = draws.var(axis=0)
        assert np.all(np.abs(var - sigma ** 2) / sigma ** 2 < 0.05)
        assert np.all(np.abs(draws.mean(axis=0)) < 0.05 * sigma)


class TestImportanceWeights:
    def test_sum_to_one(self):
        rng = np.random.default_rng(40)
        for _ in range(20):
            w = importance_weights(rng.uniform(0, 100, 64), lam=0.7)
            assert abs(w.sum() - 1.0) <= 1e-12
            assert np.all(w >= 0.0)

    def test_equal_costs_uniform(self):
        w = importance_weights(np.full(10, 3.7), lam=0.5)
        assert np.allclose(w, 0.1, atol=1e-15)

    def test_argmin_limit(self):
        w = importance_weights(np.array([5.0, 1.0, 9.0]), lam=1e-12)
        assert abs(w[1] - 1.0) < 1e-9

    def test_three_cost_arithmetic(self):
        w = importance_weights(np.array([1.0, 2.0, 4.0]), lam=1.0)
        ref = np.array([np.exp(0.0), np.exp(-1.0), np.exp(-3.0)])
        assert np.allclose(w, ref / ref.sum(), atol=1e-15)

    def test_shift_invariance_exact(self):
        costs = np.array([3.0, 8.0, 5.5, 3.25])
        a = importance_weights(costs, lam=0.9)
        b = importance_weights(costs + 100.0, lam=0.9)
        # min-shift form: adding a constant changes nothing, bit for bit,
        # whenever the shifted differences are exact (they are here)
        assert np.array_equal(a, b)

    def test_entropy_nondecreasing_in_lambda(self):
        costs = np.array([1.0, 2.0, 2.5, 7.0, 0.3])
        prev = -np.inf
        for lam in (0.05, 0.2, 1.0, 5.0, 50.0):
            w = importance_weights(costs, lam)
            ent = -np.sum(w * np.log(np.maximum(w, 1e-300)))
            assert ent >= prev - 1e-12
            prev = ent


class TestEvaluateCost:
    def test_global_minimum_all_terms_zero(self, planar, chart):
        q = planar.q_neutral
        weights = CostWeights(q_neutral=planar.q_neutral)
        scene = make_scene(goal=chart.encode(q))
        out = evaluate_cost(weights, planar, make_cfg(), q, np.zeros(3), scene)
        for term, v in out.items():
            assert v == pytest.approx(0.0, abs=1e-18), term

    def test_collision_hinge_boundary(self, planar, chart):
        q = chart.decode(np.array([0.0, 0.35, 0.0]))
        weights = CostWeights(q_neutral=planar.q_neutral, margin=0.02)
        fk = planar_fk_batch(planar, q[None])
        low = int(np.argmin(fk["spheres"][0][:, 1]))
        center = fk["spheres"][0, low]
        r_sph = fk["sphere_radii"][low]
        cfg = make_cfg()
        # obstacle just beyond its margin distance below the lowest sphere
        far = center - np.array([0.0, r_sph + 0.05 + 0.02 + 1e-6])
        out = evaluate_cost(
            weights, planar, cfg, q, np.zeros(3),
            make_scene(obstacle_centers=far[None], obstacle_radii=np.array([0.05])),
        )
        assert out["coll"] == 0.0
        # obstacle at half the margin distance: positive cost
        near = center - np.array([0.0, r_sph + 0.05 + 0.01])
        out = evaluate_cost(
            weights, planar, cfg, q, np.zeros(3),
            make_scene(obstacle_centers=near[None], obstacle_radii=np.array([0.05])),
        )
        assert out["coll"] > 0.0

    def test_breakdown_matches_expression_oracle(self, planar, chart):
        """Re-derive each term with one independent flat expression."""
        rng = np.random.default_rng(41)
        weights = CostWeights(q_neutral=planar.q_neutral, margin=0.02, vel_limit=0.6)
        cfg = make_cfg()
        for _ in range(10):
            q = rng.uniform(planar.q_lb - 0.1, planar.q_ub + 0.1)
            u = rng.uniform(-1.0, 1.0, 3)
            obs_c = rng.uniform(-0.5, 0.5, (2, 2))
            obs_r = rng.uniform(0.02, 0.08, 2)
            scene = make_scene(
                goal=rng.uniform(-0.3, 0.3, 3),
                obstacle_centers=obs_c,
                obstacle_radii=obs_r,
            )
            got = evaluate_cost(weights, planar, cfg, q, u, scene)

            fk = planar_fk_batch(planar, q[None])
            tray = fk["tray"][0]
            da = np.arctan2(
                np.sin(tray[2] - scene.goal[2]), np.cos(tray[2] - scene.goal[2])
            )
            track = weights.w_track * (
                (tray[0] - scene.goal[0]) ** 2 + (tray[1] - scene.goal[1]) ** 2 + da ** 2
            )
            spheres, radii = fk["spheres"][0], fk["sphere_radii"]
            coll = 0.0
            for c, r in zip(spheres, radii):
                for oc, orr in zip(obs_c, obs_r):
                    pen = max(weights.margin + r + orr - np.linalg.norm(c - oc), 0.0)
                    coll += pen * pen
            for i in range(5):
                for j in range(5, 10):
                    pen = max(
                        weights.margin + radii[i] + radii[j]
                        - np.linalg.norm(spheres[i] - spheres[j]),
                        0.0,
                    )
                    coll += pen * pen
            coll *= weights.w_coll
            reg = 0.5 * float(np.sum(cfg.R * u * u))
            limit = weights.w_limit * (
                float(np.sum(np.maximum(q - planar.q_ub, 0.0) ** 2))
                + float(np.sum(np.maximum(planar.q_lb - q, 0.0) ** 2))
                + max(np.linalg.norm(u) - weights.vel_limit, 0.0) ** 2
            )
            neutral = weights.w_neutral * float(
                np.sum((q - planar.q_neutral) ** 2)
            )
            for name, want in (
                ("track", track), ("coll", coll), ("reg", reg),
                ("limit", limit), ("neutral", neutral),
            ):
                assert got[name] == pytest.approx(want, abs=1e-12), name


class TestRollout:
    def test_stationary_rollout(self, planar, chart):
        z0 = np.array([0.0, 0.35, 0.0])
        cfg = make_cfg(T=4)
        weights = CostWeights(q_neutral=planar.q_neutral)
        res = rollout(
            cfg, weights, planar, chart, z0,
            np.zeros((4, 3)), np.zeros((4, 3)), make_scene(goal=z0),
        )
        assert np.allclose(res.latent, z0)
        assert np.allclose(res.joints, res.joints[0])
        assert res.breakdown["reg"] == 0.0

    def test_hand_computed_two_step_latent(self, planar):
        # scalar latent, u = (1.0, -1.0), dt = 0.01, constant noise 0.5:
        # z1 = z0 + 1.5*0.01, z2 = z1 - 0.5*0.01
        z0 = np.array([0.2])
        cfg = make_cfg(T=2, sigma=np.array([0.3]), R=np.array([0.1]))
        dec = StubDecoder(planar.q_neutral)
        weights = CostWeights(q_neutral=planar.q_neutral)
        U = np.array([[1.0], [-1.0]])
        pert = np.full((2, 1), 0.5)
        res = rollout(cfg, weights, planar, dec, z0, U, pert, make_scene())
        assert res.latent[0, 0] == pytest.approx(0.2 + 0.015, abs=1e-15)
        assert res.latent[1, 0] == pytest.approx(0.2 + 0.010, abs=1e-15)

    def test_cost_equals_breakdown_sum_and_resummation(self, planar, chart):
        rng = np.random.default_rng(42)
        cfg = make_cfg(T=4)
        weights = CostWeights(q_neutral=planar.q_neutral, vel_limit=0.6)
        scene = make_scene(
            goal=np.array([0.1, 0.33, 0.1]),
            obstacle_centers=np.array([[0.0, 0.5]]),
            obstacle_radii=np.array([0.05]),
        )
        z0 = np.array([0.0, 0.35, 0.0])
        U = rng.uniform(-0.5, 0.5, (4, 3))
        pert = rng.uniform(-0.2, 0.2, (4, 3))
        res = rollout(cfg, weights, planar, chart, z0, U, pert, scene)
        assert res.cost == pytest.approx(sum(res.breakdown.values()), abs=1e-9)
        # independent re-summation: evaluate each stage with the scalar
        # path and re-apply the terminal upweight at the horizon end
        total = 0.0
        for t in range(4):
            terms = evaluate_cost(
                weights, planar, cfg, res.joints[t], U[t] + pert[t], scene
            )
            stage = sum(terms.values())
            if t == 3:
                stage += weights.terminal_scale * terms["track"]
            total += stage
        assert res.cost == pytest.approx(total, rel=1e-12)

    def test_single_instance_trajectory_affine_in_t(self, planar, chart):
        cfg = make_cfg(T=6, sampling_mode="single_instance")
        z0 = np.array([0.0, 0.35, 0.0])
        pert = sample_perturbations(cfg, seed=7, k=0)
        U = np.tile(np.array([0.1, -0.05, 0.2]), (6, 1))
        weights = CostWeights(q_neutral=planar.q_neutral)
        res = rollout(cfg, weights, planar, chart, z0, U, pert, make_scene())
        slope = (U[0] + pert[0]) * cfg.dt
        for t in range(6):
            assert np.allclose(res.latent[t], z0 + (t + 1) * slope, atol=1e-14)


def flat_loop_plan_oracle(cfg, weights, model, decoder, z_c, U_nominal, scene, seed):
    """Straight-line reference: one python loop per sample, scalar
    accumulation of the weighted update in fixed index order."""
    costs = []
    U_all = []
    for k in range(cfg.K):
        pert = sample_perturbations(cfg, seed, k)
        res = rollout(cfg, weights, model, decoder, z_c, U_nominal, pert, scene)
        costs.append(res.cost)
        U_all.append(U_nominal + pert)
    w = importance_weights(np.array(costs), cfg.lam)
    U_star = np.zeros_like(U_nominal, dtype=float)
    for k in range(cfg.K):
        U_star = U_star + w[k] * U_all[k]
    z_star = z_c + U_star[0] * cfg.dt
    q_hat = decoder.decode_total(z_star[None])[0][0]
    U_shifted = np.vstack([U_star[1:], np.zeros((1, U_nominal.shape[1]))])
    return q_hat, z_star, U_shifted


class TestPlanStep:
    def test_zero_sigma_returns_nominal(self, planar, chart):
        cfg = make_cfg(sigma=np.zeros(3))
        z0 = np.array([0.0, 0.35, 0.0])
        U = np.tile(np.array([0.05, 0.0, -0.1]), (cfg.T, 1))
        weights = CostWeights(q_neutral=planar.q_neutral)
        q_hat, z_star, U_shifted, diag = plan_step(
            cfg, weights, planar, chart, z0, U, make_scene(), seed=0
        )
        assert np.allclose(z_star, z0 + U[0] * cfg.dt, atol=1e-15)
        assert np.allclose(U_shifted[:-1], U[1:], atol=1e-15)
        assert np.all(U_shifted[-1] == 0.0)

    def test_single_sample_weight_one(self, planar, chart):
        cfg = make_cfg(K=1)
        z0 = np.array([0.0, 0.35, 0.0])
        U = np.zeros((cfg.T, 3))
        weights = CostWeights(q_neutral=planar.q_neutral)
        pert = sample_perturbations(cfg, seed=5, k=0)
        _, z_star, U_shifted, _ = plan_step(
            cfg, weights, planar, chart, z0, U, make_scene(), seed=5
        )
        assert np.allclose(z_star, z0 + pert[0] * cfg.dt, atol=1e-15)
        assert np.allclose(U_shifted[:-1], pert[1:], atol=1e-15)

    def test_matches_flat_loop_oracle_bitwise(self, planar, chart):
        cfg = make_cfg(K=8, T=3)
        weights = CostWeights(q_neutral=planar.q_neutral, vel_limit=0.6)
        scene = make_scene(
            goal=np.array([0.1, 0.32, -0.1]),
            obstacle_centers=np.array([[0.0, 0.5]]),
            obstacle_radii=np.array([0.05]),
        )
        z0 = np.array([0.0, 0.35, 0.0])
        rng = np.random.default_rng(43)
        U = rng.uniform(-0.3, 0.3, (3, 3))
        q_hat, z_star, U_shifted, _ = plan_step(
            cfg, weights, planar, chart, z0, U, scene, seed=11
        )
        q_ref, z_ref, U_ref = flat_loop_plan_oracle(
            cfg, weights, planar, chart, z0, U, scene, seed=11
        )
        assert np.array_equal(z_star, z_ref)
        assert np.array_equal(U_shifted, U_ref)
        assert np.array_equal(q_hat, q_ref)

    def test_thread_count_does_not_change_result(self, planar, chart):
        weights = CostWeights(q_neutral=planar.q_neutral)
        z0 = np.array([0.0, 0.35, 0.0])
        scene = make_scene(goal=np.array([0.1, 0.3, 0.0]))
        out = []
        for threads in (1, 4):
            cfg = make_cfg(K=32, T=5, threads=threads)
            out.append(
                plan_step(cfg, weights, planar, chart, z0, np.zeros((5, 3)), scene, 9)
            )
        assert np.array_equal(out[0][1], out[1][1])
        assert np.array_equal(out[0][2], out[1][2])

    def test_diagnostics_fields(self, planar, chart):
        cfg = make_cfg()
        weights = CostWeights(q_neutral=planar.q_neutral)
        z0 = np.array([0.0, 0.35, 0.0])
        _, _, _, diag = plan_step(
            cfg, weights, planar, chart, z0, np.zeros((3, 3)), make_scene(), 1
        )
        for key in ("iteration", "min_cost", "mean_cost", "ess", "wall_ms",
                    "z_star", "z_reachable", "h_norm"):
            assert key in diag
        assert 1.0 <= diag["ess"] <= cfg.K


class TestVanillaPlanStep:
    def test_requires_joint_mode(self, planar):
        with pytest.raises(ValueError):
            vanilla_plan_step(
                make_cfg(), CostWeights(), planar, np.zeros(6),
                np.zeros((3, 3)), make_scene(), 0,
            )

    def test_penalty_value_matches_residual_oracle(self, planar, chart):
        rng = np.random.default_rng(44)
        q = chart.decode(np.array([0.0, 0.35, 0.0])) + rng.uniform(-0.05, 0.05, 6)
        cfg = make_cfg(sigma=np.full(6, 0.2), R=np.full(6, 0.1),
                       space_mode="joint_penalty")
        scene = make_scene()
        base = CostWeights(q_neutral=planar.q_neutral)
        pen = CostWeights(q_neutral=planar.q_neutral, w_h=20.0)
        u = rng.uniform(-0.3, 0.3, 6)
        off = evaluate_cost(base, planar, cfg, q, u, scene, penalize_residual=True)
        on = evaluate_cost(pen, planar, cfg, q, u, scene, penalize_residual=True)
        h = planar_constraint_batch(planar, q[None])[0]
        want = 20.0 * float(np.sum(h * h))
        assert on["limit"] - off["limit"] == pytest.approx(want, rel=1e-12)

    def test_on_manifold_penalty_zero(self, planar, chart):
        q = chart.decode(np.array([0.1, 0.33, -0.1]))
        cfg = make_cfg(sigma=np.full(6, 0.2), R=np.full(6, 0.1),
                       space_mode="joint_penalty")
        pen = CostWeights(q_neutral=planar.q_neutral, w_h=1e6)
        off = CostWeights(q_neutral=planar.q_neutral, w_h=0.0)
        scene = make_scene()
        a = evaluate_cost(pen, planar, cfg, q, np.zeros(6), scene,
                          penalize_residual=True)
        b = evaluate_cost(off, planar, cfg, q, np.zeros(6), scene,
                          penalize_residual=True)
        assert a["limit"] == pytest.approx(b["limit"], abs=1e-14)

    def test_zero_penalty_reduces_to_plain_joint_mppi(self, planar):
        # with w_h = 0 the residual penalty contributes nothing; the step
        # must match a run whose cost machinery never evaluates h at all
        cfg = make_cfg(K=6, T=3, sigma=np.full(6, 0.2), R=np.full(6, 0.1),
                       space_mode="joint_penalty")
        weights = CostWeights(q_neutral=planar.q_neutral, w_h=0.0)
        q0 = planar.q_neutral
        scene = make_scene(goal=np.array([0.05, 0.35, 0.0]))
        q_hat, U_shifted, diag = vanilla_plan_step(
            cfg, weights, planar, q0, np.zeros((3, 6)), scene, seed=2
        )
        costs = []
        samples = []
        for k in range(cfg.K):
            pert = sample_perturbations(cfg, 2, k)
            Uk = pert  # zero nominal
            qs = q0 + cfg.dt * np.cumsum(Uk, axis=0)
            total = 0.0
            for t in range(cfg.T):
                terms = evaluate_cost(weights, planar, cfg, qs[t], Uk[t], scene)
                stage = sum(terms.values())
                if t == cfg.T - 1:
                    stage += weights.terminal_scale * terms["track"]
                total += stage
            costs.append(total)
            samples.append(Uk)
        w = importance_weights(np.array(costs), cfg.lam)
        U_star = np.zeros((3, 6))
        for k in range(cfg.K):
            U_star = U_star + w[k] * samples[k]
        assert np.allclose(q_hat, q0 + U_star[0] * cfg.dt, atol=1e-12)


class TestSceneSnapshot:
    def test_frozen_horizon_centers_constant(self):
        scene = make_scene(
            obstacle_centers=np.array([[0.1, 0.4]]),
            obstacle_radii=np.array([0.05]),
            obstacle_velocities=np.array([[0.0, -1.0]]),
            prediction="frozen",
        )
        c = scene.horizon_centers(4, 0.01)
        assert c.shape == (4, 1, 2)
        assert np.all(c == np.array([0.1, 0.4]))

    def test_extrapolated_horizon_centers_advance(self):
        scene = make_scene(
            obstacle_centers=np.array([[0.1, 0.4]]),
            obstacle_radii=np.array([0.05]),
            obstacle_velocities=np.array([[0.0, -1.0]]),
            prediction="extrapolated",
        )
        c = scene.horizon_centers(3, 0.01)
        assert np.allclose(c[:, 0, 1], [0.39, 0.38, 0.37], atol=1e-12)
