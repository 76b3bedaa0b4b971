import itertools

import numpy as np
import pytest

from cslam import factors as fa
from cslam import manifold as mf
from cslam import solver as sv
from cslam.factors import (
    between_factor,
    chi2_threshold,
    graduated,
    graduated_shape,
    landmark_key,
    point_prior_factor,
    pose_key,
    prior_factor,
)
from cslam.manifold import Pose
from cslam.solver import (
    DuplicateVariableError,
    FactorGraph,
    GaugeError,
    IncrementalSolver,
    SolverConfig,
    Values,
    optimize_batch,
    optimize_gnc,
)


def se2(x, y, th):
    return Pose.se2(x, y, th).raw()


def scalar_key(i):
    return fa.VariableKey(fa.ENV_OWNER, "l", i)


def robust_cost(graph, values):
    total = 0.0
    for f in graph.factors:
        r = (
            f.evaluate_residual(values)
            if hasattr(f, "evaluate_residual")
            else fa.residual(f, values)
        )
        total += float(fa.kernel_value(f.kernel, float(r @ r)))
    return total


def gauss_newton_oracle(graph, init, iters=100):
    """Dense Gauss-Newton reference with FD Jacobians; quadratic factors only."""
    values = init.copy()
    keys = sorted(graph.variables())
    offs, total = {}, 0
    for k in keys:
        n = mf.tangent_dim(values.dim) if k.kind == "p" else len(np.atleast_1d(values[k]))
        offs[k] = total
        total += n
    for _ in range(iters):
        j = np.zeros((0, total))
        r = np.zeros(0)
        for f in graph.factors:
            rf = fa.residual(f, values)
            jf = fa.jacobian_fd(f, values)
            block = np.zeros((len(rf), total))
            for k in f.keys:
                n = jf[k].shape[1]
                block[:, offs[k]: offs[k] + n] = jf[k]
            j = np.vstack([j, block])
            r = np.concatenate([r, rf])
        delta = np.linalg.lstsq(j, -r, rcond=None)[0]
        for k in keys:
            n = mf.tangent_dim(values.dim) if k.kind == "p" else len(np.atleast_1d(values[k]))
            values[k] = fa.retract_state(k, values[k], delta[offs[k]: offs[k] + n], values.dim)
        if np.linalg.norm(delta) < 1e-12:
            break
    return values


class TestOptimizeBatch:
    def test_two_scalar_priors_weighted_mean(self):
        g = FactorGraph()
        k = scalar_key(0)
        g.add(point_prior_factor(k, [0.0], [1.0]))
        g.add(point_prior_factor(k, [4.0], [1.0]))
        init = Values(2)
        init[k] = np.array([10.0])
        out = optimize_batch(g, init, SolverConfig(rel_decrease_tol=1e-14, grad_tol=1e-13))
        assert abs(out[k][0] - 2.0) < 1e-8

    def test_exact_odometry_chain(self):
        rng = np.random.default_rng(0)
        g = FactorGraph()
        init = Values(2)
        poses = [Pose.identity(2)]
        g.add(prior_factor(pose_key(0, 0), poses[0], [1e-4] * 3))
        for i in range(1, 6):
            rel = Pose.se2(1.0, 0.0, rng.uniform(-0.5, 0.5))
            poses.append(mf.compose(poses[-1], rel))
            g.add(between_factor(pose_key(0, i - 1), pose_key(0, i), rel, [0.01, 0.05, 0.05]))
        for i, p in enumerate(poses):
            init[pose_key(0, i)] = mf.compose(p, mf.exp_map(rng.normal(size=3) * 0.1)).raw()
        out = optimize_batch(g, init)
        for i, p in enumerate(poses):
            assert mf.local_distance(out.pose(pose_key(0, i)), p) < 1e-6
        assert robust_cost(g, out) < 1e-10

    def test_triangle_matches_gn_oracle(self):
        g = FactorGraph()
        init = Values(2)
        p0, p1, p2 = Pose.se2(0, 0, 0), Pose.se2(2, 0, np.pi / 2), Pose.se2(2, 2, np.pi)
        g.add(prior_factor(pose_key(0, 0), p0, [1e-3] * 3))
        g.add(between_factor(pose_key(0, 0), pose_key(0, 1),
                             mf.compose(mf.inverse(p0), p1), [0.02, 0.1, 0.1]))
        g.add(between_factor(pose_key(0, 1), pose_key(0, 2),
                             mf.compose(mf.inverse(p1), p2), [0.02, 0.1, 0.1]))
        noisy = mf.compose(mf.compose(mf.inverse(p0), p2), mf.exp_map([0.05, 0.1, -0.1]))
        g.add(between_factor(pose_key(0, 0), pose_key(0, 2), noisy, [0.02, 0.1, 0.1]))
        init[pose_key(0, 0)] = p0.raw()
        init[pose_key(0, 1)] = mf.compose(p1, mf.exp_map([0.1, 0.2, -0.2])).raw()
        init[pose_key(0, 2)] = mf.compose(p2, mf.exp_map([-0.1, 0.1, 0.2])).raw()
        out = optimize_batch(g, init)
        ref = gauss_newton_oracle(g, init)
        for i in range(3):
            assert mf.local_distance(out.pose(pose_key(0, i)), ref.pose(pose_key(0, i))) < 1e-6

    def test_unconstrained_gauge_errors(self):
        g = FactorGraph()
        g.add(between_factor(pose_key(0, 0), pose_key(0, 1), Pose.se2(1, 0, 0), [0.1] * 3))
        init = Values(2)
        init[pose_key(0, 0)] = se2(0, 0, 0)
        init[pose_key(0, 1)] = se2(1, 0, 0)
        with pytest.raises(GaugeError):
            optimize_batch(g, init)

    def test_missing_init_errors(self):
        g = FactorGraph()
        g.add(prior_factor(pose_key(0, 0), Pose.identity(2), [1.0] * 3))
        with pytest.raises(KeyError):
            optimize_batch(g, Values(2))

    def test_gradient_matches_finite_differences(self):
        # the assembled gradient is the exact gradient of the robust cost
        rng = np.random.default_rng(1)
        g = FactorGraph()
        init = Values(2)
        shape = graduated_shape(3)
        g.add(prior_factor(pose_key(0, 0), Pose.identity(2), [0.1, 0.5, 0.5]))
        for i in range(1, 4):
            g.add(
                between_factor(
                    pose_key(0, i - 1), pose_key(0, i), Pose.se2(1, 0, 0.2),
                    [0.05, 0.1, 0.1],
                    kernel=graduated(0.9, shape), outlier_candidate=True,
                )
            )
        for i in range(4):
            init[pose_key(0, i)] = se2(*rng.normal(size=3))

        probes = []

        def probe(gvec, offsets):
            probes.append((gvec.copy(), dict(offsets)))

        values = init.copy()
        sv._lm(g, values, set(g.variables()), set(range(len(g.factors))),
               SolverConfig(max_iterations=3), grad_probe=probe)
        gvec, offsets = probes[0]

        def cost_at(vals):
            total = 0.0
            for f in g.factors:
                r = fa.residual(f, vals)
                total += float(fa.kernel_value(f.kernel, float(r @ r), mu=0.9 if f.kernel.variant == "graduated" else None))
            return total

        h = 1e-6
        fd = np.zeros_like(gvec)
        base = init.copy()
        for k, off in offsets.items():
            for d in range(3):
                delta = np.zeros(3)
                delta[d] = h
                vp = base.copy()
                vp[k] = fa.retract_state(k, base[k], delta, 2)
                cp = cost_at(vp)
                vp[k] = fa.retract_state(k, base[k], -delta, 2)
                cm = cost_at(vp)
                fd[off + d] = (cp - cm) / (2 * h)
        assert np.linalg.norm(gvec - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4


def brute_force_max_consensus(candidate_values, sigmas, trusted_mean=None):
    """Exhaustive maximum-consensus over scalar prior subsets.

    Returns every maximum-size subset whose members are jointly consistent
    (squared whitened residual < chi2_1(0.95) at the subset's weighted mean).
    """
    n = len(candidate_values)
    thr = chi2_threshold(1, 0.95)
    best, best_size = [], -1
    for mask in itertools.product([0, 1], repeat=n):
        idx = [i for i in range(n) if mask[i]]
        if len(idx) < best_size:
            continue
        vals = [candidate_values[i] for i in idx]
        sigs = [sigmas[i] for i in idx]
        if trusted_mean is not None:
            vals = vals + [trusted_mean[0]]
            sigs = sigs + [trusted_mean[1]]
        if not vals:
            continue
        w = np.array([1.0 / s**2 for s in sigs])
        mean = float(np.dot(w, vals) / w.sum())
        ok = all(
            ((candidate_values[i] - mean) / sigmas[i]) ** 2 < thr for i in idx
        )
        if ok:
            if len(idx) > best_size:
                best, best_size = [set(idx)], len(idx)
            elif len(idx) == best_size:
                best.append(set(idx))
    return best


class TestOptimizeGNC:
    def _priors_graph(self, values_list, gross=None):
        g = FactorGraph()
        k = scalar_key(0)
        shape = graduated_shape(1)
        for v in values_list:
            g.add(point_prior_factor(k, [v], [1.0]))
        if gross is not None:
            g.add(
                point_prior_factor(k, [gross], [1.0],
                                   kernel=graduated(0.0, shape), outlier_candidate=True)
            )
        init = Values(2)
        init[k] = np.array([float(np.mean(values_list))])
        return g, init, k

    def test_no_candidates_identical_to_batch(self):
        g, init, k = self._priors_graph([0.0, 1.0, 2.0])
        out_b = optimize_batch(g, init)
        out_g, robust = optimize_gnc(g, init)
        assert abs(out_b[k][0] - out_g[k][0]) < 1e-12
        assert robust.inlier == {}

    def test_gross_outlier_rejected(self):
        # oracle: brute-force maximum-consensus confirms the 10 consistent priors
        g, init, k = self._priors_graph([0.0] * 10, gross=100.0)
        best = brute_force_max_consensus([0.0] * 10 + [100.0], [1.0] * 11)
        assert all(10 not in s for s in best)
        out, robust = optimize_gnc(g, init)
        assert abs(out[k][0]) < 0.05
        assert robust.inlier[10] is False

    def test_mild_disagreement_kept(self):
        g, init, k = self._priors_graph([0.0] * 10, gross=0.5)
        out, robust = optimize_gnc(g, init)
        # all residuals below chi2_1(0.95) at the joint optimum
        opt = out[k][0]
        assert ((0.5 - opt)) ** 2 < chi2_threshold(1, 0.95)
        assert all(robust.inlier[i] for i in robust.inlier)

    def test_matches_exhaustive_max_consensus(self):
        rng = np.random.default_rng(7)
        agree = 0
        trials = 40
        for _ in range(trials):
            n = int(rng.integers(6, 13))
            truth = rng.uniform(-5, 5)
            inlier_mask = rng.random(n) > 0.25
            vals = np.where(
                inlier_mask,
                truth + rng.normal(size=n) * 0.5,
                rng.uniform(-50, 50, size=n),
            )
            g = FactorGraph()
            k = scalar_key(0)
            shape = graduated_shape(1)
            g.add(point_prior_factor(k, [truth + rng.normal() * 0.2], [1.0]))
            for v in vals:
                g.add(point_prior_factor(k, [v], [1.0],
                                         kernel=graduated(0.0, shape), outlier_candidate=True))
            init = Values(2)
            init[k] = np.array([float(np.median(vals))])
            _, robust = optimize_gnc(g, init)
            got = {i - 1 for i, flag in robust.inlier.items() if flag}
            best = brute_force_max_consensus(list(vals), [1.0] * n)
            if any(got == s for s in best):
                agree += 1
        assert agree / trials >= 0.9


class TestIncremental:
    def _chain_graph(self, n, rng, loop=None):
        factors, truth = [], [Pose.identity(2)]
        factors.append(prior_factor(pose_key(0, 0), truth[0], [1e-4] * 3))
        for i in range(1, n):
            rel = Pose.se2(1.0, 0.0, rng.uniform(-0.6, 0.6))
            truth.append(mf.compose(truth[-1], rel))
            noisy = mf.compose(rel, mf.exp_map(rng.normal(size=3) * [0.01, 0.03, 0.03]))
            factors.append(
                between_factor(pose_key(0, i - 1), pose_key(0, i), noisy, [0.01, 0.03, 0.03])
            )
        return factors, truth

    def test_empty_update_is_fixed_point(self):
        inc = IncrementalSolver(2)
        inc.update([prior_factor(pose_key(0, 0), Pose.identity(2), [1.0] * 3)],
                   {pose_key(0, 0): se2(0.1, 0, 0)})
        before = inc.values[pose_key(0, 0)].copy()
        out = inc.update([], {})
        assert np.array_equal(out[pose_key(0, 0)], before)

    def test_duplicate_init_errors(self):
        inc = IncrementalSolver(2)
        inc.update([prior_factor(pose_key(0, 0), Pose.identity(2), [1.0] * 3)],
                   {pose_key(0, 0): se2(0, 0, 0)})
        with pytest.raises(DuplicateVariableError):
            inc.update([], {pose_key(0, 0): se2(0, 0, 0)})

    def test_append_matches_batch(self):
        rng = np.random.default_rng(3)
        factors, truth = self._chain_graph(12, rng)
        inc = IncrementalSolver(2)
        guess = Values(2)
        cur = Pose.identity(2)
        inits = {pose_key(0, 0): cur.raw()}
        guess[pose_key(0, 0)] = cur.raw()
        inc.update([factors[0]], dict(inits))
        for i, f in enumerate(factors[1:], start=1):
            cur = mf.compose(inc.values.pose(pose_key(0, i - 1)), Pose.from_raw(2, f.measurement))
            ini = {pose_key(0, i): cur.raw()}
            guess[pose_key(0, i)] = cur.raw()
            inc.update([f], ini)
        g = FactorGraph()
        g.extend(factors)
        batch = optimize_batch(g, guess)
        for i in range(12):
            d = mf.local_distance(inc.values.pose(pose_key(0, i)), batch.pose(pose_key(0, i)))
            assert d < 1e-3

    def test_one_new_odometry_factor_local_solve(self):
        rng = np.random.default_rng(4)
        factors, _ = self._chain_graph(10, rng)
        inc = IncrementalSolver(2)
        values_init = {}
        cur = Pose.identity(2)
        inc.update([factors[0]], {pose_key(0, 0): cur.raw()})
        for i, f in enumerate(factors[1:], start=1):
            cur = mf.compose(inc.values.pose(pose_key(0, i - 1)), Pose.from_raw(2, f.measurement))
            inc.update([f], {pose_key(0, i): cur.raw()})
        before = {k: inc.values[k].copy() for k in inc.values}
        # append one more odometry factor
        rel = Pose.se2(1.0, 0.0, 0.1)
        new_pose = mf.compose(inc.values.pose(pose_key(0, 9)), rel)
        f_new = between_factor(pose_key(0, 9), pose_key(0, 10), rel, [0.01, 0.03, 0.03])
        inc.update([f_new], {pose_key(0, 10): new_pose.raw()})
        g = FactorGraph()
        g.extend(factors + [f_new])
        guess = Values(2)
        for k, v in before.items():
            guess[k] = v
        guess[pose_key(0, 10)] = new_pose.raw()
        batch = optimize_batch(g, guess)
        for i in range(11):
            d = mf.local_distance(inc.values.pose(pose_key(0, i)), batch.pose(pose_key(0, i)))
            assert d < 1e-4

    def test_cvx_reconvexification_recovers_loop(self):
        # a correct loop closure rejected while its far endpoint is pinned by a
        # stale (wrong) constraint reclassifies inlier after corroborating
        # information arrives and its variables are re-convexified
        shape = graduated_shape(3)
        inc = IncrementalSolver(2)
        inc.update([prior_factor(pose_key(0, 0), Pose.identity(2), [1e-4] * 3)],
                   {pose_key(0, 0): se2(0, 0, 0)})
        neigh = pose_key(1, 0)
        true_neigh = Pose.se2(1.0, 0.0, 0.0)
        stale = prior_factor(neigh, Pose.se2(5.0, 5.0, 1.0), [0.01, 0.01, 0.01])
        loop = between_factor(
            pose_key(0, 0), neigh, true_neigh, [0.02, 0.05, 0.05],
            kernel=graduated(0.0, shape), outlier_candidate=True,
        )
        inc.update([stale, loop], {neigh: se2(5.0, 5.0, 1.0)})
        loop_idx = 2
        assert inc.robust.inlier[loop_idx] is False
        # corroborating information (a corrected, much tighter consensus pin)
        corroborate = prior_factor(neigh, true_neigh, [1e-4] * 3)
        inc.update([corroborate], {}, reelim={neigh}, cvx={neigh})
        assert inc.robust.inlier[loop_idx] is True
        g = FactorGraph()
        g.extend(inc.graph.factors)
        _, robust = optimize_gnc(g, inc.values)
        assert robust.inlier[loop_idx] is True

    def test_incremental_insertion_near_batch_50_vars(self):
        rng = np.random.default_rng(6)
        factors, truth = self._chain_graph(50, rng)
        # add a few intra loop closures
        for a, b in [(0, 30), (10, 40), (5, 45)]:
            rel = mf.compose(mf.inverse(truth[a]), truth[b])
            noisy = mf.compose(rel, mf.exp_map(rng.normal(size=3) * [0.01, 0.03, 0.03]))
            factors.append(between_factor(pose_key(0, a), pose_key(0, b), noisy, [0.01, 0.03, 0.03]))
        inc = IncrementalSolver(2)
        guess = Values(2)
        inc.update([factors[0]], {pose_key(0, 0): se2(0, 0, 0)})
        guess[pose_key(0, 0)] = se2(0, 0, 0)
        for f in factors[1:]:
            inits = {}
            for k in f.keys:
                if k not in inc.values:
                    prev = inc.values.pose(f.keys[0])
                    inits[k] = mf.compose(prev, Pose.from_raw(2, f.measurement)).raw()
                    guess[k] = inits[k]
            inc.update([f], inits)
        batch = optimize_batch(FactorGraph(), guess) if False else None
        g = FactorGraph()
        g.extend(factors)
        batch = optimize_batch(g, guess)
        for i in range(50):
            d = mf.local_distance(inc.values.pose(pose_key(0, i)), batch.pose(pose_key(0, i)))
            assert d < 1e-3


class TestConfig:
    def test_defaults(self):
        c = SolverConfig()
        assert c.max_iterations == 100
        assert c.initial_trust_radius == 1.0
        assert c.rel_decrease_tol == 1e-6
        assert c.grad_tol == 1e-8
        assert c.mu_schedule == (0.0, 0.5, 0.9, 0.95, 1.0)

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            SolverConfig(mu_schedule=(0.0, 0.9, 0.5, 1.0))
        with pytest.raises(ValueError):
            SolverConfig(mu_schedule=(0.0, 0.5))

    def test_adjacency_consistency(self):
        g = FactorGraph()
        g.add(prior_factor(pose_key(0, 0), Pose.identity(2), [1.0] * 3))
        g.add(between_factor(pose_key(0, 0), pose_key(0, 1), Pose.se2(1, 0, 0), [1.0] * 3))
        assert g.check_adjacency()
