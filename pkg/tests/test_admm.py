import numpy as np
import pytest

from lps import admm, netcore
from lps.admm import (AdmmState, DraftSlice, augmented_fd_check, penalty_schedule,
                      proximal_loss_and_grads, run_admm_phase, update_auxiliary, update_duals)
from lps.netcore import BiasSet, Head, NetworkSpec
from lps.partition import compose
from lps.projection import SparsityBudget, project_irregular, project_mask_binary
from lps.tasks import make_blob_tasks
from lps.trainer import Engine, PhasePlan, new_draft, train_task, warmup


def tiny_problem(rng, dims=(5, 6, 4, 3), n=12):
    """A random draft for task 2 over a random task-1 partition."""
    spec = NetworkSpec(dims)
    shapes = spec.feature_shapes
    past_support = [rng.random(s) < 0.4 for s in shapes]
    free = [~p for p in past_support]
    past = [np.where(p, rng.standard_normal(s), 0.0) for s, p in zip(shapes, past_support)]
    draft = DraftSlice(
        2,
        [np.where(f, rng.standard_normal(s) * 0.5, 0.0) for s, f in zip(shapes, free)],
        [np.where(p, rng.uniform(0.2, 1.2, s), 0.0) for s, p in zip(shapes, past_support)],
        Head(rng.standard_normal(spec.head_shape) * 0.5, rng.standard_normal(spec.class_count) * 0.1),
    )
    biases = BiasSet([rng.standard_normal(q) * 0.1 for _, q in shapes], frozen=True)
    state = AdmmState(
        Z=[rng.standard_normal(s) for s in shapes], Y=[rng.standard_normal(s) for s in shapes],
        U=[rng.standard_normal(s) * 0.1 for s in shapes], K=[rng.standard_normal(s) * 0.1 for s in shapes],
        rho=[0.7, 1.3], tau=[0.4, 2.0],
    )
    x = rng.standard_normal((n, dims[0]))
    y = rng.integers(0, dims[-1], n)
    return draft, past, biases, state, x, y, free, past_support


class TestPenaltySchedule:
    def test_initial(self):
        assert penalty_schedule(0, 90) == 1e-3

    def test_ninety_iterations(self):
        values = [penalty_schedule(i, 90) for i in range(90)]
        assert set(values[:30]) == {1e-3}
        assert set(values[30:60]) == {1e-3 * 10}
        assert set(values[60:]) == {1e-3 * 100}

    def test_one_step_per_interval(self):
        assert [penalty_schedule(i, 3) for i in range(3)] == [1e-3, 1e-3 * 10, 1e-3 * 100]

    def test_non_decreasing_and_capped(self):
        vals = [penalty_schedule(i, 17) for i in range(40)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert max(vals) == 1e-3 * 10 ** 3

    def test_too_few_iterations(self):
        with pytest.raises(ValueError):
            penalty_schedule(0, 2, intervals=3)


class TestProximalGradients:
    def test_zero_penalty_is_plain_loss(self, rng):
        draft, past, biases, state, x, y, free, ps = tiny_problem(rng)
        state.rho = [0.0, 0.0]
        state.tau = [0.0, 0.0]
        loss, grads = proximal_loss_and_grads(draft, past, biases, state, x, y, free, ps)
        eff = compose(draft.weights, draft.mask, past)
        ref_loss, ref = netcore.loss_and_grads(eff, draft.head, biases, x, y)
        assert loss == ref_loss
        for i in range(2):
            np.testing.assert_array_equal(grads[f"w{i}"], np.where(free[i], ref.weights[i], 0.0))
            np.testing.assert_array_equal(grads[f"m{i}"], np.where(ps[i], ref.weights[i] * past[i], 0.0))
        np.testing.assert_array_equal(grads["head_w"], ref.head_w)

    def test_fixed_point_has_no_proximal_pull(self, rng):
        draft, past, biases, state, x, y, free, ps = tiny_problem(rng)
        for i in range(2):
            state.U[i] = np.zeros_like(state.U[i])
            state.Z[i] = draft.weights[i].copy()
        _, with_pen = proximal_loss_and_grads(draft, past, biases, state, x, y, free, ps)
        state.rho = [0.0, 0.0]
        _, without = proximal_loss_and_grads(draft, past, biases, state, x, y, free, ps)
        for i in range(2):
            np.testing.assert_array_equal(with_pen[f"w{i}"], without[f"w{i}"])

    def test_finite_differences_include_mask(self, rng):
        worst = 0.0
        for trial in range(3):
            draft, past, biases, state, x, y, free, ps = tiny_problem(rng)
            coords = []
            for i in range(2):
                coords += [(f"w{i}", tuple(c)) for c in np.argwhere(free[i])[:25]]
                coords += [(f"m{i}", tuple(c)) for c in np.argwhere(ps[i])[:25]]
            coords += [("head_w", (0, 0)), ("head_b", (1,))]
            worst = max(worst, augmented_fd_check(draft, past, biases, state, x, y, free, ps, coords))
        assert worst < 1e-4

    def test_gradients_stay_on_their_supports(self, rng):
        draft, past, biases, state, x, y, free, ps = tiny_problem(rng)
        _, grads = proximal_loss_and_grads(draft, past, biases, state, x, y, free, ps)
        for i in range(2):
            assert np.all(grads[f"w{i}"][ps[i]] == 0.0)
            assert np.all(grads[f"m{i}"][free[i]] == 0.0)


class TestAuxiliaryAndDuals:
    def test_feasible_point_is_kept(self, rng):
        W = [project_irregular(rng.standard_normal((3, 4)), 5)]
        M = [np.zeros((3, 4))]
        state = AdmmState([None], [None], [np.zeros((3, 4))], [np.zeros((3, 4))], [1.0], [1.0])
        budgets = SparsityBudget((5,), (0,))
        update_auxiliary(state, W, M, budgets, "irregular", [np.ones((3, 4), bool)], [np.zeros((3, 4), bool)])
        assert np.array_equal(state.Z[0], W[0])

    def test_mask_auxiliary(self):
        M = [np.array([[0.9, 0.2, 0.6, 0.4]])]
        state = AdmmState([None], [None], [np.zeros((1, 4))], [np.zeros((1, 4))], [1.0], [1.0])
        update_auxiliary(state, [np.zeros((1, 4))], M, SparsityBudget((0,), (2,)), "irregular",
                         [np.zeros((1, 4), bool)], [np.ones((1, 4), bool)])
        assert state.Y[0].tolist() == [[1, 0, 1, 0]]

    def test_duals(self):
        state = AdmmState([np.zeros((2, 2))], [np.zeros((2, 2))], [np.zeros((2, 2))], [np.zeros((2, 2))],
                          [1.0], [1.0])
        update_duals(state, [np.array([[1.0, 0.0], [0.0, 0.0]])], [np.zeros((2, 2))])
        assert state.U[0].tolist() == [[1, 0], [0, 0]]
        update_duals(state, [state.Z[0].copy()], [state.Y[0].copy()])
        assert state.U[0].tolist() == [[1, 0], [0, 0]]


@pytest.fixture(scope="module")
def second_task():
    """Engine with one committed blob task and a warmed-up draft for task 2."""
    tasks = make_blob_tasks(2, 16, 3, 600, seed=5, similarity=0.5, test_samples=150)
    plan = PhasePlan(3, 6, 2, alpha_fraction=0.3, beta_fraction=0.6, batch_size=32)
    engine = Engine.create(NetworkSpec((16, 24, 24, 3)), seed=5)
    train_task(engine, tasks[0], plan)
    return engine, tasks[1], plan


def _warm_draft(second_task):
    engine, ds, plan = second_task
    draft = new_draft(engine, 2)
    warmup(engine, draft, ds, plan)
    free = engine.ledger.free_support()
    past = engine.ledger.used_support
    budgets = SparsityBudget.resolve(plan.alpha_fraction, plan.beta_fraction, "irregular", free, past)
    return engine, ds, plan, draft, free, past, budgets


class TestRunPhase:
    def test_iterates_feasible(self, second_task, monkeypatch):
        engine, ds, plan, draft, free, past, budgets = _warm_draft(second_task)
        seen = []
        original = admm.update_auxiliary

        def checked(state, W, M, b, kind, fr, pa, use_duals=True):
            out = original(state, W, M, b, kind, fr, pa, use_duals)
            for i in range(len(W)):
                z, y = state.Z[i], state.Y[i]
                seen.append((np.count_nonzero(z) <= b.alpha[i] and not np.any(z[~fr[i]]),
                             y.sum() == b.beta[i] and set(np.unique(y)) <= {0.0, 1.0} and not np.any(y[~pa[i]])))
            return out

        monkeypatch.setattr(admm, "update_auxiliary", checked)
        result = run_admm_phase(draft, engine.ledger.accumulated, engine.biases, ds, budgets, plan, free, past, 7)
        assert len(seen) == 2 * (plan.admm_epochs + 1)
        assert all(a and b for a, b in seen)
        assert [r.rho for r in result.residuals[::2]] == [penalty_schedule(i, 6) for i in range(6)]

    def test_larger_penalty_pulls_w_closer(self, second_task):
        engine, ds, plan, draft0, free, past, budgets = _warm_draft(second_task)
        gaps = []
        for rho in (1e-3, 1.0):
            draft = DraftSlice(2, [w.copy() for w in draft0.weights], [m.copy() for m in draft0.mask],
                               Head(draft0.head.weight.copy(), draft0.head.bias.copy()))
            state = admm.init_state(draft, budgets, "irregular", free, past, rho)
            params = draft.params()
            adam = netcore.AdamState()
            from lps.tasks import batches
            for xb, yb in batches(ds.x_train, ds.y_train, 32, 0, 0):
                _, g = proximal_loss_and_grads(draft, engine.ledger.accumulated, engine.biases, state, xb, yb, free, past)
                netcore.adam_step(params, g, adam)
            gaps.append(sum(np.linalg.norm(w - z) for w, z in zip(draft.weights, state.Z)))
        assert gaps[1] < gaps[0]

    def test_full_batch_epoch_decreases_objective(self, second_task):
        engine, ds, plan, draft, free, past, budgets = _warm_draft(second_task)
        state = admm.init_state(draft, budgets, "irregular", free, past, 0.1)
        params = draft.params()
        adam = netcore.AdamState()
        x, y = ds.x_train, ds.y_train
        acc = engine.ledger.accumulated
        start = proximal_loss_and_grads(draft, acc, engine.biases, state, x, y, free, past)[0]
        for _ in range(20):
            _, g = proximal_loss_and_grads(draft, acc, engine.biases, state, x, y, free, past)
            netcore.adam_step(params, g, adam)
        end = proximal_loss_and_grads(draft, acc, engine.biases, state, x, y, free, past)[0]
        assert end < start

    def test_zero_budget_rejected(self, second_task):
        engine, ds, plan, draft, free, past, budgets = _warm_draft(second_task)
        zero = SparsityBudget((0, 0), budgets.beta)
        with pytest.raises(ValueError, match="free capacity"):
            run_admm_phase(draft, engine.ledger.accumulated, engine.biases, ds, zero, plan, free, past, 0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_guard(self, second_task):
        engine, ds, plan, draft, free, past, budgets = _warm_draft(second_task)
        draft.weights[0][free[0]] = 1e200
        with pytest.raises(admm.DivergenceError, match="ADMM iteration 0"):
            run_admm_phase(draft, engine.ledger.accumulated, engine.biases, ds, budgets, plan, free, past, 0)


def test_toy_residual_regression(toy_run):
    """Final relative primal residual on the toy suite stays below 5% in every layer."""
    for outcome in toy_run.outcomes:
        res = outcome.admm.residuals
        last = max(r.iteration for r in res)
        assert last == 14
        for r in res:
            if r.iteration == last:
                assert r.w_residual / r.w_norm < 0.05, (r.task_id, r.layer)


def test_toy_residuals_lower_at_end(toy_run):
    for outcome in toy_run.outcomes:
        res = outcome.admm.residuals
        first = sum(r.w_residual + r.m_residual for r in res if r.iteration == 0)
        last = sum(r.w_residual + r.m_residual for r in res if r.iteration == 14)
        assert last < first, outcome.slice.task_id
