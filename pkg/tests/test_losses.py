import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from replaylab import gradcore as gc
from replaylab.losses import (DegenerateBatchError, LossConfig, kd_loss, loss_pred_mse,
                              ranking_hinge, rehearsal_loss, total_objective,
                              triplet_batch_hard)

from .helpers import numeric_grad, rel_error


def unit_rows(rng, b, d):
    x = rng.normal(size=(b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_triplet(desc, labels, margin):
    """Enumerate every (a, p, n) and keep the hardest pair per anchor."""
    dist = 1.0 - desc @ desc.T
    out = {}
    for a in range(len(desc)):
        worst = None
        for p, n in itertools.product(range(len(desc)), repeat=2):
            if p == a or labels[p] != labels[a] or labels[n] == labels[a]:
                continue
            # hardest pair = largest d(a,p) - d(a,n)
            v = dist[a, p] - dist[a, n]
            worst = v if worst is None else max(worst, v)
        if worst is not None:
            out[a] = max(0.0, worst + margin)
    return out


def brute_ranking(old, new, delta):
    s_old, s_new = old @ old.T, new @ new.T
    total, count = 0.0, 0
    b = len(old)
    for a, i, j in itertools.product(range(b), repeat=3):
        if len({a, i, j}) < 3 or not s_old[a, i] > s_old[a, j]:
            continue
        gap = s_old[a, i] - s_old[a, j]
        total += max(0.0, s_new[a, j] - s_new[a, i] + min(delta, gap))
        count += 1
    return total / count if count else 0.0


class TestTriplet:
    def _pair_dist(self, d_ap, d_an):
        # three unit vectors in the plane with prescribed cosine distances to row 0
        ang_p, ang_n = np.arccos(1 - d_ap), np.arccos(1 - d_an)
        desc = np.array([[1.0, 0.0], [np.cos(ang_p), np.sin(ang_p)],
                         [np.cos(ang_n), -np.sin(ang_n)]])
        return gc.constant(desc)

    def test_inactive_hinge(self):
        res = triplet_batch_hard(self._pair_dist(0.2, 0.9), [0, 0, 1], 0.5, anchors=[0])
        assert res.values == [pytest.approx(0.0)]

    def test_active_hinge(self):
        res = triplet_batch_hard(self._pair_dist(0.8, 0.6), [0, 0, 1], 0.5, anchors=[0])
        assert res.values[0] == pytest.approx(0.7, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_exhaustive_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        desc = unit_rows(rng, 8, 4)
        labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        res = triplet_batch_hard(gc.constant(desc), labels, 0.3)
        oracle = brute_triplet(desc, labels, 0.3)
        assert list(res.anchors) == sorted(oracle)
        np.testing.assert_allclose(res.values, [oracle[a] for a in res.anchors], atol=1e-12)
        assert res.mean.item() == pytest.approx(np.mean(list(oracle.values())), abs=1e-12)

    def test_active_fraction(self):
        rng = np.random.default_rng(4)
        desc = unit_rows(rng, 8, 3)
        res = triplet_batch_hard(gc.constant(desc), [0, 0, 1, 1, 2, 2, 3, 3], 0.1)
        assert res.active_fraction == np.mean(np.array(res.values) > 0)

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError):
            triplet_batch_hard(gc.constant(np.eye(3)), [0, 0, 0], 0.2)

    def test_gray_zone_is_not_a_negative(self):
        desc = gc.constant(unit_rows(np.random.default_rng(0), 4, 3))
        mask = np.ones((4, 4), bool)
        mask[0, 2] = mask[2, 0] = False
        res = triplet_batch_hard(desc, [0, 0, 1, 2], 0.2, neg_mask=mask, anchors=[0])
        dist = 1 - desc.value @ desc.value.T
        assert res.values[0] == pytest.approx(max(0.0, dist[0, 1] - dist[0, 3] + 0.2), abs=1e-12)

    @given(st.permutations(range(4)))
    @settings(max_examples=24, deadline=None)
    def test_relabeling_invariance(self, perm):
        desc = gc.constant(unit_rows(np.random.default_rng(9), 8, 4))
        labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        base = triplet_batch_hard(desc, labels, 0.2).values
        relabeled = triplet_batch_hard(desc, np.asarray(perm)[labels], 0.2).values
        np.testing.assert_array_equal(base, relabeled)


class TestLossPredMse:
    def test_identity(self):
        assert loss_pred_mse(gc.constant([[1.0], [2.0]]), [1.0, 2.0]).item() == 0.0

    def test_value(self):
        assert loss_pred_mse(gc.constant([[0.0], [0.0]]), [1.0, 3.0]).item() == pytest.approx(5.0, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loss_pred_mse(gc.constant([[0.0], [0.0]]), [1.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        pred = gc.parameter(rng.normal(size=(6, 1)))
        target = rng.normal(size=6)
        gc.backward(loss_pred_mse(pred, target))
        expected = 2 * (pred.value[:, 0] - target) / 6
        np.testing.assert_allclose(pred.grad[:, 0], expected, rtol=1e-12)
        assert rel_error(pred.grad, numeric_grad(lambda: loss_pred_mse(pred, target), pred)) < 1e-6


class TestRehearsal:
    @pytest.mark.parametrize("old,new,expected", [(0.5, 0.3, 0.0), (0.5, 0.5, 0.1), (0.5, 0.6, 0.2)])
    def test_hinge_values(self, old, new, expected):
        assert rehearsal_loss([old], [new], 0.1).item() == pytest.approx(expected, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rehearsal_loss([0.1, 0.2], [0.1], 0.1)

    def test_non_finite_old(self):
        with pytest.raises(ValueError):
            rehearsal_loss([np.inf], [0.1], 0.1)

    @given(st.lists(st.floats(0, 5), min_size=1, max_size=8), st.floats(-3, 3))
    @settings(max_examples=50, deadline=None)
    def test_translation_covariance(self, old, c):
        new = [x * 0.7 for x in old]
        base = rehearsal_loss(old, new, 0.1).item()
        shifted = rehearsal_loss([x + c for x in old], [x + c for x in new], 0.1).item()
        assert shifted == pytest.approx(base, abs=1e-9)
        assert base >= 0


class TestKd:
    @pytest.mark.parametrize("variant", ["ranking_surrogate", "pairwise_distance", "feature_l2", "none"])
    def test_self_distillation_is_zero(self, variant):
        x = unit_rows(np.random.default_rng(0), 6, 4)
        assert kd_loss(variant, x, gc.constant(x), 0.01).item() == 0.0

    def test_three_row_example(self):
        # anchor 0 ranks row 1 above row 2 before, and row 2 above row 1 after
        s_old = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.5], [0.1, 0.5, 1.0]])
        s_new = np.array([[1.0, 0.1, 0.9], [0.1, 1.0, 0.5], [0.9, 0.5, 1.0]])
        val = ranking_hinge(gc.constant(s_new), s_old, 0.0).item()
        # counted triples (a, i, j): (0,1,2) -> 0.9 - 0.1 = 0.8;
        # (1,0,2) -> 0.5 - 0.1 = 0.4; (2,1,0) -> 0.9 - 0.5 = 0.4
        assert val == pytest.approx((0.8 + 0.4 + 0.4) / 3, abs=1e-12)

    def test_margin_capped_by_old_gap(self):
        s_old = np.array([[1.0, 0.5, 0.499], [0.5, 1.0, 0.0], [0.499, 0.0, 1.0]])
        # unchanged similarities: the capped margin leaves every hinge at 0
        assert ranking_hinge(gc.constant(s_old), s_old, 0.01).item() == 0.0

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("delta", [0.0, 0.01, 0.2])
    def test_ranking_matches_brute_force(self, seed, delta):
        rng = np.random.default_rng(seed)
        old, new = unit_rows(rng, 6, 3), unit_rows(rng, 6, 3)
        got = kd_loss("ranking_surrogate", old, gc.constant(new), delta).item()
        assert got == pytest.approx(brute_ranking(old, new, delta), abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_ranking_gradient(self, seed):
        rng = np.random.default_rng(seed)
        old = unit_rows(rng, 7, 3)
        new = gc.parameter(rng.normal(size=(7, 3)))
        fn = lambda: kd_loss("ranking_surrogate", old, gc.l2_normalize(new), 0.05)
        gc.backward(fn())
        assert rel_error(new.grad, numeric_grad(fn, new)) < 1e-4

    def test_pairwise_distance_value(self):
        rng = np.random.default_rng(2)
        old, new = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
        diff = (old @ old.T - new @ new.T)[~np.eye(5, dtype=bool)]
        got = kd_loss("pairwise_distance", old, gc.constant(new)).item()
        assert got == pytest.approx(np.mean(diff ** 2), abs=1e-14)

    def test_feature_l2_value(self):
        rng = np.random.default_rng(3)
        old, new = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
        assert kd_loss("feature_l2", old, gc.constant(new)).item() == pytest.approx(
            np.mean((old - new) ** 2), abs=1e-14)

    def test_ranking_needs_three_rows(self):
        x = unit_rows(np.random.default_rng(0), 2, 3)
        with pytest.raises(ValueError):
            kd_loss("ranking_surrogate", x, gc.constant(x))

    def test_shape_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            kd_loss("feature_l2", unit_rows(rng, 4, 3), gc.constant(unit_rows(rng, 5, 3)))

    @pytest.mark.parametrize("seed", range(5))
    def test_ranking_rotation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        old, new = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        a = kd_loss("ranking_surrogate", old, gc.constant(new)).item()
        b = kd_loss("ranking_surrogate", old @ q, gc.constant(new @ q)).item()
        assert a == pytest.approx(b, abs=1e-12)


class TestTotalObjective:
    def test_weighted_sum(self):
        cfg = LossConfig(lambda_kd=0.5, omega=0.08)
        total, br = total_objective(gc.constant(1.0), gc.constant(2.0), gc.constant(3.0), cfg)
        assert total.item() == pytest.approx(2.24, abs=1e-12)
        assert br.l_total == total.item()

    def test_zero_weights_give_task_loss(self):
        cfg = LossConfig(lambda_kd=0.0, omega=0.0)
        total, _ = total_objective(gc.constant(0.37), gc.constant(2.0), gc.constant(3.0), cfg)
        assert total.item() == 0.37

    def test_mse_reported_not_added(self):
        total, br = total_objective(gc.constant(1.0), None, None, LossConfig(),
                                    l_mse=gc.constant(9.0))
        assert total.item() == 1.0 and br.l_losspred_mse == 9.0

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            total_objective(gc.constant(1.0), None, None, LossConfig(), lam=-0.1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(omega=-1.0)
        with pytest.raises(ValueError):
            LossConfig(kd_variant="mystery")

    def test_linear_decay_schedule(self):
        cfg = LossConfig(lambda_kd=2.0, lambda_schedule="linear_decay")
        assert [cfg.lambda_at(e, 4) for e in range(4)] == [2.0, 1.5, 1.0, 0.5]
        assert LossConfig(lambda_kd=2.0).lambda_at(3, 4) == 2.0
