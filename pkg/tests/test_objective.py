import math

import numpy as np
import pytest

from oracles import oracle_loss_bc, oracle_loss_cl, oracle_loss_if, oracle_loss_total
from semand.errors import ConfigError, DataError, NormalizationError
from semand.objective import BatchFeatures, loss_bc, loss_cl, loss_if, loss_total


def random_batch(rng, n=None, d=None, **kw):
    n = n or int(rng.integers(2, 9))
    d = d or int(rng.integers(2, 17))
    z_n = rng.uniform(0.05, 2.0, size=(n, d))
    z_a = rng.uniform(0.05, 2.0, size=(n, d))
    s_n = rng.uniform(0.05, 0.95, size=(n, 1))
    s_a = rng.uniform(0.05, 0.95, size=(n, 1))
    return BatchFeatures(
        z_normal=z_n,
        z_aug=z_a,
        s_normal=np.hstack([s_n, 1.0 - s_n]),
        s_aug=np.hstack([1.0 - s_a, s_a]),
        **kw,
    )


def make_batch(z_n, z_a, s_n0, s_a1, **kw):
    s_n = np.array([[v, 1.0 - v] for v in s_n0])
    s_a = np.array([[1.0 - v, v] for v in s_a1])
    return BatchFeatures(np.array(z_n, float), np.array(z_a, float), s_n, s_a, **kw)


UNIT_Z = [[1.0, 0.0]]


def test_batch_validation():
    with pytest.raises(DataError):
        BatchFeatures(
            np.ones((2, 3)),
            np.ones((2, 3)),
            np.array([[0.7, 0.7], [0.5, 0.5]]),
            np.array([[0.5, 0.5], [0.5, 0.5]]),
        )
    with pytest.raises(DataError):
        BatchFeatures(np.ones((2, 3)), np.ones((1, 3)), np.full((2, 2), 0.5), np.full((2, 2), 0.5))
    with pytest.raises(ConfigError):
        BatchFeatures(np.ones((1, 2)), np.ones((1, 2)), [[0.5, 0.5]], [[0.5, 0.5]], tau=0.0)


def test_bc_perfect_predictions():
    b = make_batch(UNIT_Z, UNIT_Z, [1.0], [1.0])
    value, _, _, _ = loss_bc(b)
    assert value == 0.0


def test_bc_coin_flip_single_pair():
    b = make_batch(UNIT_Z, UNIT_Z, [0.5], [0.5])
    value, _, _, _ = loss_bc(b)
    assert value == pytest.approx(2 * math.log(2), abs=1e-12)


def test_bc_two_pair_example():
    b = make_batch([[1, 0], [1, 0]], [[0, 1], [0, 1]], [0.9, 0.8], [0.7, 0.6])
    value, _, _, _ = loss_bc(b)
    # Frozen from the high-precision oracle: -(ln .9 + ln .8)/2 - (ln .7 + ln .6)/2.
    assert value == pytest.approx(0.5980023173383796, abs=1e-9)


def test_if_perfect_predictions():
    b = make_batch(UNIT_Z, UNIT_Z, [1.0], [1.0])
    value, _, _, _ = loss_if(b)
    assert value == 0.0


def test_if_coin_flip_single_pair():
    b = make_batch(UNIT_Z, UNIT_Z, [0.5], [0.5], gamma=1.0)
    value, _, _, _ = loss_if(b)
    # Frozen from the oracle: 2 * e^0.5 * ln 2.
    assert value == pytest.approx(2.2856130006300084, abs=1e-9)


def test_if_gamma_zero_equals_bc():
    rng = np.random.default_rng(2)
    for _ in range(20):
        b = random_batch(rng, gamma=0.0)
        v_if, *_ = loss_if(b)
        v_bc, *_ = loss_bc(b)
        assert v_if == pytest.approx(v_bc, abs=1e-12)


def test_if_dominates_bc_for_positive_gamma():
    rng = np.random.default_rng(3)
    for _ in range(20):
        b = random_batch(rng, gamma=1.0)
        assert loss_if(b)[0] >= loss_bc(b)[0]


def test_cl_single_pair_is_zero():
    b = make_batch([[1.0, 0.5]], [[0.3, 1.0]], [0.5], [0.5])
    value, g_n, g_a = loss_cl(b)
    assert value == 0.0
    assert not g_n.any() and not g_a.any()


def test_cl_identical_vs_orthogonal_example():
    # N=2, both normal features identical, both augmented features
    # identical and orthogonal, tau = 0.5. Brute-force oracle value:
    # every pair term equals l = -ln(e^2 / (e^2 + 2)), and the printed
    # normalization gives L = l / 2.
    b = make_batch(
        [[1.0, 0.0], [1.0, 0.0]],
        [[0.0, 1.0], [0.0, 1.0]],
        [0.5, 0.5],
        [0.5, 0.5],
        tau=0.5,
    )
    value, _, _ = loss_cl(b)
    ell = -math.log(math.exp(2) / (math.exp(2) + 2))
    assert ell == pytest.approx(0.23954476622188450, abs=1e-12)
    assert value == pytest.approx(ell / 2, abs=1e-12)
    assert value == pytest.approx(
        oracle_loss_cl(b.z_normal.tolist(), b.z_aug.tolist(), 0.5), abs=1e-12
    )


def test_cl_scale_invariance():
    rng = np.random.default_rng(4)
    b = random_batch(rng)
    v1, _, _ = loss_cl(b)
    b2 = BatchFeatures(3.0 * b.z_normal, b.z_aug, b.s_normal, b.s_aug, tau=b.tau)
    v2, _, _ = loss_cl(b2)
    assert v2 == pytest.approx(v1, abs=1e-9)
    # Per-row positive rescaling is also invariant.
    scales = rng.uniform(0.5, 5.0, size=(b.n, 1))
    b3 = BatchFeatures(b.z_normal * scales, b.z_aug, b.s_normal, b.s_aug, tau=b.tau)
    v3, _, _ = loss_cl(b3)
    assert v3 == pytest.approx(v1, abs=1e-9)


def test_cl_permutation_invariance():
    rng = np.random.default_rng(5)
    b = random_batch(rng, n=6)
    v1, _, _ = loss_cl(b)
    perm = rng.permutation(6)
    b2 = BatchFeatures(b.z_normal[perm], b.z_aug[perm], b.s_normal, b.s_aug, tau=b.tau)
    v2, _, _ = loss_cl(b2)
    assert v2 == pytest.approx(v1, abs=1e-9)


def test_cl_rejects_zero_rows():
    b = make_batch([[1.0, 0.0], [0.0, 0.0]], [[0.0, 1.0], [1.0, 1.0]], [0.5, 0.5], [0.5, 0.5])
    with pytest.raises(NormalizationError):
        loss_cl(b)


def test_losses_non_negative():
    rng = np.random.default_rng(6)
    for _ in range(30):
        b = random_batch(rng)
        assert loss_bc(b)[0] >= 0.0
        assert loss_if(b)[0] >= 0.0
        assert loss_cl(b)[0] >= 0.0


def test_total_single_component():
    rng = np.random.default_rng(7)
    b = random_batch(rng, w_bc=1.0, w_cl=0.0, w_if=0.0)
    report = loss_total(b)
    assert report.l_total == pytest.approx(report.l_bc, abs=1e-12)
    assert not report.grad_z_normal.any()


def test_total_paper_weights():
    rng = np.random.default_rng(8)
    b = random_batch(rng, w_bc=1.0, w_cl=1.0, w_if=1.5)
    report = loss_total(b)
    expected = (report.l_bc + report.l_cl + 1.5 * report.l_if) / 3.5
    assert report.l_total == pytest.approx(expected, abs=1e-9)


def test_total_is_convex_combination():
    rng = np.random.default_rng(9)
    for _ in range(10):
        b = random_batch(rng, w_bc=float(rng.uniform(0.1, 2)), w_cl=float(rng.uniform(0.1, 2)), w_if=float(rng.uniform(0.1, 2)))
        report = loss_total(b)
        comps = [report.l_bc, report.l_cl, report.l_if]
        assert min(comps) - 1e-12 <= report.l_total <= max(comps) + 1e-12


def test_zero_probability_is_clamped_and_flagged():
    b = make_batch(UNIT_Z, UNIT_Z, [0.0], [0.5])
    value, g_n, _, clamped = loss_bc(b)
    assert clamped
    assert math.isfinite(value)
    assert np.isfinite(g_n).all()
    report = loss_total(b)
    assert report.clamped
    assert math.isfinite(report.l_total)


def test_total_rejects_zero_weights():
    rng = np.random.default_rng(10)
    b = random_batch(rng, w_bc=0.0, w_cl=0.0, w_if=0.0)
    with pytest.raises(ConfigError):
        loss_total(b)


def test_values_match_bruteforce_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        b = random_batch(rng)
        z_n, z_a = b.z_normal.tolist(), b.z_aug.tolist()
        s_n, s_a = b.s_normal.tolist(), b.s_aug.tolist()
        assert loss_bc(b)[0] == pytest.approx(oracle_loss_bc(s_n, s_a), abs=1e-9)
        assert loss_if(b)[0] == pytest.approx(oracle_loss_if(s_n, s_a, b.gamma), abs=1e-9)
        assert loss_cl(b)[0] == pytest.approx(oracle_loss_cl(z_n, z_a, b.tau), abs=1e-9)
        assert loss_total(b).l_total == pytest.approx(
            oracle_loss_total(z_n, z_a, s_n, s_a, b.tau, b.gamma, b.w_bc, b.w_cl, b.w_if),
            abs=1e-9,
        )


def finite_difference_check(batch, step=1e-5, tol=1e-4):
    """Compare analytic gradients of l_total with central differences.

    Probes mutate the batch arrays in place (the row-sum validation is
    a constructor contract, not a constraint of the loss functions).
    """
    report = loss_total(batch)
    worst = 0.0
    for arr, grad in (
        (batch.z_normal, report.grad_z_normal),
        (batch.z_aug, report.grad_z_aug),
        (batch.s_normal, report.grad_s_normal),
        (batch.s_aug, report.grad_s_aug),
    ):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss_total(batch).l_total
            arr[idx] = orig - step
            down = loss_total(batch).l_total
            arr[idx] = orig
            fd = (up - down) / (2 * step)
            denom = max(abs(fd), abs(grad[idx]), 1e-6)
            rel = abs(fd - grad[idx]) / denom
            worst = max(worst, rel)
            assert rel < tol, f"grad mismatch at {idx}: fd={fd} analytic={grad[idx]}"
    return worst


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(12)
    for _ in range(100):
        b = random_batch(
            rng,
            tau=float(rng.uniform(0.2, 1.5)),
            gamma=float(rng.uniform(0.0, 2.0)),
            w_bc=float(rng.uniform(0.1, 2.0)),
            w_cl=float(rng.uniform(0.1, 2.0)),
            w_if=float(rng.uniform(0.1, 2.0)),
        )
        finite_difference_check(b)


def test_report_combination_invariant():
    rng = np.random.default_rng(13)
    for _ in range(20):
        w = rng.uniform(0.1, 3.0, size=3)
        b = random_batch(rng, w_bc=float(w[0]), w_cl=float(w[1]), w_if=float(w[2]))
        r = loss_total(b)
        lhs = r.l_total
        rhs = (w[0] * r.l_bc + w[1] * r.l_cl + w[2] * r.l_if) / w.sum()
        assert lhs == pytest.approx(rhs, abs=1e-9)
