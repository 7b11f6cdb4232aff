import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentdist import diffcore as dc
from latentdist import losses as L
from latentdist.diffcore import Tensor

from _instances import CLASS_COUNTS, COMPONENTS


def mp_sharpen(p, T):
    """High-precision oracle for p_i^(1/T) / sum_j p_j^(1/T)."""
    with mpmath.workdps(40):
        w = [mpmath.mpf(x) ** (1 / mpmath.mpf(T)) for x in p]
        s = mpmath.fsum(w)
        return [float(v / s) for v in w]


# --------------------------------------------------------------------------
# auxiliary cross-entropy


def test_aux_ce_zero_logits_is_log_width():
    y = np.array([0, 1, 2, 3, 4, 5, 6, 0])
    loss = L.aux_ce(y, [Tensor(np.zeros((8, 6))) for _ in range(7)])
    assert loss.item() == pytest.approx(math.log(6), abs=1e-12)
    assert math.log(6) == pytest.approx(1.791759, abs=1e-6)


def test_aux_ce_perfect_predictions_vanish():
    y = np.array([0, 1, 2])
    aux = []
    for k in range(3):
        z = np.zeros((3, 2))
        for p, label in enumerate(y):
            if label != k:
                z[p, label - (label > k)] = 800.0
        aux.append(Tensor(z))
    assert L.aux_ce(y, aux).item() == pytest.approx(0.0, abs=1e-12)


def test_aux_ce_two_classes_is_identically_zero():
    y = np.array([0, 1, 1])
    assert L.aux_ce(y, [Tensor(np.full((3, 1), 3.7)), Tensor(np.full((3, 1), -1.0))]).item() == 0.0


def test_aux_ce_matches_loop_oracle_and_keeps_one_over_c():
    rng = np.random.default_rng(0)
    y = np.array([0, 0, 1, 1])  # class 2 absent: its head sees every sample
    aux = [rng.standard_normal((4, 2)) for _ in range(3)]
    total = 0.0
    for k in range(3):
        rows = [p for p in range(4) if y[p] != k]
        ce = 0.0
        for p in rows:
            z = aux[k][p]
            pos = y[p] - (y[p] > k)
            ce += -(z[pos] - math.log(sum(math.exp(v) for v in z)))
        total += ce / len(rows)
    assert L.aux_ce(y, [Tensor(a) for a in aux]).item() == pytest.approx(total / 3, abs=1e-12)


def test_aux_ce_empty_branch_policy():
    y = np.array([0, 0])
    aux = [Tensor(np.zeros((2, 1))), Tensor(np.zeros((2, 1)))]
    assert L.aux_ce(y, aux).item() == 0.0
    y3 = np.array([0, 0, 1])
    aux3 = [Tensor(np.zeros((3, 2))) for _ in range(3)]
    keep = L.aux_ce(y3, aux3).item()
    drop = L.aux_ce(y3, aux3, drop_empty=True).item()
    # every head is non-empty here, so the two policies agree
    assert keep == pytest.approx(drop)


def test_branch_ce_rejects_own_class():
    with pytest.raises(ValueError):
        L.branch_ce([0, 1], Tensor(np.zeros((2, 2))), 1, 3)


# --------------------------------------------------------------------------
# sharpen


def test_sharpen_spot_value_against_high_precision_oracle():
    out = L.sharpen([0.8, 0.2], 0.5)
    np.testing.assert_allclose(out, mp_sharpen([0.8, 0.2], 0.5), atol=1e-12)
    np.testing.assert_allclose(out, [0.941176, 0.058824], atol=1e-6)


def test_sharpen_trivial_cases():
    np.testing.assert_allclose(L.sharpen([0.5, 0.5], 3.0), [0.5, 0.5])
    np.testing.assert_allclose(L.sharpen([0.8, 0.2], 1.0), [0.8, 0.2], atol=1e-15)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_sharpen_rejects_nonpositive_temperature(bad):
    with pytest.raises(ValueError):
        L.sharpen([0.5, 0.5], bad)


def test_sharpen_rejects_all_zero_rows():
    with pytest.raises(ValueError):
        L.sharpen([0.0, 0.0], 1.2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6), st.floats(0.2, 5.0))
def test_sharpen_matches_oracle_and_preserves_argmax(raw, T):
    p = np.array(raw) / sum(raw)
    out = L.sharpen(p, T)
    np.testing.assert_allclose(out, mp_sharpen(p, T), atol=1e-12)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.argmax(out) == np.argmax(p) or math.isclose(p.max(), p[np.argmax(out)], rel_tol=1e-12)


def test_sharpen_entropy_non_decreasing_in_temperature():
    rng = np.random.default_rng(1)
    grid = [0.25, 0.5, 0.8, 1.0, 1.2, 2.0, 4.0]
    for _ in range(200):
        p = rng.dirichlet(np.ones(5))
        ent = [-np.sum(q * np.log(q)) for q in (L.sharpen(p, T) for T in grid)]
        assert all(b >= a - 1e-12 for a, b in zip(ent, ent[1:]))


# --------------------------------------------------------------------------
# soft L2


def test_soft_l2_hand_value():
    # 0-based: y=0, negatives are classes 1 and 2
    probs = Tensor(np.array([[0.4, 0.5, 0.1]]))
    assert L.soft_l2(probs, np.array([[0.7, 0.3]]), [0]).item() == pytest.approx(0.04, abs=1e-15)


def test_soft_l2_zero_when_matching_and_bounded():
    probs = np.array([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]])
    latent = np.array([[0.3, 0.5], [0.6, 0.1]])
    assert L.soft_l2(Tensor(probs), latent, [0, 2]).item() == 0.0
    rng = np.random.default_rng(2)
    for _ in range(100):
        p = rng.dirichlet(np.ones(4), size=5)
        q = rng.dirichlet(np.ones(3), size=5)
        assert 0.0 <= L.soft_l2(Tensor(p), q, rng.integers(0, 4, 5)).item() <= 1.0


def test_soft_l2_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        L.soft_l2(Tensor(np.full((2, 3), 1 / 3)), np.full((2, 3), 1 / 3), [0, 1])


def test_soft_l2_renormalized_variant():
    probs = Tensor(np.array([[0.4, 0.5, 0.1]]))
    # negative mass 0.6 -> [5/6, 1/6]
    expected = ((0.7 - 5 / 6) ** 2 + (0.3 - 1 / 6) ** 2) / 2
    assert L.soft_l2(probs, np.array([[0.7, 0.3]]), [0], renormalize=True).item() == pytest.approx(expected, abs=1e-15)


# --------------------------------------------------------------------------
# similarity preserving


def test_similarity_matrix_identical_features():
    A = L.similarity_matrix(Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))).value
    np.testing.assert_allclose(A, np.full((2, 2), 1 / math.sqrt(2)), atol=1e-15)
    assert A[0, 0] == pytest.approx(0.707107, abs=1e-6)


def test_similarity_matrix_orthonormal_and_unit_rows():
    np.testing.assert_array_equal(L.similarity_matrix(Tensor(np.eye(2))).value, np.eye(2))
    A = L.similarity_matrix(Tensor(np.random.default_rng(3).standard_normal((6, 4)))).value
    np.testing.assert_allclose(np.linalg.norm(A, axis=1), 1.0, atol=1e-12)


def test_sp_mask_examples():
    np.testing.assert_array_equal(L.sp_mask([0, 1], 0), [[0, 0], [0, 1]])
    np.testing.assert_array_equal(L.sp_mask([0, 1, 1], 2), np.ones((3, 3)))


def brute_mask(labels, cls):
    n = len(labels)
    M = np.ones((n, n))
    for q in range(n):
        for p in range(n):
            if labels[p] == cls or labels[q] == cls:
                M[q, p] = 0.0
    return M


def test_sp_mask_exhaustive_against_brute_force():
    checked = 0
    for C in (1, 2, 3):
        for N in range(1, 5):
            for labels in itertools.product(range(C), repeat=N):
                for i in range(C):
                    M = L.sp_mask(labels, i)
                    np.testing.assert_array_equal(M, brute_mask(labels, i))
                    np.testing.assert_array_equal(M, M.T)
                    checked += 1
    assert checked > 400


def brute_msp(A_t, A_aux, labels):
    C = len(A_aux)
    total = 0.0
    for i in range(C):
        M = brute_mask(labels, i)
        n_i = sum(1 for v in labels if v != i)
        total += np.sum((M * A_t - M * A_aux[i]) ** 2) / n_i**2
    return total / C


def test_msp_hand_built_two_by_two():
    A_t = np.array([[0.6, 0.8], [0.0, 1.0]])
    A0 = np.array([[1.0, 0.0], [0.8, 0.6]])
    A1 = np.array([[0.0, 1.0], [0.6, 0.8]])
    # class 0 masks all but (1,1): (1-0.6)^2 / 1 ; class 1 masks all but (0,0): (0.6-0)^2 / 1
    expected = ((1.0 - 0.6) ** 2 + (0.6 - 0.0) ** 2) / 2
    got = L.msp_loss(Tensor(A_t), [Tensor(A0), Tensor(A1)], [0, 1]).item()
    assert got == pytest.approx(expected, abs=1e-15)
    assert got == pytest.approx(brute_msp(A_t, [A0, A1], [0, 1]), abs=1e-15)


def test_msp_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(4)
    for _ in range(100):
        C = int(rng.integers(2, 5))
        N = int(rng.integers(C, 8))
        labels = np.concatenate([np.arange(C), rng.integers(0, C, N - C)])
        A_t = rng.standard_normal((N, N))
        A_aux = [rng.standard_normal((N, N)) for _ in range(C)]
        got = L.msp_loss(Tensor(A_t), [Tensor(a) for a in A_aux], labels).item()
        assert got == pytest.approx(brute_msp(A_t, A_aux, labels), rel=1e-12)


def test_msp_zero_for_identical_branches_and_scale_invariant():
    rng = np.random.default_rng(5)
    y = np.array([0, 1, 2, 0, 1])
    f = np.abs(rng.standard_normal((5, 3))) + 0.1
    A = L.similarity_matrix(Tensor(f))
    assert L.msp_loss(A, [A, A, A], y).item() == 0.0
    g = [np.abs(rng.standard_normal((5, 3))) + 0.1 for _ in range(3)]
    base = L.msp_loss(A, [L.similarity_matrix(Tensor(x)) for x in g], y).item()
    scaled = L.msp_loss(L.similarity_matrix(Tensor(3.5 * f)),
                        [L.similarity_matrix(Tensor(s * x)) for s, x in zip((0.1, 7.0, 2.0), g)], y).item()
    assert scaled == pytest.approx(base, abs=1e-12)


def test_msp_permutation_invariant():
    rng = np.random.default_rng(6)
    y = np.array([0, 1, 2, 2, 1, 0])
    feats = [np.abs(rng.standard_normal((6, 3))) + 0.1 for _ in range(4)]
    perm = rng.permutation(6)

    def value(order):
        A = [L.similarity_matrix(Tensor(f[order])) for f in feats]
        return L.msp_loss(A[0], A[1:], y[order]).item()

    assert value(perm) == pytest.approx(value(np.arange(6)), abs=1e-12)


def test_msp_errors():
    A = Tensor(np.eye(2))
    with pytest.raises(ValueError):
        L.msp_loss(A, [A, A], [0, 0])
    with pytest.raises(dc.ShapeError):
        L.msp_loss(A, [A, Tensor(np.eye(3))], [0, 1])


# --------------------------------------------------------------------------
# weighted cross-entropy


def test_weighted_ce_alpha_one_equals_plain_ce():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((6, 4))
    y = rng.integers(0, 4, 6)
    plain = L.weighted_ce(Tensor(z), None, y).item()
    weighted = L.weighted_ce(Tensor(z), Tensor(np.ones((6, 1))), y).item()
    assert weighted == pytest.approx(plain, abs=1e-12)


def test_weighted_ce_closed_forms():
    # label 0 owns the logit 2: scaled logits [1, 0]
    got = L.weighted_ce(Tensor(np.array([[2.0, 0.0]])), Tensor(np.array([[0.5]])), [0]).item()
    assert got == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)
    assert got == pytest.approx(0.313262, abs=1e-6)
    tiny = L.weighted_ce(Tensor(np.random.default_rng(8).standard_normal((3, 7))), Tensor(np.full((3, 1), 1e-12)), [0, 3, 6])
    assert tiny.item() == pytest.approx(math.log(7), abs=1e-9)
    assert math.log(7) == pytest.approx(1.945910, abs=1e-6)


def test_weighted_ce_monotone_in_alpha_when_label_is_argmax():
    rng = np.random.default_rng(9)
    grid = np.linspace(0.05, 1.0, 20)
    for _ in range(200):
        z = rng.standard_normal(5)
        y = int(np.argmax(z))
        vals = [L.weighted_ce(Tensor(z[None]), Tensor(np.array([[a]])), [y]).item() for a in grid]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


# --------------------------------------------------------------------------
# ramps and total


def test_ramp_values():
    assert L.ramp_up(3, 6) == pytest.approx(math.exp(-0.25), abs=1e-12)
    assert L.ramp_down(12, 6) == pytest.approx(math.exp(-0.25), abs=1e-12)
    assert math.exp(-0.25) == pytest.approx(0.778801, abs=1e-6)
    for beta in (1, 6, 10):
        assert L.ramp_up(beta, beta) == 1.0
        assert L.ramp_down(beta, beta) == 1.0
    with pytest.raises(ValueError):
        L.ramp_up(1, 0)


def test_ramp_monotonicity_and_range():
    ups = [L.ramp_up(e, 6) for e in range(0, 7)]
    downs = [L.ramp_down(e, 6) for e in range(6, 60)]
    assert all(b >= a for a, b in zip(ups, ups[1:]))
    assert all(b <= a for a, b in zip(downs, downs[1:]))
    assert all(0 < w <= 1 for w in ups + downs)
    sched = L.RampSchedule(6)
    assert sched.up(3) == L.ramp_up(3, 6) and sched.down(12) == L.ramp_down(12, 6)


def test_total_loss_at_beta_uses_published_weights():
    got = L.total_loss(0.7, 0.2, 0.003, 1.1, epoch=6)
    assert got == pytest.approx(0.7 + 0.5 * 0.2 + 1000 * 0.003 + 1.1, abs=1e-12)
    assert L.total_loss(0.0, 0.0, 0.0, 0.0, epoch=2) == 0.0


def test_total_loss_is_linear_in_soft_term():
    e = 3
    a = L.total_loss(0.4, 0.2, 0.01, 0.9, e)
    b = L.total_loss(0.4, 0.4, 0.01, 0.9, e)
    assert b - a == pytest.approx(L.ramp_up(e, 6) * 0.5 * 0.2, abs=1e-12)


def test_published_defaults():
    assert (L.DEFAULT_SHARPEN_T, L.DEFAULT_OMEGA, L.DEFAULT_BETA, L.DEFAULT_GAMMA) == (1.2, 0.5, 6, 1e3)


# --------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("name", sorted(COMPONENTS))
@pytest.mark.parametrize("C", CLASS_COUNTS)
def test_component_gradients_match_finite_differences(name, C):
    rng = np.random.default_rng([C, len(name)])
    for _ in range(5):
        fn, points = COMPONENTS[name](rng, C)
        assert dc.grad_check(fn, points, 1e-6) <= 1e-4
