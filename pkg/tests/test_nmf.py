import numpy as np
import pytest

from pcsaliency.errors import NegativeInput, RankTooLarge
from pcsaliency.nmf import NmfConfig, Factorization, factorize, global_concept_map, reconstruct
from pcsaliency.synthetic import low_rank_matrix


def cfg(r, seed=0, iters=500, tol=1e-9):
    return NmfConfig(r=r, max_iterations=iters, relative_tolerance=tol, seed=seed)


def test_identity_rank2_is_exact():
    f = factorize(np.eye(2), cfg(r=2))
    assert f.final_objective <= 1e-10


def test_rank_one_matrix_is_exact():
    a = np.array([[1.0, 2.0], [2.0, 4.0]])
    f = factorize(a, cfg(r=1))
    assert f.final_objective <= 1e-8


def _reference_solver(a, r, seed, max_iterations, tol):
    """Independent plain-loop reimplementation of the factorizer.

    Same seeding scheme and search structure, written with explicit loops
    so a bug in the vectorized code cannot hide in its oracle.
    """
    m, n = a.shape
    eps = 1e-12

    def objective(h, w):
        total = 0.0
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for k in range(r):
                    acc += h[i][k] * w[k][j]
                total += (a[i][j] - acc) ** 2
        return total

    def init(start):
        rng = np.random.default_rng((seed, start))
        scale = (a.mean() / r) ** 0.5
        h = (rng.uniform(size=(m, r)) * scale).tolist()
        w = (rng.uniform(size=(r, n)) * scale).tolist()
        return h, w

    def sweep(h, w):
        # W rows, then H columns, each an exact clipped least-squares step
        hth = [[sum(h[i][p] * h[i][q] for i in range(m)) for q in range(r)] for p in range(r)]
        hta = [[sum(h[i][p] * a[i][j] for i in range(m)) for j in range(n)] for p in range(r)]
        for p in range(r):
            for j in range(n):
                num = hta[p][j] - sum(hth[p][q] * w[q][j] for q in range(r)) + hth[p][p] * w[p][j]
                w[p][j] = max(num / max(hth[p][p], eps), 0.0)
        wwt = [[sum(w[p][j] * w[q][j] for j in range(n)) for q in range(r)] for p in range(r)]
        awt = [[sum(a[i][j] * w[p][j] for j in range(n)) for p in range(r)] for i in range(m)]
        for p in range(r):
            for i in range(m):
                num = awt[i][p] - sum(h[i][q] * wwt[q][p] for q in range(r)) + wwt[p][p] * h[i][p]
                h[i][p] = max(num / max(wwt[p][p], eps), 0.0)
        return h, w

    norm_sq = float(np.sum(a * a))
    best = None
    iterations = 0
    cap = max(32, max_iterations // 4)
    start = 0
    while iterations < max_iterations:
        h, w = init(start)
        prev = objective(h, w)
        if start == 0:
            best = (prev, [row[:] for row in h], [row[:] for row in w])
        best_before = best[0]
        budget = min(cap, max_iterations - iterations)
        for _ in range(budget):
            h, w = sweep(h, w)
            iterations += 1
            obj = objective(h, w)
            if obj < best[0]:
                best = (obj, [row[:] for row in h], [row[:] for row in w])
            if prev - obj < tol * max(prev, eps):
                break
            prev = obj
        if best[0] <= 1e-15 * max(norm_sq, eps):
            break
        if start > 0 and best[0] >= best_before - tol * max(best_before, eps):
            break
        start += 1
    if iterations < max_iterations and best[0] > 1e-15 * max(norm_sq, eps):
        h = [row[:] for row in best[1]]
        w = [row[:] for row in best[2]]
        prev = best[0]
        while iterations < max_iterations:
            h, w = sweep(h, w)
            iterations += 1
            obj = objective(h, w)
            if obj < best[0]:
                best = (obj, h, w)
            if prev - obj < tol * max(prev, eps):
                break
            prev = obj
    return best[0]


def test_seeded_run_matches_independent_reference():
    rng = np.random.default_rng(42)
    a = rng.uniform(size=(20, 16))
    config = cfg(r=4, seed=9, iters=60, tol=1e-7)
    f = factorize(a, config)
    expected = _reference_solver(a, 4, seed=9, max_iterations=60, tol=1e-7)
    assert f.final_objective == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_reconstruct_single_row():
    f = Factorization(
        h=np.array([[1.0]]), w=np.array([[2.0, 3.0]]),
        r=1, iterations_run=0, final_objective=0.0,
    )
    assert np.array_equal(reconstruct(f), np.array([[2.0, 3.0]]))


def test_reconstruct_zero_factors():
    f = Factorization(
        h=np.zeros((4, 2)), w=np.zeros((2, 3)),
        r=2, iterations_run=0, final_objective=0.0,
    )
    assert np.array_equal(reconstruct(f), np.zeros((4, 3)))


def test_reconstruct_matches_triple_loop():
    rng = np.random.default_rng(3)
    h = rng.uniform(size=(5, 3))
    w = rng.uniform(size=(3, 4))
    f = Factorization(h=h, w=w, r=3, iterations_run=0, final_objective=0.0)
    expected = np.zeros((5, 4))
    for i in range(5):
        for j in range(4):
            for k in range(3):
                expected[i, j] += h[i, k] * w[k, j]
    # BLAS may reassociate the inner sum; anything beyond last-ulp noise fails
    assert np.allclose(reconstruct(f), expected, rtol=1e-14, atol=1e-14)


def test_global_concept_map_row_sums():
    f = Factorization(
        h=np.array([[1.0, 2.0], [3.0, 4.0]]), w=np.zeros((2, 2)),
        r=2, iterations_run=0, final_objective=0.0,
    )
    assert np.array_equal(global_concept_map(f), np.array([3.0, 7.0]))


def test_global_concept_map_zero():
    f = Factorization(
        h=np.zeros((3, 2)), w=np.zeros((2, 2)),
        r=2, iterations_run=0, final_objective=0.0,
    )
    assert np.array_equal(global_concept_map(f), np.zeros(3))


def test_global_concept_map_matches_fold():
    rng = np.random.default_rng(11)
    h = rng.uniform(size=(10, 64))
    f = Factorization(h=h, w=np.zeros((64, 1)), r=64, iterations_run=0, final_objective=0.0)
    expected = [sum(row) for row in h.tolist()]
    assert np.allclose(global_concept_map(f), expected, rtol=0, atol=1e-12)


def test_negative_input_rejected_unless_clamped():
    a = np.array([[1.0, -0.5], [0.2, 0.3]])
    with pytest.raises(NegativeInput):
        factorize(a, cfg(r=1))
    f = factorize(a, NmfConfig(r=1, clamp_negatives=True))
    assert np.all(f.h >= 0) and np.all(f.w >= 0)


def test_rank_too_large_rejected():
    with pytest.raises(RankTooLarge):
        factorize(np.ones((3, 5)), cfg(r=4))


def test_factors_stay_non_negative():
    a, rank = low_rank_matrix(2, max_size=24, max_rank=6)
    f = factorize(a, cfg(r=rank, seed=1))
    assert f.h.min() >= 0
    assert f.w.min() >= 0


def test_objective_history_monotone():
    a, rank = low_rank_matrix(5, max_size=32, max_rank=8)
    f = factorize(a, cfg(r=rank, seed=2, iters=300))
    diffs = np.diff(f.objective_history)
    assert np.all(diffs <= 1e-9 * np.maximum(f.objective_history[:-1], 1.0))
    assert len(f.objective_history) == f.iterations_run + 1
    assert f.final_objective == f.objective_history[-1]


def test_bit_identical_across_runs():
    a, rank = low_rank_matrix(7, max_size=32, max_rank=8)
    c = cfg(r=rank, seed=13, iters=120)
    f1 = factorize(a, c)
    f2 = factorize(a, c)
    assert np.array_equal(f1.h, f2.h)
    assert np.array_equal(f1.w, f2.w)
    assert f1.final_objective == f2.final_objective
    assert f1.iterations_run == f2.iterations_run


def test_low_rank_exactness_small():
    for seed in range(5):
        a, rank = low_rank_matrix(seed, max_size=32, max_rank=8)
        f = factorize(a, cfg(r=rank, seed=seed))
        assert f.final_objective / np.sum(a * a) <= 1e-6
