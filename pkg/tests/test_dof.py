import numpy as np
import pytest

from layerrisk.data import make_synthetic_lowrank
from layerrisk.dof import (LayerActivationMatrix, centralize, estimate_dof, projection_size, run_dof_schedule)
from layerrisk.errors import ConfigError, ContractError
from layerrisk.nn import OptimizerState, build_model, optimizer_step
from layerrisk.tensor import SeededRng, eig_symmetric


def full_spectrum_dof(H, tau):
    """Oracle: threshold count on the exact (1/m) H~ H~^T without projection."""
    Hc = H - H.mean(axis=1, keepdims=True)
    lam = np.sort(np.linalg.eigvalsh(Hc @ Hc.T / H.shape[1]))[::-1]
    ratio = np.cumsum(lam) / lam.sum()
    return int(np.argmax(ratio >= tau)) + 1


def test_projection_size():
    assert projection_size(200) == 20
    assert projection_size(6912) == 692
    assert projection_size(5) == 2
    assert projection_size(30, 0.1) == 3


def test_centralize_constant_and_idempotent():
    H = np.tile(np.array([[1.0], [2.0], [-3.0]]), (1, 5))
    assert not centralize(H).any()
    gen = np.random.default_rng(0)
    X = centralize(gen.standard_normal((4, 6)))
    np.testing.assert_allclose(centralize(X), X, atol=1e-15)


def test_centralize_matches_row_loop():
    H = np.random.default_rng(1).standard_normal((4, 6))
    expected = np.empty_like(H)
    for i in range(4):
        mu = sum(H[i]) / 6
        for j in range(6):
            expected[i, j] = H[i, j] - mu
    out = centralize(H)
    np.testing.assert_allclose(out, expected, atol=1e-14)
    assert np.all(np.abs(out.sum(axis=1)) <= 1e-9 * 6 * np.abs(H).max())


def test_centralize_needs_two_samples():
    with pytest.raises(ContractError):
        centralize(np.ones((3, 1)))


def test_constant_batch_is_degenerate():
    est = estimate_dof(np.ones((50, 8)), 0.95, SeededRng(0))
    assert est.dof == 0 and est.degenerate and est.r_l == 5


def test_noiseless_rank3_matches_full_spectrum():
    for seed in range(5):
        H = make_synthetic_lowrank(256, 200, 3, 0.0, seed=seed)
        est = estimate_dof(H, 0.95, SeededRng(seed, 1))
        assert est.r_l == 20
        assert est.dof == full_spectrum_dof(H, 0.95) == 3


def test_isotropic_data_gives_near_full_count():
    counts = []
    for seed in range(20):
        H = np.random.default_rng(seed).standard_normal((100, 256))
        counts.append(estimate_dof(H, 0.95, SeededRng(seed, 7)).dof)
    mode = max(set(counts), key=counts.count)
    assert mode in (9, 10)


def test_threshold_definition_holds():
    gen = np.random.default_rng(3)
    for seed in range(10):
        H = gen.standard_normal((60, 40)) * gen.exponential(size=(60, 1))
        est = estimate_dof(H, 0.9, SeededRng(seed))
        ratio = est.spectrum.cumulative_ratio()
        assert 1 <= est.dof <= est.r_l
        assert ratio[est.dof - 1] >= 0.9
        if est.dof > 1:
            assert ratio[est.dof - 2] < 0.9


def test_monotone_in_tau_and_scale_invariant():
    H = np.random.default_rng(4).standard_normal((80, 50)) * np.linspace(0.1, 3, 80)[:, None]
    rng = SeededRng(9)
    dofs = [estimate_dof(H, t, rng).dof for t in (0.5, 0.7, 0.9, 0.95, 0.99)]
    assert dofs == sorted(dofs)
    base = estimate_dof(H, 0.95, rng).dof
    for c in (1e-3, -2.0, 1e4):
        assert estimate_dof(c * H, 0.95, rng).dof == base


def test_dof_bounded_by_samples():
    H = np.random.default_rng(5).standard_normal((300, 6))      # r_l = 30, m - 1 = 5
    est = estimate_dof(H, 0.999, SeededRng(0))
    assert est.dof <= min(est.r_l, 5)
    lam = est.spectrum.eigenvalues
    assert np.all(lam[5:] <= 1e-9 * lam[0])


def test_tau_out_of_range():
    with pytest.raises(ContractError):
        estimate_dof(np.ones((4, 4)), 1.0, SeededRng(0))
    with pytest.raises(ContractError):
        estimate_dof(np.ones((4, 4)), 0.0, SeededRng(0))


def test_jacobi_and_lapack_paths_agree():
    H = make_synthetic_lowrank(128, 100, 4, 0.05, seed=2)
    a = estimate_dof(H, 0.95, SeededRng(1), eig_method="lapack")
    b = estimate_dof(H, 0.95, SeededRng(1), eig_method="jacobi")
    assert a.dof == b.dof
    np.testing.assert_allclose(a.spectrum.eigenvalues, b.spectrum.eigenvalues,
                               atol=1e-8 * a.spectrum.eigenvalues[0])


def test_accepts_activation_matrix_record():
    H = make_synthetic_lowrank(64, 40, 2, 0.0, seed=0)
    est = estimate_dof(LayerActivationMatrix("Conv2d_2", H, epoch=3), 0.95, SeededRng(0))
    assert (est.layer_id, est.epoch) == ("Conv2d_2", 3)
    assert est.dof == estimate_dof(H, 0.95, SeededRng(0)).dof


def test_projected_covariance_is_exactly_rt_c_r():
    H = np.random.default_rng(8).standard_normal((30, 12))
    est = estimate_dof(H, 0.95, SeededRng(4, 2))
    R = SeededRng(4, 2).generator().standard_normal((30, 3))
    Hc = H - H.mean(axis=1, keepdims=True)
    expected = eig_symmetric(R.T @ (Hc @ Hc.T / 12) @ R).eigenvalues
    np.testing.assert_allclose(est.spectrum.eigenvalues, expected, rtol=1e-10)


def _fidelity_rate(r, r_l=20, ambient=200, m=256, seeds=50):
    hits = 0
    for seed in range(seeds):
        H = make_synthetic_lowrank(m, ambient, r, 0.0, seed=1000 * r + seed)
        est = estimate_dof(H, 0.95, SeededRng(seed, r), projection_factor=r_l / ambient)
        hits += est.dof == full_spectrum_dof(H, 0.95)
    return hits / seeds


@pytest.mark.parametrize("r", [2, 3])
def test_projection_fidelity_for_small_rank(r):
    assert _fidelity_rate(r) >= 0.9


@pytest.mark.xfail(strict=True, reason="a Gaussian r_l x r sketch spreads the r equal eigenvalues "
                                       "enough that the smallest falls under 1 - tau for r >= 5")
def test_projection_fidelity_over_full_stated_range():
    # r <= r_l / 2 with r_l = 20 and m = 256 >= 4 r_l
    assert all(_fidelity_rate(r) >= 0.9 for r in range(2, 11))


def _cnn_and_batch():
    model = build_model("cnn_mnist", 10, seed=0)
    x = np.random.default_rng(0).random((32, 1, 28, 28))
    return model, x


def test_schedule_empty_duplicate_and_unknown_layers():
    model, x = _cnn_and_batch()
    assert run_dof_schedule(model, x, [], 0.95, 1) == []
    a, b = run_dof_schedule(model, x, ["Conv2d_1", "Conv2d_1"], 0.95, 1, seed=3)
    assert a.dof == b.dof
    np.testing.assert_array_equal(a.spectrum.eigenvalues, b.spectrum.eigenvalues)
    with pytest.raises(ConfigError):
        run_dof_schedule(model, x, ["Conv2d_7"], 0.95, 1)


def test_schedule_uses_per_layer_tau_override():
    model, x = _cnn_and_batch()
    low = run_dof_schedule(model, x, ["Conv2d_1"], 0.95, 1, tau_overrides={"Conv2d_1": 0.5})[0]
    high = run_dof_schedule(model, x, ["Conv2d_1"], 0.95, 1)[0]
    assert low.tau == 0.5 and low.dof < high.dof


def test_trained_and_untrained_estimates_differ():
    gen = np.random.default_rng(1)
    differs = 0
    for seed in range(3):
        model = build_model("cnn_mnist", 10, seed=seed)
        x = gen.random((64, 1, 28, 28))
        before = run_dof_schedule(model, x, ["Conv2d_1"], 0.95, 1, seed=seed)[0]
        opt = OptimizerState("adam", 0.01)
        for _ in range(10):
            model.forward(x, gen.integers(0, 10, 64)).loss.backward()
            optimizer_step(opt, model)
        after = run_dof_schedule(model, x, ["Conv2d_1"], 0.95, 1, seed=seed)[0]
        differs += not np.allclose(before.spectrum.eigenvalues, after.spectrum.eigenvalues)
    assert differs == 3
