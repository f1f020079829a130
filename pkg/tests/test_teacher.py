import math

import numpy as np
import pytest
import torch

from policyflow.gm import X0_SPACE, FactorGM, IsoGM, gm_velocity
from policyflow.teacher import (GMPrior, TeacherSpec, gen_toy_dataset, in_checkerboard, posterior_terms,
                                read_dataset_csv, teacher_preset, teacher_sample, teacher_sample_batch,
                                teacher_velocity, teacher_velocity_cfg, write_samples_csv)

from oracles import gaussian_mixture_velocity_1d, single_gaussian_flow


def spec1(weights, means, stds, **kw):
    return TeacherSpec({0: GMPrior(weights, means, stds)}, **kw)


def test_hand_single_component():
    sp = spec1([1.0], [[0.0]], [1.0])
    assert abs(float(teacher_velocity(sp, [[0.5]], 0.5, 0)[0, 0])) < 1e-15


def test_responsibility_dominance():
    sp = spec1([0.5, 0.5], [[-20.0, 0.0], [20.0, 0.0]], [0.3, 0.3])
    t = 0.4
    x = (1 - t) * np.array([[20.0, 0.0]])
    _, r = posterior_terms(sp.classes[0], x, t)
    w = np.exp(r - r.max()); w /= w.sum()
    assert w[0, 1] > 1 - 1e-6
    u = teacher_velocity(sp, x, t, 0)
    # the single-Gaussian conjugate velocity of the dominant component
    a, rho2 = 1 - t, 0.09
    m = (20.0 / rho2 + a * x[0, 0] / t**2) / (1 / rho2 + a**2 / t**2)
    assert u[0, 0] == pytest.approx((x[0, 0] - m) / t, rel=1e-9)


def test_velocity_matches_quadrature_200_cases():
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        J = r.integers(1, 5)
        w = r.dirichlet(np.ones(J))
        mu = r.normal(0, 2, J)
        sd = r.uniform(0.2, 1.0, J)
        t = r.uniform(0.05, 1.0)
        x = r.normal(0, 1.5)
        u = float(teacher_velocity(spec1(w, mu[:, None], sd), [[x]], t, 0)[0, 0])
        ref = gaussian_mixture_velocity_1d(w, mu, sd, x, t)
        # compare posterior means (the velocity scales them by 1/t)
        ex, eref = x - t * u, x - t * ref
        worst = max(worst, abs(ex - eref) / max(abs(eref), 1e-3))
    assert worst <= 1e-6


def test_responsibilities_normalized():
    sp = teacher_preset("ring8")
    r = np.random.default_rng(1)
    _, lr = posterior_terms(sp.classes[0], r.normal(0, 3, (100, 2)), r.uniform(1e-4, 1, 100))
    w = np.exp(lr - lr.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)


def test_cross_derivation_with_gm_policy():
    """Teacher (conjugate form) and the GM policy velocity (anchored at t_src=1) agree."""
    r = np.random.default_rng(2)
    worst = 0.0
    for _ in range(500):
        J, D = r.integers(1, 6), 2
        w = r.dirichlet(np.ones(J))
        mu = r.normal(0, 2, (J, D))
        rho = r.uniform(0.1, 1.0)
        sp = spec1(w, mu, rho)
        x = r.normal(0, 2, (1, D))
        t = r.uniform(1e-3, 1.0)
        u_t = teacher_velocity(sp, x, t, 0)[0]
        pol = FactorGM(IsoGM(torch.tensor(np.log(w))[None], torch.tensor(mu)[None], torch.tensor(math.log(rho)),
                             X0_SPACE), torch.tensor(r.normal(size=(1, D))), torch.tensor(1.0))
        u_g = gm_velocity(pol, torch.tensor(x), torch.tensor(t)).numpy()[0]
        worst = max(worst, np.abs(u_t - u_g).max() / max(np.abs(u_t).max(), 1e-12))
    assert worst <= 1e-9


def test_cfg_combiner():
    cond = GMPrior([1.0], [[1.0]], [0.5])
    other = GMPrior([1.0], [[-1.0]], [0.5])
    sp1 = TeacherSpec({0: cond, 1: other}, 1.0)
    x, t = np.array([[0.2]]), 0.4
    np.testing.assert_array_equal(teacher_velocity_cfg(sp1, x, t, 0), teacher_velocity(sp1, x, t, 0))
    sp2 = TeacherSpec({0: cond, 1: other}, 2.0, (0.0, 0.3))
    np.testing.assert_array_equal(teacher_velocity_cfg(sp2, x, 0.4, 0), teacher_velocity(sp2, x, 0.4, 0))
    sp3 = TeacherSpec({0: cond, 1: other}, 2.0, (0.0, 0.7))
    u_c = teacher_velocity(sp3, x, t, 0)
    from policyflow.teacher import prior_velocity
    u_u = prior_velocity(sp3.uncond, x, t)
    np.testing.assert_allclose(teacher_velocity_cfg(sp3, x, t, 0), u_u + 2 * (u_c - u_u), rtol=1e-14)


def test_cfg_linear_combination_hand(monkeypatch):
    import policyflow.teacher as tm
    sp = TeacherSpec({0: GMPrior([1.0], [[0.0]], [1.0])}, 2.0, (0.0, 1.0))
    monkeypatch.setattr(tm, "teacher_velocity", lambda *a: np.array([[1.0]]))
    monkeypatch.setattr(tm, "prior_velocity", lambda *a: np.array([[0.0]]))
    np.testing.assert_array_equal(tm.teacher_velocity_cfg(sp, [[0.0]], 0.5, 0), [[2.0]])


def test_teacher_errors():
    sp = teacher_preset("ring8")
    with pytest.raises(ValueError):
        teacher_velocity(sp, [[0.0, 0.0]], 0.5, 3)
    with pytest.raises(ValueError):
        teacher_velocity(sp, [[0.0, 0.0]], 1e-6, 0)
    with pytest.raises(ValueError):
        GMPrior([0.5, 0.4], [[0.0], [1.0]], [1.0, 1.0])
    with pytest.raises(ValueError):
        TeacherSpec({0: GMPrior([1.0], [[0.0]], [1.0])}, 0.5)
    with pytest.raises(ValueError):
        TeacherSpec.from_dict({"classes": {}, "bogus": 1})


def test_spec_dict_roundtrip():
    sp = teacher_preset("two_ring", cfg_scale=1.5, cfg_interval=(0.0, 0.7))
    back = TeacherSpec.from_dict(sp.to_dict())
    assert back.to_dict() == sp.to_dict()


# -- datasets -----------------------------------------------------------------

def test_dataset_determinism_and_membership():
    a = gen_toy_dataset("gm-grid", 4, 7)
    b = gen_toy_dataset("gm-grid", 4, 7)
    np.testing.assert_array_equal(a.samples, b.samples)
    cb = gen_toy_dataset("checkerboard", 5000, 0)
    assert in_checkerboard(cb.samples).all()
    rings = gen_toy_dataset("rings", 100, 0)
    assert rings.samples.shape == (100, 2)
    with pytest.raises(ValueError):
        gen_toy_dataset("spiral", 10, 0)


def test_gm_grid_law_of_large_numbers():
    sp = teacher_preset("gm_grid")
    n = 100_000
    ds = gen_toy_dataset("gm-grid", n, 3, sp)
    prior = sp.classes[0]
    mean = prior.mean()
    # total per-axis variance of the mixture
    var = prior.weights @ (prior.stds[:, None] ** 2 + prior.means**2) - mean**2
    assert np.all(np.abs(ds.samples.mean(0) - mean) <= 3 * np.sqrt(var / n))


def test_csv_roundtrip(tmp_path):
    x = np.random.default_rng(0).normal(size=(5, 3))
    p = tmp_path / "s.csv"
    write_samples_csv(p, x, [0, 1, 0, 1, 1])
    ds = read_dataset_csv(p)
    np.testing.assert_array_equal(ds.samples, x)
    np.testing.assert_array_equal(ds.labels, [0, 1, 0, 1, 1])
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_dataset_csv(tmp_path / "bad.csv")


# -- sampling -----------------------------------------------------------------

def test_single_gaussian_sample_lands_on_mean():
    theta = np.array([0.7, -1.2])
    sp = spec1([1.0], theta[None], [1e-3])
    x = teacher_sample(sp, 0, 512, seed=5)
    assert np.abs(x - theta).max() <= 1e-2


def test_single_gaussian_flow_oracle():
    theta, rho = np.array([0.5, 1.0]), 0.6
    sp = spec1([1.0], theta[None], [rho])
    x, (taus, states) = teacher_sample_batch(sp, 0, 16, 2048, seed=1, record=True)
    exact = single_gaussian_flow(states[0], theta, rho, 0.0)
    assert np.abs(x - exact).max() <= 5e-3


def test_endpoint_moments_single_gaussian():
    theta, rho, n = np.array([0.5, -0.5]), 0.7, 10_000
    x = teacher_sample_batch(spec1([1.0], theta[None], [rho]), 0, n, 256, seed=11)
    se = rho / math.sqrt(n)
    assert np.all(np.abs(x.mean(0) - theta) <= 4 * se)
    cov = np.cov(x.T)
    var_se = rho**2 * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(np.diag(cov) - rho**2) <= 4 * var_se + 0.01 * rho**2)  # plus O(h) solver bias
    assert abs(cov[0, 1]) <= 4 * rho**2 / math.sqrt(n)


def test_teacher_convergence_order():
    sp = teacher_preset("ring8")
    ref = teacher_sample_batch(sp, 0, 64, 2048, seed=2)
    e128 = np.linalg.norm(teacher_sample_batch(sp, 0, 64, 128, seed=2) - ref, axis=1).mean()
    e256 = np.linalg.norm(teacher_sample_batch(sp, 0, 64, 256, seed=2) - ref, axis=1).mean()
    assert 1.5 <= e128 / e256 <= 2.5


def test_sampling_deterministic_and_batch_consistent():
    sp = teacher_preset("two_ring")
    a = teacher_sample_batch(sp, [0, 1, 0], 3, 32, seed=9)
    b = teacher_sample_batch(sp, [0, 1, 0], 3, 32, seed=9)
    assert a.tobytes() == b.tobytes()
    one = teacher_sample_batch(sp, [1], 1, 32, seed=9, offset=1)
    np.testing.assert_allclose(one[0], a[1], rtol=1e-14, atol=1e-14)
    assert teacher_sample(sp, 0, 32, 9).tobytes() == a[0].tobytes()
