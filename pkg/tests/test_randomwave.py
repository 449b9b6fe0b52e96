import logging
from math import pi

import pytest
from numpy import allclose, array, einsum, exp, eye, ndarray, sqrt, zeros
from numpy.random import default_rng
from pytest import approx

from arwaves.errors import DomainError, MatrixError, NearSingularError, ResolutionError
from arwaves.lattice import LatticeSet
from arwaves.nodal import extract_nodal_curve
from arwaves.randomwave import (
    Frame,
    KacRiceMatrices,
    WaveSample,
    covariance_jet,
    covariance_matrix_phi,
    energy_scale,
    evaluate,
    expansion_errors,
    gaussian_norm_product,
    identity_errors,
    k1_density,
    k2_exact,
    k2_expanded,
    kacrice_matrices,
    pairwise_covariance,
    pairwise_covariance_jet,
    perturbed_gaussian_moment,
    projection,
    reduced_theta,
    sample,
    smoothed_length,
    square_root,
)
from arwaves.surface import Surface, triangulate

X_SMALL = array([[1.0, 0.3], [0.3, -0.5]])
XP_SMALL = array([[-0.4, 0.1], [0.1, 0.8]])
Y_SMALL = array([[0.5, -0.2], [0.3, 0.1]])


def _unit(n: int, seed: int = 0) -> ndarray:
    v = default_rng(seed).standard_normal((n, 3))
    return v / sqrt((v**2).sum(axis=1))[:, None]


def _matrices(X: ndarray, X_p: ndarray, Y: ndarray, r: float) -> KacRiceMatrices:
    theta_hat = eye(4)
    theta_hat[:2, :2] += X
    theta_hat[2:, 2:] += X_p
    theta_hat[:2, 2:] += Y
    theta_hat[2:, :2] += Y.T
    return KacRiceMatrices(
        omega=eye(3),
        omega_p=eye(3),
        q=eye(2),
        q_p=eye(2),
        X=X,
        X_p=X_p,
        Y=Y,
        Y_p=Y.T,
        theta_hat=theta_hat,
        r=array(r),
    )


def test_sample_deterministic(lattice11: LatticeSet) -> None:
    a = sample(lattice11, 7)
    b = sample(lattice11, 7)
    c = sample(lattice11, 8)
    assert (a.coefficients == b.coefficients).all()
    assert not (a.coefficients == c.coefficients).all()
    assert len(a.coefficients) == lattice11.n_points // 2
    with pytest.raises(ValueError):
        sample(lattice11, -1)


def test_sample_empty_lattice() -> None:
    with pytest.raises(DomainError):
        sample(LatticeSet(m=7, points=zeros((0, 3), dtype=int)), 0)


def test_wave_sample_json(lattice11: LatticeSet) -> None:
    wave = sample(lattice11, 3)
    restored = WaveSample.from_json(wave.to_json(), lattice11)
    assert restored.seed == 3
    assert allclose(restored.coefficients, wave.coefficients, rtol=1e-15)
    with pytest.raises(DomainError):
        WaveSample.from_json(wave.to_json(), LatticeSet(m=3, points=[[1, 1, 1]]))


def test_field_is_real(lattice11: LatticeSet) -> None:
    wave = sample(lattice11, 1)
    x = default_rng(0).random((5, 3))
    terms = wave.full_coefficients() * exp(2j * pi * x @ lattice11.points.T)
    total = terms.sum(axis=1) / sqrt(lattice11.n_points)
    value, _ = evaluate(wave, x)
    assert allclose(total.imag, 0.0, atol=1e-12)
    assert allclose(total.real, value, atol=1e-12)


def test_gradient_finite_difference(lattice11: LatticeSet) -> None:
    wave = sample(lattice11, 2)
    x = default_rng(1).random((4, 3))
    _, gradient = wave(x)
    step = 1e-6
    for axis in range(3):
        shift = zeros(3)
        shift[axis] = step
        upper, lower = evaluate(wave, x + shift)[0], evaluate(wave, x - shift)[0]
        fd = (upper - lower) / (2 * step)
        assert allclose(fd, gradient[:, axis], atol=1e-5)


def test_field_variance(lattice11: LatticeSet) -> None:
    x = array([0.3, 0.1, 0.7])
    values = array([evaluate(sample(lattice11, s), x)[0] for s in range(2000)])
    assert (values**2).mean() == approx(1.0, abs=0.15)


def test_covariance_at_zero(lattice11: LatticeSet) -> None:
    x = array([0.2, 0.4, 0.6])
    jet = covariance_jet(lattice11, x, x)
    assert jet.r == approx(1.0)
    assert allclose(jet.D, 0.0)
    assert allclose(jet.hess, -energy_scale(11) * eye(3))


def test_pairwise_covariance_jet(lattice11: LatticeSet) -> None:
    rng = default_rng(2)
    x, y = rng.random((4, 3)), rng.random((5, 3))
    ref = covariance_jet(lattice11, x[:, None, :], y[None, :, :])
    jet = pairwise_covariance_jet(lattice11, x, y)
    assert jet.r.shape == (4, 5)
    assert allclose(jet.r, ref.r, atol=1e-12)
    assert allclose(jet.D, ref.D, atol=1e-10)
    assert allclose(jet.hess, ref.hess, atol=1e-8)
    assert allclose(pairwise_covariance(lattice11, x, y), ref.r, atol=1e-12)


def test_square_root_identity() -> None:
    normals = _unit(50)
    q = square_root(normals)
    selection = Frame.pivot(normals).selection()
    sos = einsum("pij,pjk,plk->pil", selection, projection(normals), selection)
    identity = einsum("pij,pjk,pkl->pil", q, q, sos)
    assert allclose(identity, eye(2), atol=1e-10)
    assert allclose(q, q.swapaxes(-1, -2))


def test_projection_idempotent() -> None:
    omega = projection(_unit(10))
    assert allclose(einsum("pij,pjk->pik", omega, omega), omega)


def test_frame_vanishing_axis(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.ERROR)
    with pytest.raises(DomainError):
        Frame.with_axis([[1.0, 0.0, 0.0]], 2)
    assert "vanishing normal component" in caplog.text


def _separated_pairs(lattice: LatticeSet, n: int) -> tuple:
    rng = default_rng(3)
    x, y = rng.random((n, 3)), rng.random((n, 3))
    keep = abs(covariance_jet(lattice, x, y).r) < 0.9
    return x[keep], y[keep]


def test_theta_hat_is_reduced_covariance(lattice11: LatticeSet) -> None:
    x, y = _separated_pairs(lattice11, 40)
    n, n_p = _unit(len(x), 4), _unit(len(x), 5)
    mats = kacrice_matrices(covariance_jet(lattice11, x, y), n, n_p)
    assert allclose(mats.theta_hat, mats.theta_hat.swapaxes(-1, -2))
    phi = covariance_matrix_phi(lattice11, x, y, n, n_p)
    theta = reduced_theta(phi, mats.q, mats.q_p, 11)
    assert allclose(theta, mats.theta_hat, atol=1e-9)


def test_traces_frame_invariant(lattice11: LatticeSet) -> None:
    x, y = _separated_pairs(lattice11, 40)
    n, n_p = _unit(len(x), 6), _unit(len(x), 7)
    jet = covariance_jet(lattice11, x, y)
    pivoted = kacrice_matrices(jet, n, n_p)
    fixed = kacrice_matrices(
        jet, n, n_p, frame=Frame.with_axis(n, 0), frame_p=Frame.with_axis(n_p, 1)
    )
    for a, b in zip(pivoted.traces(), fixed.traces()):
        assert allclose(a, b, rtol=1e-7, atol=1e-12)
    assert (pivoted.traces()[0] <= 0.0).all()
    assert (pivoted.traces()[2] >= 0.0).all()


def test_kacrice_matrices_singular(lattice11: LatticeSet) -> None:
    x = array([[0.1, 0.2, 0.3]])
    with pytest.raises(NearSingularError):
        kacrice_matrices(covariance_jet(lattice11, x, x), _unit(1), _unit(1))


def test_gaussian_moment_identity() -> None:
    zero = zeros((2, 2))
    moment = perturbed_gaussian_moment(zero, zero, zero, zero)
    assert moment.numeric == approx(pi / 2, rel=1e-8)
    assert moment.formula == approx(pi / 2)
    assert moment.gap < 1e-6
    assert moment.error < 1e-6


def test_gaussian_moment_perturbation() -> None:
    gaps = []
    for eps in (0.02, 0.01):
        moment = perturbed_gaussian_moment(
            eps * X_SMALL, eps * XP_SMALL, eps * Y_SMALL, eps * Y_SMALL.T
        )
        gaps.append(moment.gap)
    assert gaps[0] < 1e-3
    assert gaps[1] < gaps[0] / 3.0, "The gap should shrink quadratically"


def test_gaussian_moment_qmc() -> None:
    moment = perturbed_gaussian_moment(
        zeros((2, 2)),
        zeros((2, 2)),
        zeros((2, 2)),
        zeros((2, 2)),
        method="qmc",
        n_qmc=2**12,
        n_replicates=8,
    )
    assert abs(moment.numeric - pi / 2) < 6 * moment.error + 5e-3


def test_gaussian_moment_invalid() -> None:
    with pytest.raises(DomainError):
        skew = X_SMALL + array([[0.0, 1.0], [0.0, 0.0]])
        perturbed_gaussian_moment(skew, X_SMALL, Y_SMALL, Y_SMALL.T)
    with pytest.raises(DomainError):
        perturbed_gaussian_moment(X_SMALL, X_SMALL, Y_SMALL, Y_SMALL)
    with pytest.raises(MatrixError):
        gaussian_norm_product(-eye(4))
    with pytest.raises(ValueError):
        gaussian_norm_product(eye(3))
    with pytest.raises(ValueError):
        gaussian_norm_product(eye(4), method="laguerre")  # type: ignore[arg-type]


def test_gaussian_norm_product_batched() -> None:
    stack = array([eye(4), 2.0 * eye(4), eye(4)])
    values, errors = gaussian_norm_product(stack)
    assert values.shape == (3,)
    # scaling the covariance by 2 scales both norms by sqrt(2)
    assert values[1] == approx(2.0 * values[0], rel=1e-8)
    assert values[2] == approx(values[0], rel=1e-14)


def test_k2_far_pairs() -> None:
    mats = _matrices(zeros((2, 2)), zeros((2, 2)), zeros((2, 2)), 0.0)
    value, _ = k2_exact(mats)
    assert value == approx(0.25, rel=1e-8)
    assert k2_expanded(mats) == approx(0.25)


def test_k2_expansion_accuracy() -> None:
    eps = 0.02
    mats = _matrices(eps * X_SMALL, eps * XP_SMALL, eps * Y_SMALL, 0.1)
    exact, _ = k2_exact(mats)
    assert abs(exact - k2_expanded(mats)) < 1e-3


def test_k2_expanded_radius(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.ERROR)
    mats = _matrices(zeros((2, 2)), zeros((2, 2)), zeros((2, 2)), 0.0)
    with pytest.raises(DomainError):
        k2_expanded(mats, r=0.7)
    assert "Expansion requires |r| <= 0.5" in caplog.text


def test_k1_density() -> None:
    assert k1_density(3) == approx(pi)
    with pytest.raises(DomainError):
        k1_density(0)


@pytest.mark.slow
def test_smoothed_length_matches_nodal_length(
    lattice3: LatticeSet, sphere: Surface
) -> None:
    mesh = triangulate(sphere, 0.005)
    for seed in range(3):
        wave = sample(lattice3, seed)
        curve = extract_nodal_curve(wave, mesh)
        smoothed = smoothed_length(wave, sphere, 0.005, mesh=mesh)
        assert smoothed == approx(curve.total_length, rel=0.05)


def test_smoothed_length_callable(sphere: Surface) -> None:
    def field(points: ndarray) -> tuple:
        gradient = zeros(points.shape)
        gradient[:, 2] = 1.0
        return points[:, 2] - 0.55, gradient

    expected = 2 * pi * sqrt(0.2**2 - 0.05**2)
    assert smoothed_length(field, sphere, 0.001, h=0.005) == approx(expected, rel=0.01)


def test_smoothed_length_resolution(lattice3: LatticeSet, sphere: Surface) -> None:
    with pytest.raises(ResolutionError):
        smoothed_length(sample(lattice3, 0), sphere, 0.01, h=0.1)


def test_identity_errors(lattice11: LatticeSet) -> None:
    errors = identity_errors(lattice11, n_pairs=200, seed=3)
    assert 0 < errors["n_pairs"] <= 200
    for key in ("square_root", "projection", "theta_symmetry", "frame_invariance"):
        assert errors[key] <= 1e-10, key
    assert errors["theta_min_eigenvalue"] > 0.0


def test_expansion_errors(lattice11: LatticeSet) -> None:
    errors = expansion_errors(lattice11, n_pairs=2000, seed=1, radius=0.3)
    assert errors["n_pairs"] >= 1000
    assert errors["max_gap"] > 0.0
    assert errors["excess"] <= 1e-7


def test_expansion_errors_radius(lattice11: LatticeSet) -> None:
    with pytest.raises(DomainError):
        expansion_errors(lattice11, n_pairs=10, radius=0.6)


@pytest.mark.slow
def test_smoothed_length_bound(lattice3: LatticeSet, sphere: Surface) -> None:
    mesh = triangulate(sphere, 0.005)
    smoothed, nodal = [], []
    for seed in range(100):
        wave = sample(lattice3, seed)
        smoothed.append(smoothed_length(wave, sphere, 0.005, mesh=mesh))
        nodal.append(extract_nodal_curve(wave, mesh).total_length)
    assert max(smoothed) <= 18 * sqrt(3)
    assert sum(smoothed) == approx(sum(nodal), rel=0.03)
