import logging
from math import ceil, sqrt

import pytest
from numpy import array, pi, zeros
from pytest import approx

from arwaves.errors import DomainError, NumericError, ResolutionError
from arwaves.kacrice import (
    MomentReport,
    SingularPartition,
    approx_variance,
    exact_second_moment,
    moment_Rk,
    resolved_order,
    singular_partition,
    trace_integrals,
    two_point_density,
)
from arwaves.lattice import LatticeSet, enumerate
from arwaves.nodal import predict_mean
from arwaves.randomwave import CovarianceJet, energy_scale
from arwaves.surface import Surface, SurfaceSpec, make_surface


@pytest.fixture(scope="module")
def partition(lattice3: LatticeSet, sphere: Surface) -> SingularPartition:
    return singular_partition(lattice3, sphere, check_bound=False)


@pytest.fixture(scope="module")
def report(lattice3: LatticeSet, monge: Surface) -> MomentReport:
    return trace_integrals(lattice3, monge)


def test_resolved_order(lattice3: LatticeSet, sphere: Surface) -> None:
    expected = max(8, ceil(10 * sqrt(3) * sphere.max_chart_length))
    assert resolved_order(lattice3, sphere) == expected
    assert resolved_order(lattice3, sphere, min_order=64) == 64


def test_moment_R0(lattice3: LatticeSet, sphere: Surface) -> None:
    assert moment_Rk(lattice3, sphere, 0, order=8) == approx(sphere.area**2, rel=1e-9)


def test_moment_R2_lower_bound(lattice11: LatticeSet, monge: Surface) -> None:
    # the antipodal terms alone contribute A^2 / N
    weights = monge.nodes(12).weights
    r2 = moment_Rk(lattice11, monge, 2, order=12)
    assert r2 >= weights.sum() ** 2 / lattice11.n_points * (1 - 1e-10)
    r4 = moment_Rk(lattice11, monge, 4, order=12)
    assert 0.0 <= r4 <= r2


def test_moment_invalid(lattice3: LatticeSet, sphere: Surface) -> None:
    with pytest.raises(DomainError):
        moment_Rk(lattice3, sphere, -1)
    with pytest.raises(DomainError):
        moment_Rk(LatticeSet(m=7, points=zeros((0, 3), dtype=int)), sphere, 2)


def test_partition_cells(partition: SingularPartition, sphere: Surface) -> None:
    assert partition.delta == approx(0.1 / sqrt(3))
    assert partition.n_cells == len(partition.bounds) == len(partition.centers)
    assert partition.cell_area.sum() == approx(sphere.area, rel=1e-5)
    sides = partition.bounds[:, 1] - partition.bounds[:, 0]
    assert (sides > 0).all()


def test_partition_flags(partition: SingularPartition) -> None:
    flags = partition.flags
    assert flags.diagonal().all(), "Every cell is singular with itself"
    assert (flags == flags.T).all()
    diagonal = (partition.cell_area**2).sum()
    assert diagonal <= partition.singular_measure <= partition.cell_area.sum() ** 2
    assert partition.bound_ok is None
    assert partition.to_dict()["n_flagged_pairs"] >= partition.n_cells


def test_partition_margin(lattice3: LatticeSet, sphere: Surface) -> None:
    strict = singular_partition(lattice3, sphere, check_bound=False)
    loose = singular_partition(lattice3, sphere, margin=0.2, check_bound=False)
    assert (loose.flags >= strict.flags).all()
    assert loose.singular_measure >= strict.singular_measure
    with pytest.raises(ValueError):
        singular_partition(lattice3, sphere, margin=0.5)


def test_partition_bound(lattice3: LatticeSet, sphere: Surface) -> None:
    partition = singular_partition(lattice3, sphere, r4=1.0)
    assert partition.measure_bound == approx(256.0)
    assert partition.bound_ok


def test_partition_cell_of(partition: SingularPartition, sphere: Surface) -> None:
    nodes = sphere.nodes(8)
    cells = partition.cell_of(nodes)
    assert (partition.chart[cells] == nodes.chart).all()
    bounds = partition.bounds[cells]
    u, v = nodes.uv[:, 0], nodes.uv[:, 1]
    tol = 1e-12
    assert ((bounds[:, 0] - tol <= u) & (u <= bounds[:, 1] + tol)).all()
    assert ((bounds[:, 2] - tol <= v) & (v <= bounds[:, 3] + tol)).all()


def test_partition_too_coarse(
    lattice3: LatticeSet, sphere: Surface, caplog: pytest.LogCaptureFixture
) -> None:
    caplog.set_level(logging.ERROR)
    with pytest.raises(ResolutionError):
        singular_partition(lattice3, sphere, c0=10.0)
    assert "decrease c0" in caplog.text


def test_trace_integrals_signs(report: MomentReport, monge: Surface) -> None:
    assert report.m == 3 and report.n_points == 8
    assert report.R2 >= report.R2_regular >= 0.0
    assert report.R4 is not None and 0.0 <= report.R4 <= report.R2
    assert report.trX_int <= 0.0
    assert report.trXp_int <= 0.0
    assert report.trYY_int >= 0.0
    assert report.max_x_diagonal <= 0.0
    assert 1.0 / 64 <= report.dropped_fraction <= 1.0
    assert report.dropped_measure > 0.0


def test_trace_integrals_predictions(report: MomentReport, monge: Surface) -> None:
    area2 = monge.area**2
    assert report.predictions["R2"] == approx(area2 / 8)
    assert report.predictions["trX"] == approx(-area2 / 4)
    assert report.predictions["trYY"] == approx(3 / 8 * (area2 + 3 * report.H))
    assert report.residuals["R2"] == approx(report.R2 - area2 / 8)
    assert set(report.relative_residuals()) == {"R2", "trX", "trXp", "trYY"}
    assert '"relative_residuals"' in report.to_json()


def test_approx_variance(
    report: MomentReport, lattice3: LatticeSet, monge: Surface
) -> None:
    expected = energy_scale(3) * (
        report.R2_regular / 8
        + report.trX_int / 16
        + report.trXp_int / 16
        + report.trYY_int / 32
    )
    assert approx_variance(lattice3, monge, report=report) == approx(expected)


def test_approx_variance_flat(
    lattice3: LatticeSet, plane: Surface, caplog: pytest.LogCaptureFixture
) -> None:
    caplog.set_level(logging.WARNING)
    value = approx_variance(lattice3, plane, order=8)
    assert isinstance(value, float)
    assert "vanishing curvature" in caplog.text


def test_two_point_density_screening(caplog: pytest.LogCaptureFixture) -> None:
    big_m = energy_scale(3)
    D = zeros((5, 3))
    D[4, 0] = 2.0 * sqrt(big_m)
    r = array([0.0, 0.3, 1.0, -1.0, 0.0])
    jet = CovarianceJet(r=r, D=D, hess=zeros((5, 3, 3)), m=3)
    normals = zeros((5, 3))
    normals[:, 2] = 1.0
    caplog.set_level(logging.ERROR)
    density, keep = two_point_density(jet, normals, normals)
    assert keep.tolist() == [True, True, False, False, False]
    assert density[0] == approx(pi**2, rel=1e-4), "k1^2 at m=3"
    assert density[1] == approx(pi**2 / sqrt(1 - 0.09), rel=1e-4)
    assert (density[2:] == 0.0).all()
    assert caplog.text == ""


def test_two_point_density_small_r() -> None:
    eps = array([1e-3, 1e-2, 5e-2])
    jet = CovarianceJet(r=eps, D=zeros((3, 3)), hess=zeros((3, 3, 3)), m=5)
    normals = zeros((3, 3))
    normals[:, 0] = 1.0
    density, keep = two_point_density(jet, normals, normals)
    assert keep.all()
    k1_squared = pi**2 * 5 / 3
    assert density == approx(k1_squared * (1 + eps**2 / 2), rel=1e-4)


@pytest.mark.slow
def test_exact_second_moment_cauchy_schwarz(
    lattice3: LatticeSet, monge: Surface
) -> None:
    value = exact_second_moment(
        lattice3, monge, c_band=0.25, order=12, n_rho=8, n_theta=12, step=0.3
    )
    mean = predict_mean(3, monge)
    assert mean**2 <= value < 4.0 * mean**2


def test_exact_second_moment_sphere(lattice3: LatticeSet, sphere: Surface) -> None:
    value = exact_second_moment(
        lattice3, sphere, c_band=0.2, order=6, n_rho=4, n_theta=6, step=0.5
    )
    assert value > 0.0


def test_exact_second_moment_fold(
    lattice3: LatticeSet, sphere: Surface, caplog: pytest.LogCaptureFixture
) -> None:
    caplog.set_level(logging.ERROR)
    with pytest.raises(ResolutionError):
        exact_second_moment(lattice3, sphere, c_band=1.0, order=6)
    assert "decrease c_band" in caplog.text


def test_exact_second_moment_antipodal_pairs(
    lattice3: LatticeSet, caplog: pytest.LogCaptureFixture
) -> None:
    # for m = 3 every coordinate of mu is odd, so r = -1 across a shift of
    # (1/2, 0, 0); the outer 3-point Gauss nodes of this patch sit at u = +-1/4
    half = 0.25 / sqrt(0.6)
    surface = make_surface(
        SurfaceSpec(kind="plane_patch", domain=(-half, half, -0.05, 0.05))
    )
    caplog.set_level(logging.WARNING)
    value = exact_second_moment(
        lattice3, surface, c_band=0.2, order=3, n_rho=4, n_theta=6, step=0.5
    )
    assert value > 0.0
    assert "Dropped point pairs" in caplog.text


def test_exact_second_moment_band_check(lattice3: LatticeSet, sphere: Surface) -> None:
    with pytest.raises(NumericError):
        exact_second_moment(
            lattice3,
            sphere,
            c_band=0.2,
            order=6,
            n_rho=4,
            n_theta=4,
            step=0.5,
            check_band=True,
            band_rtol=1e-12,
        )


@pytest.mark.slow
def test_trace_integrals_residual_shrinks(monge: Surface) -> None:
    def relative_r2(m: int) -> float:
        report = trace_integrals(enumerate(m), monge, compute_r4=False)
        return abs(report.relative_residuals()["R2"])

    assert relative_r2(35) < relative_r2(11)
