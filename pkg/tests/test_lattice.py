import logging
from itertools import permutations, product
from math import sqrt

import pytest
from numpy import arange, array, array_equal, ndarray, ones, zeros
from numpy.linalg import qr
from numpy.random import default_rng
from pytest import approx

from arwaves.errors import CapacityError, DomainError, NumericError
from arwaves.lattice import (
    LatticeSet,
    ProjectedSet,
    _paired_count,
    _spectral_correlations4_bruteforce,
    admissible_values,
    cap_count,
    directional_moment,
    enumerate,
    integrate_against_tau,
    is_admissible,
    is_representable,
    lattice_summary,
    max_cap_count,
    max_coplanar,
    project,
    riesz_energy,
    riesz_limit,
    spectral_correlations4,
)


def test_is_representable() -> None:
    for m in (0, 1, 2, 3, 5, 6, 9, 11):
        assert is_representable(m), f"{m} is a sum of three squares"
    for m in (7, 15, 28, 112):
        assert not is_representable(m), f"{m} is of the form 4^l(8k+7)"


def test_admissible_values() -> None:
    assert admissible_values(1, 12) == [1, 2, 3, 5, 6, 9, 10, 11]
    assert is_admissible(11)
    assert not is_admissible(4)
    assert not is_admissible(0)


@pytest.mark.parametrize(
    "m, n_points",
    [(1, 6), (2, 12), (3, 8), (5, 24), (9, 30), (11, 24), (35, 48)],
)
def test_enumerate_counts(m: int, n_points: int) -> None:
    lattice = enumerate(m)
    assert lattice.n_points == n_points
    assert ((lattice.points**2).sum(axis=1) == m).all()
    assert len(lattice.half_set) == n_points // 2


def test_enumerate_order_and_half_set(lattice3: LatticeSet) -> None:
    pts = [tuple(p) for p in lattice3.points]
    assert pts == sorted(pts), "Points should be in lexicographic order"
    half = lattice3.half_points
    full = {tuple(p) for p in half} | {tuple(-p) for p in half}
    assert full == set(pts), "Half set and its negatives should cover the set"


def test_enumerate_empty() -> None:
    lattice = enumerate(7)
    assert lattice.n_points == 0
    assert not lattice.representable


def test_enumerate_invalid(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.ERROR)
    with pytest.raises(DomainError):
        enumerate(0)
    assert "Expected m >= 1, got 0" in caplog.text
    with pytest.raises(CapacityError):
        enumerate(10**7 + 1)


def test_lattice_json(lattice11: LatticeSet) -> None:
    restored = LatticeSet.from_json(lattice11.to_json())
    assert restored.m == 11
    assert array_equal(restored.points, lattice11.points)


def test_lattice_json_off_sphere() -> None:
    text = '{"m": 3, "points": [[1, 1, 0]]}'
    with pytest.raises(DomainError):
        LatticeSet.from_json(text)


def test_riesz_energy_cube(lattice3: LatticeSet) -> None:
    # directions of m=3 are the cube vertices with edge 2/sqrt(3)
    edge = 2.0 / sqrt(3.0)
    expected = 2.0 * (12 / edge + 12 / (edge * sqrt(2.0)) + 4 / 2.0)
    assert riesz_energy(project(lattice3), 1.0) == approx(expected, rel=1e-12)


def test_riesz_energy_duplicates() -> None:
    proj = ProjectedSet(directions=array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]]), m=1)
    with pytest.raises(DomainError):
        riesz_energy(proj, 1.0)


def test_riesz_limit() -> None:
    assert riesz_limit(1.0) == approx(1.0)
    assert riesz_limit(0.5) == approx(2.0**0.5 / 1.5)


@pytest.mark.slow
def test_riesz_energy_equidistribution() -> None:
    lattice = enumerate(10001)
    normalized = riesz_energy(project(lattice), 1.0) / lattice.n_points**2
    assert abs(normalized - riesz_limit(1.0)) < 0.1


def test_project_empty() -> None:
    with pytest.raises(DomainError):
        project(enumerate(7))


def test_cap_count(lattice1: LatticeSet) -> None:
    assert cap_count(lattice1, [1.0, 0.0, 0.0], 0.0) == 1
    # the four neighbours sit at distance sqrt(2), the antipode at 2
    assert cap_count(lattice1, [1.0, 0.0, 0.0], 1.5) == 5
    assert max_cap_count(lattice1, 1.5) >= 5


def test_max_coplanar(lattice1: LatticeSet, lattice3: LatticeSet) -> None:
    assert max_coplanar(lattice1) == 4
    assert max_coplanar(lattice3) == 4


def test_spectral_correlations4_octahedron(lattice1: LatticeSet) -> None:
    count, paired, _ = spectral_correlations4(lattice1)
    assert count == 90
    assert paired == 90


@pytest.mark.parametrize("m", [1, 2, 3, 5, 6])
def test_spectral_correlations4_bruteforce(m: int) -> None:
    lattice = enumerate(m)
    count, paired, off = spectral_correlations4(lattice)
    ref_count, ref_paired, ref_off = _spectral_correlations4_bruteforce(lattice)
    assert count == ref_count
    assert paired == ref_paired
    assert off == approx(ref_off, rel=1e-10)
    assert count >= paired


def test_directional_moment_small(lattice1: LatticeSet, lattice3: LatticeSet) -> None:
    assert directional_moment(lattice1, 0, 1, 0, 4) == approx(1.0 / 3.0)
    assert directional_moment(lattice1, 0, 1, 1, 3) == 0.0
    assert directional_moment(lattice1, 0, 1, 2, 2) == 0.0
    assert directional_moment(lattice3, 0, 1, 0, 4) == approx(1.0 / 9.0)
    assert directional_moment(lattice3, 0, 1, 2, 2) == approx(1.0 / 9.0)
    assert directional_moment(lattice3, 0, 2, 1, 3) == 0.0


@pytest.mark.slow
def test_directional_moment_large_m() -> None:
    lattice = enumerate(100001)
    assert directional_moment(lattice, 0, 1, 0, 4) == approx(1.0 / 5.0, rel=0.05)
    assert directional_moment(lattice, 0, 1, 2, 2) == approx(1.0 / 15.0, rel=0.05)


@pytest.mark.parametrize(
    "args", [(0, 0, 0, 4), (0, 3, 0, 4), (0, 1, 3, 1), (0, 1, 1, 2)]
)
def test_directional_moment_invalid(lattice3: LatticeSet, args: tuple) -> None:
    with pytest.raises(DomainError):
        directional_moment(lattice3, *args)


def test_integrate_against_tau(lattice3: LatticeSet) -> None:
    tau, uniform, gap = integrate_against_tau(lattice3, lambda d: d[:, 2] ** 2)
    assert tau == approx(1.0 / 3.0)
    assert uniform == approx(1.0 / 3.0, rel=1e-9)
    assert gap < 1e-8

    tau, uniform, _ = integrate_against_tau(lattice3, lambda d: ones(len(d)))
    assert tau == approx(1.0) and uniform == approx(1.0)


def test_lattice_summary(lattice3: LatticeSet) -> None:
    summary = lattice_summary(lattice3, s_grid=[0.5])
    assert summary["N"] == 8
    assert summary["admissible"]
    assert summary["max_coplanar"] == 4
    corr = summary["correlations4"]
    assert corr["count"] > corr["paired"], "Cube vertices sum to zero in fours"
    assert summary["max_cap_count"]["0.5"] == 1


@pytest.mark.parametrize("m", [3, 5, 9, 11, 26, 35])
def test_enumerate_signed_permutations(m: int) -> None:
    points = enumerate(m).points
    expected = {tuple(p) for p in points}
    for perm in permutations(range(3)):
        for signs in product((1, -1), repeat=3):
            moved = points[:, list(perm)] * array(signs)
            assert {tuple(p) for p in moved} == expected


@pytest.mark.parametrize("m", [1, 2, 3, 5, 6, 11])
def test_enumerate_times_four(m: int) -> None:
    assert array_equal(enumerate(4 * m).points, 2 * enumerate(m).points)


def test_enumerate_four() -> None:
    assert enumerate(4).n_points == 6


def test_is_representable_matches_enumeration() -> None:
    x = arange(101)
    squares = x**2
    sums = (squares[:, None, None] + squares[None, :, None] + squares).ravel()
    represented = zeros(10**4 + 1, dtype=bool)
    represented[sums[sums <= 10**4]] = True
    assert [is_representable(m) for m in range(10**4 + 1)] == represented.tolist()
    for m in range(1, 200):
        assert (enumerate(m).n_points > 0) == is_representable(m), m


def test_riesz_energy_invariance(lattice11: LatticeSet) -> None:
    directions = project(lattice11).directions
    energy = riesz_energy(directions, 1.0)
    rotation, _ = qr(default_rng(0).standard_normal((3, 3)))
    assert riesz_energy(directions @ rotation.T, 1.0) == approx(energy, rel=1e-10)
    shuffled = directions[default_rng(1).permutation(len(directions))]
    assert riesz_energy(shuffled, 1.0) == approx(energy, rel=1e-10)
    assert riesz_energy(array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]), 1.0) == 1.0


def test_cap_count_covers_sphere(lattice11: LatticeSet) -> None:
    center = [0.0, 0.6, 0.8]
    assert cap_count(lattice11, center, 2.0 * sqrt(11)) == lattice11.n_points
    direction = lattice11.points[0] / sqrt(11)
    assert cap_count(lattice11, direction, 0.0) >= 1


def test_max_cap_count_share_decreases() -> None:
    shares = []
    for lo in (100, 1000, 10000):
        lattice = enumerate(admissible_values(lo, lo + 20)[0])
        s = lattice.m**0.25
        count = max_cap_count(lattice, s)
        assert count <= 20 * (1 + s**2 / lattice.m**0.25)
        shares.append(count / lattice.n_points)
    assert shares[-1] < shares[0]


def test_max_coplanar_share() -> None:
    shares = []
    for m in admissible_values(50, 70):
        lattice = enumerate(m)
        kappa = max_coplanar(lattice)
        assert 4 <= kappa <= lattice.n_points
        shares.append(kappa / lattice.n_points)
    assert sum(shares) / len(shares) < 0.35


def test_spectral_correlations4_growth() -> None:
    for m in admissible_values(1, 40):
        n = enumerate(m).n_points
        count, paired, _ = spectral_correlations4(enumerate(m))
        assert paired == 3 * n**2 - 3 * n
        assert paired <= count <= 10 * n**2, m


def test_paired_count_needs_antipodes(caplog: pytest.LogCaptureFixture) -> None:
    points = enumerate(3).points[:5]
    caplog.set_level(logging.ERROR)
    with pytest.raises(NumericError):
        _paired_count(points, 4)
    assert "not closed under negation" in caplog.text


def test_integrate_against_tau_gap_shrinks(lattice3: LatticeSet) -> None:
    def z1_fourth(d: ndarray) -> ndarray:
        return d[:, 0] ** 4

    _, uniform, small = integrate_against_tau(lattice3, z1_fourth)
    assert uniform == approx(0.2, rel=1e-9)
    assert small == approx(0.2 - 1.0 / 9.0)
    large = enumerate(admissible_values(10000, 10020)[0])
    _, _, gap = integrate_against_tau(large, z1_fourth)
    assert gap < 0.5 * small
