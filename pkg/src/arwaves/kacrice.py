import logging
from dataclasses import dataclass, field
from math import ceil
from typing import Any, Dict, Iterator, List, Optional, Tuple

from numpy import (
    arange,
    asarray,
    bool_,
    broadcast_to,
    clip,
    concatenate,
    cos,
    cross,
    empty,
    eye,
    floor,
    full,
    int64,
    linspace,
    meshgrid,
    pi,
    sin,
    sqrt,
    stack,
    where,
    zeros,
)
from numpy import abs as npabs
from numpy.linalg import eigvalsh, norm
from numpy.typing import NDArray

from ._typing import NDArrayFloat, NDArrayInt
from .errors import DomainError, NumericError, ResolutionError
from .lattice import LatticeSet
from .randomwave import (
    EXPANSION_RADIUS,
    CovarianceJet,
    covariance_jet,
    energy_scale,
    k2_exact,
    kacrice_matrices,
    pairwise_covariance,
    pairwise_covariance_jet,
)
from .surface import Surface, SurfaceNodes, integral_H
from .utils import dumps_json, gauss_legendre, smooth_cutoff, validate_positive

PAIR_CHUNK = 2**15  # node pairs evaluated together
DROPPED_WARNING = 0.2  # fraction of singular node pairs that triggers a warning
MEASURE_CONSTANT = 256.0  # meas(S) <= MEASURE_CONSTANT * R4, calibrated
CELL_OFFSETS = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.5, 0.5))
SINGULAR_SCREEN = 1e-6  # pairs with |r| >= 1 - SINGULAR_SCREEN are dropped
THETA_FLOOR = 1e-10  # smallest admissible eigenvalue of the conditioned covariance
INNER_RADIUS = 0.02  # innermost disk of the band rule, in units of 1 / sqrt(m)
GRAPH_ALIGNMENT = 0.5  # min |n . n_y| and max normal share of a chord in the band


def _check_lattice(lattice: LatticeSet) -> None:
    if lattice.n_points == 0:
        msg = f"Empty lattice set for m={lattice.m}"
        logging.error(msg)
        raise DomainError(msg)


def _row_slices(n_rows: int, n_cols: int, chunk: int = PAIR_CHUNK) -> Iterator[slice]:
    rows = max(1, chunk // max(1, n_cols))
    for start in range(0, n_rows, rows):
        yield slice(start, start + rows)


def resolved_order(lattice: LatticeSet, surface: Surface, min_order: int = 8) -> int:
    """Gauss order per chart direction giving ten nodes per wavelength 1/sqrt(m)."""
    order = max(int(min_order), ceil(10.0 * sqrt(lattice.m) * surface.max_chart_length))
    logging.info(
        f"Resolved quadrature order {order} for m={lattice.m} on '{surface.label}'"
    )
    return order


def moment_Rk(
    lattice: LatticeSet, surface: Surface, k: int, order: Optional[int] = None
) -> float:
    """R_k, the double integral of r^k over the product surface.

    r^k is bounded, so the full domain is integrated without exclusion on
    the tensor Gauss nodes of ``order`` (resolved from m by default).

    Raises
    ------
    DomainError
        If k < 0 or the lattice set is empty.
    NumericError
        If an even moment comes out negative.
    """
    k = int(k)
    if k < 0:
        msg = f"Expected k >= 0, got {k}"
        logging.error(msg)
        raise DomainError(msg)
    _check_lattice(lattice)
    nodes = surface.nodes(order or resolved_order(lattice, surface))
    total = 0.0
    for sl in _row_slices(len(nodes), len(nodes)):
        r = pairwise_covariance(lattice, nodes.points[sl], nodes.points)
        total += float(nodes.weights[sl] @ r**k @ nodes.weights)
    if k % 2 == 0 and total < -1e-12 * surface.area**2:
        msg = f"Negative even moment R_{k}={total}"
        logging.error(msg)
        raise NumericError(msg)
    return total


@dataclass
class SingularPartition:
    delta: float
    c0: float
    margin: float
    bounds: NDArrayFloat = field(repr=False)
    chart: NDArrayInt = field(repr=False)
    centers: NDArrayFloat = field(repr=False)
    cell_area: NDArrayFloat = field(repr=False)
    flags: NDArray[bool_] = field(repr=False)
    grids: List[Tuple[int, int, int]] = field(repr=False)
    domains: List[Tuple[float, float, float, float]] = field(repr=False)
    measure_bound: Optional[float] = None
    n_cells: int = field(init=False)
    singular_measure: float = field(init=False)
    bound_ok: Optional[bool] = field(init=False)
    """
    Cells of side at most delta = c0 / sqrt(m) on every chart, and the cell
    pairs of the product surface on which |r| may exceed 1/2.

    Parameters
    ----------
    delta : float
        Physical cell side.
    c0 : float
        Cell size constant.
    margin : float
        Cell pairs are flagged when a test pair has |r| > 1/2 - margin.
    bounds : NDArrayFloat
        Parameter rectangles (u0, u1, v0, v1) of the cells, shape (C, 4).
    chart : NDArrayInt
        Chart index of every cell.
    centers : NDArrayFloat
        Cell centers on the surface, shape (C, 3).
    cell_area : NDArrayFloat
        Surface area of every cell.
    flags : NDArray[bool_]
        Singular cell pairs, shape (C, C), symmetric.
    grids : list of tuple
        (first cell index, n_u, n_v) per chart.
    domains : list of tuple
        Parameter rectangle per chart.
    measure_bound : float, optional
        Upper bound the singular measure is checked against.

    Attributes
    ----------
    n_cells : int
    singular_measure : float
        Product measure of the flagged cell pairs.
    bound_ok : bool or None
        Whether the singular measure respects ``measure_bound``.
    """

    def __post_init__(self) -> None:
        self.n_cells = len(self.cell_area)
        self.singular_measure = float(self.cell_area @ self.flags @ self.cell_area)
        if self.measure_bound is None:
            self.bound_ok = None
        else:
            self.bound_ok = self.singular_measure <= self.measure_bound
            if not self.bound_ok:
                logging.warning(
                    f"Singular measure {self.singular_measure:.4g} exceeds the "
                    f"bound {self.measure_bound:.4g}"
                )

    def cell_of(self, nodes: SurfaceNodes) -> NDArrayInt:
        """Index of the cell containing each quadrature node."""
        out = empty(len(nodes), dtype=int64)
        for c, (offset, n_u, n_v) in enumerate(self.grids):
            sel = nodes.chart == c
            u0, u1, v0, v1 = self.domains[c]
            i = floor((nodes.uv[sel, 0] - u0) / (u1 - u0) * n_u).astype(int64)
            j = floor((nodes.uv[sel, 1] - v0) / (v1 - v0) * n_v).astype(int64)
            out[sel] = offset + clip(i, 0, n_u - 1) * n_v + clip(j, 0, n_v - 1)
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "delta": self.delta,
            "c0": self.c0,
            "margin": self.margin,
            "n_cells": self.n_cells,
            "n_flagged_pairs": int(self.flags.sum()),
            "singular_measure": self.singular_measure,
            "measure_bound": self.measure_bound,
            "bound_ok": self.bound_ok,
        }


def singular_partition(
    lattice: LatticeSet,
    surface: Surface,
    c0: float = 0.1,
    margin: float = 0.0,
    r4: Optional[float] = None,
    check_bound: bool = True,
) -> SingularPartition:
    """Split the surface into cells of side c0 / sqrt(m) and flag the cell
    pairs with a test pair (corners and center of both cells) at which
    |r| > 1/2 - margin.

    Parameters
    ----------
    lattice : LatticeSet
    surface : Surface
    c0 : float, default 0.1
    margin : float, default 0.0
        Lipschitz safety margin subtracted from the 1/2 threshold.
    r4 : float, optional
        Precomputed R_4 for the measure bound, computed when missing.
    check_bound : bool, default True
        Compare the singular measure with MEASURE_CONSTANT * R_4.

    Raises
    ------
    ResolutionError
        If a cell would be larger than a chart.
    """
    _check_lattice(lattice)
    c0 = validate_positive(c0, "c0")
    if not 0.0 <= margin < 0.5:
        raise ValueError(f"Expected 0 <= margin < 1/2, got {margin}")
    delta = c0 / sqrt(lattice.m)

    bounds, chart_index, samples, centers, areas = [], [], [], [], []
    grids: List[Tuple[int, int, int]] = []
    x_gauss = asarray([0.5 - 0.5 / sqrt(3.0), 0.5 + 0.5 / sqrt(3.0)])
    offset = 0
    for c, chart in enumerate(surface.charts):
        length_u, length_v = chart.lengths()
        if delta > max(length_u, length_v):
            msg = (
                f"Cell size {delta:.4g} exceeds chart '{chart.name}' of extent "
                f"{max(length_u, length_v):.4g}; decrease c0"
            )
            logging.error(msg)
            raise ResolutionError(msg)
        n_u, n_v = ceil(length_u / delta), ceil(length_v / delta)
        u0, u1, v0, v1 = chart.domain
        du, dv = (u1 - u0) / n_u, (v1 - v0) / n_v
        ii, jj = meshgrid(arange(n_u), arange(n_v), indexing="ij")
        lo_u = (u0 + ii * du).ravel()
        lo_v = (v0 + jj * dv).ravel()
        bounds.append(stack([lo_u, lo_u + du, lo_v, lo_v + dv], axis=-1))
        chart_index.append(full(len(lo_u), c))

        off = asarray(CELL_OFFSETS)
        pu = lo_u[:, None] + off[None, :, 0] * du
        pv = lo_v[:, None] + off[None, :, 1] * dv
        samples.append(chart.position(pu, pv))
        centers.append(chart.position(lo_u + 0.5 * du, lo_v + 0.5 * dv))

        gu = lo_u[:, None, None] + x_gauss[None, :, None] * du
        gv = lo_v[:, None, None] + x_gauss[None, None, :] * dv
        jac = chart.frame(gu, gv)[2]
        areas.append(jac.sum(axis=(1, 2)) * du * dv / 4.0)
        grids.append((offset, n_u, n_v))
        offset += n_u * n_v

    cell_points = concatenate(samples)
    n_cells, n_test = cell_points.shape[:2]
    flat = cell_points.reshape(-1, 3)
    flags = empty((n_cells, n_cells), dtype=bool)
    threshold = 0.5 - margin
    for sl in _row_slices(n_cells, len(flat) * n_test):
        r = pairwise_covariance(lattice, cell_points[sl].reshape(-1, 3), flat)
        rmax = npabs(r).reshape(-1, n_test, n_cells, n_test).max(axis=(1, 3))
        flags[sl] = rmax > threshold

    measure_bound = None
    if check_bound:
        r4 = moment_Rk(lattice, surface, 4) if r4 is None else r4
        measure_bound = MEASURE_CONSTANT * r4
    logging.info(f"Singular partition: {n_cells} cells of side {delta:.4g}")
    return SingularPartition(
        delta=delta,
        c0=c0,
        margin=margin,
        bounds=concatenate(bounds),
        chart=concatenate(chart_index),
        centers=concatenate(centers),
        cell_area=concatenate(areas),
        flags=flags,
        grids=grids,
        domains=[tuple(ch.domain) for ch in surface.charts],  # type: ignore[misc]
        measure_bound=measure_bound,
    )


@dataclass
class MomentReport:
    """Moment and trace integrals over the product surface for one energy.

    ``R2`` integrates r^2 over the full product surface; the trace integrals
    and ``R2_regular`` skip the singular node pairs. ``predictions`` holds
    A^2/N, -2A^2/N, -2A^2/N and (3/N)(A^2 + 3H), ``residuals`` the
    differences value - prediction.
    """

    m: int
    n_points: int
    order: int
    area: float
    R2: float
    R2_regular: float
    R4: Optional[float]
    trX_int: float
    trXp_int: float
    trYY_int: float
    H: float
    singular_measure: float
    dropped_fraction: float
    dropped_measure: float
    max_x_diagonal: float
    predictions: Dict[str, float]
    residuals: Dict[str, float]

    def relative_residuals(self) -> Dict[str, float]:
        """Residuals relative to the magnitude of their predictions."""
        return {k: v / abs(self.predictions[k]) for k, v in self.residuals.items()}

    def to_dict(self) -> Dict[str, Any]:
        out = dict(self.__dict__)
        out["relative_residuals"] = self.relative_residuals()
        return out

    def to_json(self) -> str:
        return dumps_json(self.to_dict())


def _broadcast_normals(
    nodes: SurfaceNodes, sl: slice
) -> Tuple[NDArrayFloat, NDArrayFloat]:
    shape = (len(nodes.normals[sl]), len(nodes), 3)
    return (
        broadcast_to(nodes.normals[sl, None, :], shape),
        broadcast_to(nodes.normals[None, :, :], shape),
    )


def trace_integrals(
    lattice: LatticeSet,
    surface: Surface,
    order: Optional[int] = None,
    c0: float = 0.1,
    partition: Optional[SingularPartition] = None,
    compute_r4: bool = True,
) -> MomentReport:
    """Integrals of r^2, tr X, tr X' and tr(Y'Y) over the regular pairs.

    Node pairs in flagged cell pairs of the singular partition, or with
    |r| > 1/2, are dropped; their share is reported, never reassigned.

    Parameters
    ----------
    lattice : LatticeSet
    surface : Surface
    order : int, optional
        Gauss order per chart direction, resolved from m by default.
    c0 : float, default 0.1
        Cell size constant of the partition built when ``partition`` is None.
    partition : SingularPartition, optional
    compute_r4 : bool, default True
        Also fill ``R4``.

    Returns
    -------
    MomentReport
    """
    _check_lattice(lattice)
    order = order or resolved_order(lattice, surface)
    nodes = surface.nodes(order)
    if partition is None:
        partition = singular_partition(lattice, surface, c0=c0, check_bound=False)
    cells = partition.cell_of(nodes)

    sums = zeros(5)
    n_dropped = 0
    dropped_measure = 0.0
    max_diag = -float("inf")
    for sl in _row_slices(len(nodes), len(nodes)):
        jet = pairwise_covariance_jet(lattice, nodes.points[sl], nodes.points)
        weights = nodes.weights[sl, None] * nodes.weights[None, :]
        sums[0] += float((weights * jet.r**2).sum())

        keep = ~partition.flags[cells[sl]][:, cells] & (
            npabs(jet.r) <= EXPANSION_RADIUS
        )
        n_dropped += int((~keep).sum())
        dropped_measure += float(weights[~keep].sum())
        # dropped pairs are zeroed before the conditioning
        jet.r = where(keep, jet.r, 0.0)
        n, n_p = _broadcast_normals(nodes, sl)
        mats = kacrice_matrices(jet, n, n_p)
        tr_x, tr_xp, tr_yy = mats.traces()
        kept = weights * keep
        sums[1] += float((kept * jet.r**2).sum())
        sums[2] += float((kept * tr_x).sum())
        sums[3] += float((kept * tr_xp).sum())
        sums[4] += float((kept * tr_yy).sum())
        diagonal = concatenate(
            [mats.X[..., [0, 1], [0, 1]][keep], mats.X_p[..., [0, 1], [0, 1]][keep]]
        )
        if diagonal.size:
            max_diag = max(max_diag, float(diagonal.max()))

    dropped_fraction = n_dropped / len(nodes) ** 2
    if dropped_fraction > DROPPED_WARNING:
        logging.warning(
            f"{dropped_fraction:.0%} of the node pairs are singular at m="
            f"{lattice.m}: the quadrature does not resolve the correlation scale"
        )

    area2 = surface.area**2
    n_points = lattice.n_points
    h_value = integral_H(surface, lattice).value
    values = {
        "R2": float(sums[0]),
        "trX": float(sums[2]),
        "trXp": float(sums[3]),
        "trYY": float(sums[4]),
    }
    predictions = {
        "R2": area2 / n_points,
        "trX": -2.0 * area2 / n_points,
        "trXp": -2.0 * area2 / n_points,
        "trYY": 3.0 / n_points * (area2 + 3.0 * h_value),
    }
    return MomentReport(
        m=lattice.m,
        n_points=n_points,
        order=order,
        area=surface.area,
        R2=values["R2"],
        R2_regular=float(sums[1]),
        R4=moment_Rk(lattice, surface, 4, order=order) if compute_r4 else None,
        trX_int=values["trX"],
        trXp_int=values["trXp"],
        trYY_int=values["trYY"],
        H=h_value,
        singular_measure=partition.singular_measure,
        dropped_fraction=dropped_fraction,
        dropped_measure=dropped_measure,
        max_x_diagonal=max_diag,
        predictions=predictions,
        residuals={k: values[k] - predictions[k] for k in values},
    )


def approx_variance(
    lattice: LatticeSet,
    surface: Surface,
    order: Optional[int] = None,
    c0: float = 0.1,
    report: Optional[MomentReport] = None,
) -> float:
    """Variance of the nodal length from the second-order expansion of the
    two-point function, M (R2/8 + tr X/16 + tr X'/16 + tr(Y'Y)/32) with
    every integral over the regular pairs.
    """
    if not surface.curvature_nonvanishing:
        logging.warning(
            f"Surface '{surface.label}' has vanishing curvature somewhere: the "
            "approximate Kac-Rice error term is not controlled"
        )
    if report is None:
        report = trace_integrals(lattice, surface, order=order, c0=c0, compute_r4=False)
    value = energy_scale(lattice.m) * (
        report.R2_regular / 8.0
        + report.trX_int / 16.0
        + report.trXp_int / 16.0
        + report.trYY_int / 32.0
    )
    if value < 0.0:
        logging.warning(f"Approximate variance {value:.4g} is negative")
    return float(value)


def _tangent_basis(normals: NDArrayFloat) -> Tuple[NDArrayFloat, NDArrayFloat]:
    helper = where(
        (npabs(normals[:, 0]) < 0.9)[:, None], eye(3)[0][None, :], eye(3)[1][None, :]
    )
    t1 = helper - (helper * normals).sum(-1)[:, None] * normals
    t1 /= norm(t1, axis=-1)[:, None]
    return t1, cross(normals, t1)


def _subset(jet: CovarianceJet, mask: NDArray[bool_]) -> CovarianceJet:
    return CovarianceJet(r=jet.r[mask], D=jet.D[mask], hess=jet.hess[mask], m=jet.m)


def two_point_density(
    jet: CovarianceJet, n: Any, n_p: Any, step: float = 0.2
) -> Tuple[NDArrayFloat, NDArray[bool_]]:
    """M k2 at point pairs with numerically singular pairs screened out.

    A pair is dropped when |r| >= 1 - ``SINGULAR_SCREEN`` or when the
    smallest eigenvalue of the symmetrized conditioned covariance is at most
    ``THETA_FLOOR``. Dropped pairs get density zero.

    Parameters
    ----------
    jet : CovarianceJet
        Covariance jet with one leading axis.
    n, n_p : array_like
        Unit normals at the two points, shape (k, 3).
    step : float, default 0.2
        Step of the Gaussian moment quadrature.

    Returns
    -------
    tuple
        (density, keep) with the density M k2 and the mask of kept pairs.
    """
    r = asarray(jet.r, dtype=float)
    n = asarray(n, dtype=float)
    n_p = asarray(n_p, dtype=float)
    density = zeros(r.shape)
    keep = npabs(r) < 1.0 - SINGULAR_SCREEN
    if keep.any():
        mats = kacrice_matrices(_subset(jet, keep), n[keep], n_p[keep])
        theta = mats.theta_hat
        smallest = eigvalsh(0.5 * (theta + theta.swapaxes(-1, -2)))[..., 0]
        keep[keep] = smallest > THETA_FLOOR
    if keep.any():
        mats = kacrice_matrices(_subset(jet, keep), n[keep], n_p[keep])
        value, _ = k2_exact(mats, step=step, estimate_error=False)
        density[keep] = energy_scale(jet.m) * value
    return density, keep


def _second_moment(
    lattice: LatticeSet,
    surface: Surface,
    nodes: SurfaceNodes,
    delta: float,
    n_rho: int,
    n_theta: int,
    step: float,
) -> Tuple[float, float, float]:
    far = 0.0
    dropped = 0.0
    for sl in _row_slices(len(nodes), len(nodes)):
        x = nodes.points[sl]
        chord = nodes.points[None, :, :] - x[:, None, :]
        distance = norm(chord, axis=-1)
        n, n_p = _broadcast_normals(nodes, sl)
        normal_part = npabs((chord * n).sum(-1))
        if ((distance < delta) & (normal_part > GRAPH_ALIGNMENT * distance)).any():
            msg = (
                f"Surface '{surface.label}' folds back within the diagonal band "
                f"of width {delta:.4g}; decrease c_band"
            )
            logging.error(msg)
            raise ResolutionError(msg)
        cut = 1.0 - smooth_cutoff(distance / delta)
        sel = cut > 0.0
        jet = pairwise_covariance_jet(lattice, x, nodes.points)
        weights = (nodes.weights[sl, None] * nodes.weights[None, :] * cut)[sel]
        density, keep = two_point_density(_subset(jet, sel), n[sel], n_p[sel], step)
        far += float(weights @ density)
        dropped += float(weights[~keep].sum())

    # near field: the surface as a normal graph over the tangent plane of
    # every node, in polar coordinates; the innermost disk takes the value
    # of rho k2 at its rim
    rho_in = min(INNER_RADIUS / sqrt(lattice.m), delta / 4.0)
    rho, w_rho = gauss_legendre(n_rho, rho_in, delta)
    rho = concatenate([[rho_in], rho])
    radial = concatenate([[rho_in], w_rho]) * rho * (2.0 * pi / n_theta)
    theta = linspace(0.0, 2.0 * pi, n_theta, endpoint=False)
    t1, t2 = _tangent_basis(nodes.normals)
    near = 0.0
    per_node = len(rho) * n_theta
    for sl in _row_slices(len(nodes), per_node):
        direction = (
            cos(theta)[None, :, None] * t1[sl, None, :]
            + sin(theta)[None, :, None] * t2[sl, None, :]
        )
        offset = rho[None, :, None, None] * direction[:, None, :, :]
        shape = offset.shape
        x = broadcast_to(nodes.points[sl, None, None, :], shape).reshape(-1, 3)
        n = broadcast_to(nodes.normals[sl, None, None, :], shape).reshape(-1, 3)
        y, n_y, inside = surface.normal_graph(x + offset.reshape(-1, 3), n)
        alignment = npabs((n * n_y).sum(-1))
        if (inside & (alignment < GRAPH_ALIGNMENT)).any():
            msg = (
                f"Surface '{surface.label}' is not a graph over its tangent "
                f"planes within {delta:.4g}; decrease c_band"
            )
            logging.error(msg)
            raise ResolutionError(msg)
        weights = (
            nodes.weights[sl, None, None] * radial[None, :, None]
            + zeros((1, 1, n_theta))
        ).reshape(-1)
        cut = smooth_cutoff(norm(y - x, axis=-1) / delta)
        use = inside & (cut > 0.0)
        weights = (weights * cut)[use] / alignment[use]
        jet = covariance_jet(lattice, x[use], y[use])
        density, keep = two_point_density(jet, n[use], n_y[use], step)
        near += float(weights @ density)
        dropped += float(weights[~keep].sum())
    return far, near, dropped


def exact_second_moment(
    lattice: LatticeSet,
    surface: Surface,
    c_band: float = 0.5,
    order: Optional[int] = None,
    n_rho: int = 16,
    n_theta: int = 16,
    step: float = 0.2,
    check_band: bool = False,
    band_rtol: float = 0.05,
) -> float:
    """E[L^2], the double integral of M k2 over the product surface.

    The diagonal is split off with a smooth cutoff of radius
    delta = c_band / sqrt(m). Pairs at distance at least delta / 2 are
    integrated on the tensor Gauss nodes with weight 1 - cutoff. The band is
    integrated around every node x in polar coordinates of its tangent plane,
    lifted to the surface along the normal of x and weighted by the cutoff
    and the inverse projection factor 1 / |n(x) . n(y)|. There rho k2 stays
    bounded. Pairs whose conditioned law is numerically singular are dropped
    and their measure is logged.

    Parameters
    ----------
    lattice : LatticeSet
    surface : Surface
    c_band : float, default 0.5
    order : int, optional
        Gauss order per chart direction, resolved from m by default.
    n_rho, n_theta : int, default 16
        Radial Gauss nodes and angular trapezoid nodes of the band rule.
    step : float, default 0.2
        Step of the Gaussian moment quadrature.
    check_band : bool, default False
        Repeat with delta / 2 and compare.
    band_rtol : float, default 0.05

    Raises
    ------
    NumericError
        If the band check changes the value by more than ``band_rtol``.
    ResolutionError
        If the surface is not a graph over its tangent planes within the band.
    """
    _check_lattice(lattice)
    c_band = validate_positive(c_band, "c_band")
    if not surface.curvature_nonvanishing:
        logging.warning(
            f"Surface '{surface.label}' has vanishing curvature somewhere"
        )
    nodes = surface.nodes(order or resolved_order(lattice, surface))
    delta = c_band / sqrt(lattice.m)
    far, near, dropped = _second_moment(
        lattice, surface, nodes, delta, n_rho, n_theta, step
    )
    value = far + near
    logging.info(f"Second moment: far field {far:.6g}, diagonal band {near:.6g}")
    if dropped > 0.0:
        logging.warning(
            f"Dropped point pairs of measure {dropped:.4g} with a singular "
            "conditioned law from the second moment"
        )
    if check_band:
        far_h, near_h, _ = _second_moment(
            lattice, surface, nodes, delta / 2.0, n_rho, n_theta, step
        )
        halved = far_h + near_h
        if abs(value - halved) > band_rtol * abs(value):
            msg = (
                f"Second moment changed from {value:.6g} to {halved:.6g} when "
                "the diagonal band was halved"
            )
            logging.error(msg)
            raise NumericError(msg, values=(value, halved))
    return float(value)
