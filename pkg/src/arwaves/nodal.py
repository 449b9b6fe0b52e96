import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Tuple, Union

from numpy import (
    arange,
    argsort,
    asarray,
    empty,
    float64,
    pi,
    stack,
    where,
)
from numpy import abs as npabs
from numpy.linalg import norm
from pandas import Index, Series

from ._typing import NDArrayFloat
from .errors import DomainError, NumericError, ResolutionError
from .lattice import LatticeSet, is_representable
from .lattice import enumerate as enumerate_lattice
from .randomwave import WaveSample, evaluate, k1_density, sample, wavelength_resolution
from .stats import SampleStats
from .surface import Mesh, Surface, integral_H, integral_I, triangulate
from .utils import dumps_json, validate_positive

VERTEX_JITTER = 1e-14  # exact vertex zeros are moved up by this times the field scale
REFINEMENT_RTOL = 0.01  # h versus h/2 agreement required by the refinement check

EDGES = ((0, 1), (1, 2), (2, 0))


@dataclass
class NodalCurve:
    segments: NDArrayFloat = field(repr=False)
    total_length: float = field(init=False)
    resolution_warning: bool = False
    refined_length: Optional[float] = None
    """
    Piecewise linear nodal curve on a triangulated surface.

    Attributes
    ----------
    segments : NDArrayFloat
        Chords of shape (k, 2, 3), one per triangle crossed by the zero set.
    total_length : float
        Sum of the chord lengths, measured in ambient space.
    resolution_warning : bool
        Set when the h/2 refinement changed the length by more than 1 %.
    refined_length : float, optional
        Length on the refined mesh, when the refinement check ran.
    """

    def __post_init__(self) -> None:
        self.segments = asarray(self.segments, dtype=float64).reshape(-1, 2, 3)
        self.total_length = float(
            norm(self.segments[:, 1] - self.segments[:, 0], axis=-1).sum()
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "total_length": self.total_length,
            "n_segments": len(self.segments),
            "resolution_warning": self.resolution_warning,
            "refined_length": self.refined_length,
            "segments": self.segments,
        }

    def to_json(self) -> str:
        return dumps_json(self.to_dict())


def _vertex_values(field: Any, vertices: NDArrayFloat) -> NDArrayFloat:
    if isinstance(field, WaveSample):
        values = evaluate(field, vertices)[0]
    elif callable(field):
        values = field(vertices)
        if isinstance(values, tuple):
            values = values[0]
    else:
        raise TypeError("Please provide a WaveSample or a point-evaluable callable")
    values = asarray(values, dtype=float64).reshape(len(vertices))
    zero = values == 0.0
    if zero.any():
        scale = float(npabs(values).max()) or 1.0
        values = where(zero, VERTEX_JITTER * scale, values)
    return values


def _chords(values: NDArrayFloat, mesh: Mesh) -> NDArrayFloat:
    tri = mesh.triangles
    f = values[tri]
    positive = f > 0.0
    crossed = positive.any(axis=1) & ~positive.all(axis=1)
    tri, f = tri[crossed], f[crossed]

    points = empty((len(tri), 3, 3))
    changes = empty((len(tri), 3), dtype=bool)
    for k, (i, j) in enumerate(EDGES):
        fi, fj = f[:, i], f[:, j]
        changes[:, k] = (fi > 0.0) != (fj > 0.0)
        t = fi / where(changes[:, k], fi - fj, 1.0)
        vi, vj = mesh.vertices[tri[:, i]], mesh.vertices[tri[:, j]]
        points[:, k] = vi + t[:, None] * (vj - vi)
    # a crossed triangle has exactly two sign-changing edges
    pick = argsort(~changes, axis=1, kind="stable")[:, :2]
    rows = arange(len(tri))
    return stack([points[rows, pick[:, 0]], points[rows, pick[:, 1]]], axis=1)


def extract_nodal_curve(
    field: Union[WaveSample, Callable[[NDArrayFloat], Any]],
    mesh: Mesh,
    check_refinement: bool = False,
    rtol: float = REFINEMENT_RTOL,
) -> NodalCurve:
    """Zero set of the piecewise linear interpolant of ``field`` on ``mesh``.

    Marching triangles: every triangle whose vertex values change sign
    contributes one chord between the linear zeros on its two sign-changing
    edges. Exact vertex zeros are moved up by ``VERTEX_JITTER`` times the
    field scale.

    Parameters
    ----------
    field : WaveSample or callable
        The scalar field; a callable maps points (n, 3) to values (n,) or to a
        tuple whose first entry are the values.
    mesh : Mesh
    check_refinement : bool, default False
        Recompute on the h/2 mesh and set ``resolution_warning`` when the
        lengths differ by more than ``rtol``.
    rtol : float, default 0.01

    Returns
    -------
    NodalCurve
    """
    values = _vertex_values(field, mesh.vertices)
    curve = NodalCurve(segments=_chords(values, mesh))

    if check_refinement:
        if mesh.surface is None:
            raise ValueError("Refinement check needs a mesh built by triangulate")
        fine = triangulate(mesh.surface, mesh.h / 2.0)
        fine_values = _vertex_values(field, fine.vertices)
        refined = NodalCurve(segments=_chords(fine_values, fine))
        curve.refined_length = refined.total_length
        scale = max(refined.total_length, curve.total_length)
        if abs(curve.total_length - refined.total_length) > rtol * scale:
            curve.resolution_warning = True
            logging.warning(
                f"Nodal length changed from {curve.total_length:.6g} to "
                f"{refined.total_length:.6g} under refinement of h={mesh.h}"
            )
    return curve


def predict_mean(m: int, surface: Surface) -> float:
    """Expected nodal intersection length pi sqrt(m) A / sqrt(3)."""
    if not is_representable(m) or m < 1:
        msg = f"m={m} is not a sum of three squares"
        logging.error(msg)
        raise DomainError(msg)
    return k1_density(m) * surface.area


@dataclass
class VariancePrediction:
    """Leading variance asymptotics for one energy and surface.

    ``leading`` = ``coefficient`` m/N with ``coefficient`` = (pi^2/60)(3I - A^2).
    ``arithmetic`` = (pi^2/24)(m/N)(9H - A^2) keeps the lattice-dependent H
    in place of its equidistributed limit.
    """

    leading: float
    coefficient: float
    arithmetic: float
    integral_I: float
    H: float
    hypothesis_warning: bool

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def predict_variance(
    m: int, lattice: LatticeSet, surface: Surface, tol: float = 1e-8
) -> VariancePrediction:
    """Leading term of Var(L) for a surface of nowhere vanishing curvature.

    Raises
    ------
    DomainError
        If the lattice set does not belong to m or is empty.
    NumericError
        If the coefficient leaves [0, (pi^2/30) A^2].
    """
    if lattice.m != m or lattice.n_points == 0:
        msg = f"Lattice set of m={lattice.m} (N={lattice.n_points}) given for m={m}"
        logging.error(msg)
        raise DomainError(msg)
    warn = not surface.curvature_nonvanishing
    if warn:
        logging.warning(
            f"Surface '{surface.label}' has vanishing curvature somewhere: "
            "the variance asymptotic does not apply"
        )
    area2 = surface.area**2
    big_i = integral_I(surface, tol=tol)
    coefficient = pi**2 / 60.0 * (3.0 * big_i - area2)
    upper = pi**2 / 30.0 * area2
    slack = 10 * tol * upper
    if not -slack <= coefficient <= upper + slack:
        msg = f"Variance coefficient {coefficient} outside [0, {upper}]"
        logging.error(msg)
        raise NumericError(msg)
    h_value = integral_H(surface, lattice).value
    ratio = m / lattice.n_points
    return VariancePrediction(
        leading=coefficient * ratio,
        coefficient=coefficient,
        arithmetic=pi**2 / 24.0 * ratio * (9.0 * h_value - area2),
        integral_I=big_i,
        H=h_value,
        hypothesis_warning=warn,
    )


def worker_count(requested: Optional[int] = None) -> int:
    """Worker threads, capped by the WAVES_THREADS environment variable."""
    cap = os.environ.get("WAVES_THREADS")
    workers = requested if requested is not None else (os.cpu_count() or 1)
    if cap is not None:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            logging.warning(f"Ignoring WAVES_THREADS={cap!r}, not an integer")
    if requested is None:
        logging.info(f"Using {workers} worker threads")
    return max(1, workers)


def mc_experiment(
    m: int,
    surface: Surface,
    n_samples: int,
    base_seed: int = 0,
    h: Optional[float] = None,
    lattice: Optional[LatticeSet] = None,
    workers: Optional[int] = 1,
) -> SampleStats:
    """Monte Carlo estimate of the law of the nodal intersection length.

    Draws waves with seeds base_seed, ..., base_seed + n_samples - 1, extracts
    each nodal curve on one shared mesh, and reduces the lengths in seed
    order. The result does not depend on the number of workers.

    Parameters
    ----------
    m : int
        Energy, must be a sum of three squares.
    surface : Surface
    n_samples : int
    base_seed : int, default 0
    h : float, optional
        Mesh spacing, at most and by default 1/(10 sqrt(m)).
    lattice : LatticeSet, optional
        Precomputed lattice set of m.
    workers : int, optional, default 1
        Threads used for the replicas; None uses all cores. Capped by
        WAVES_THREADS.

    Raises
    ------
    ResolutionError
        If ``h`` is coarser than ten mesh vertices per wavelength.
    """
    if n_samples < 2:
        raise ValueError(f"Expected n_samples >= 2, got {n_samples}")
    if not is_representable(m):
        msg = f"m={m} is not a sum of three squares"
        logging.error(msg)
        raise DomainError(msg)
    limit = wavelength_resolution(m)
    h = limit if h is None else validate_positive(h, "h")
    if h > limit * (1.0 + 1e-12):
        msg = (
            f"Mesh spacing h={h} is too coarse for m={m}: use h <= "
            f"1/(10 sqrt(m)) = {limit:.4g}"
        )
        logging.error(msg)
        raise ResolutionError(msg)
    lattice = enumerate_lattice(m) if lattice is None else lattice
    mesh = triangulate(surface, h)
    seeds = range(base_seed, base_seed + n_samples)

    def length(seed: int) -> float:
        return extract_nodal_curve(sample(lattice, seed), mesh).total_length

    n_workers = worker_count(workers)
    if n_workers == 1:
        lengths = [length(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as executor:
            lengths = list(executor.map(length, seeds))
    index = Index(list(seeds), name="seed")
    data = Series(lengths, index=index, name="length", dtype=float)
    return SampleStats(data=data)


def concentration(
    stats: SampleStats, expected: float, eps: float = 0.2
) -> Tuple[float, float]:
    """Fraction of replicas with |L / expected - 1| > eps and the Chebyshev
    bound variance / (eps^2 expected^2) on its probability.
    """
    expected = validate_positive(expected, "expected")
    eps = validate_positive(eps, "eps")
    ratio = stats.data.to_numpy(dtype=float) / expected
    fraction = float((npabs(ratio - 1.0) > eps).mean())
    bound = stats.variance / (eps**2 * expected**2)
    return fraction, float(bound)
