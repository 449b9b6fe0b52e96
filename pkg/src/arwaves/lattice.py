import json
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Callable, Dict, List, Optional, Tuple

from numpy import (
    arange,
    argmax,
    asarray,
    concatenate,
    cross,
    empty,
    float64,
    floor,
    gcd,
    int64,
    lexsort,
    meshgrid,
    searchsorted,
    sign,
    sqrt,
    stack,
    unique,
    zeros,
)
from numpy.linalg import norm
from numpy.random import default_rng
from scipy.spatial.distance import pdist

from ._typing import NDArrayFloat, NDArrayInt
from .errors import CapacityError, DomainError, NumericError
from .utils import dumps_json, integrate_sphere, validate_positive, validate_unit_vector

ENUMERATION_CAP = 10**7  # largest m accepted by enumerate
COPLANAR_CAP = 200  # largest N for the O(N^3) plane scan
CORRELATION_BUDGET = 10**9  # largest N^4 for the length-4 correlations


def is_representable(m: int) -> bool:
    """True iff m is a sum of three squares, i.e. m != 4^l (8k + 7)."""
    m = int(m)
    if m < 0:
        return False
    if m == 0:
        return True
    while m % 4 == 0:
        m //= 4
    return m % 8 != 7


def is_admissible(m: int) -> bool:
    """True iff m is not congruent to 0, 4 or 7 modulo 8."""
    return int(m) > 0 and int(m) % 8 not in (0, 4, 7)


def admissible_values(lo: int, hi: int) -> List[int]:
    """All admissible m with lo <= m <= hi."""
    return [m for m in range(max(1, int(lo)), int(hi) + 1) if is_admissible(m)]


@dataclass
class LatticeSet:
    m: int
    points: NDArrayInt = field(repr=False)
    n_points: int = field(init=False)
    representable: bool = field(init=False)
    admissible: bool = field(init=False)
    half_set: NDArrayInt = field(init=False, repr=False)
    """
    Lattice points on the sphere of radius sqrt(m).

    Parameters
    ----------
    m : int
        Energy parameter; the points satisfy |mu|^2 = m.
    points : NDArrayInt
        Integer array of shape (N, 3) in lexicographic order.

    Attributes
    ----------
    n_points : int
        N, the number of lattice points.
    representable : bool
        Whether m is a sum of three squares.
    admissible : bool
        Whether m is not congruent to 0, 4, 7 modulo 8.
    half_set : NDArrayInt
        Indices into ``points`` of one representative per antipodal pair, the
        lexicographically larger of (mu, -mu).
    """

    def __post_init__(self) -> None:
        self.points = asarray(self.points, dtype=int64).reshape(-1, 3)
        self.n_points = len(self.points)
        self.representable = self.n_points > 0
        self.admissible = is_admissible(self.m)
        first = self._first_nonzero(self.points)
        self.half_set = arange(self.n_points)[first > 0]

    @staticmethod
    def _first_nonzero(points: NDArrayInt) -> NDArrayInt:
        if len(points) == 0:
            return zeros(0, dtype=int64)
        pivot = argmax(points != 0, axis=1)
        return points[arange(len(points)), pivot]

    @property
    def half_points(self) -> NDArrayInt:
        return self.points[self.half_set]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "m": self.m,
            "N": self.n_points,
            "admissible": self.admissible,
            "points": self.points.tolist(),
        }

    def to_json(self) -> str:
        return dumps_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "LatticeSet":
        data = json.loads(text)
        points = asarray(data["points"], dtype=int64).reshape(-1, 3)
        if len(points) and ((points**2).sum(axis=1) != data["m"]).any():
            raise DomainError("Serialized points do not lie on the sphere of m")
        return cls(m=int(data["m"]), points=points)


@dataclass
class ProjectedSet:
    """Lattice directions mu/|mu| on the unit sphere."""

    directions: NDArrayFloat = field(repr=False)
    m: int

    def __len__(self) -> int:
        return len(self.directions)


def enumerate(m: int) -> LatticeSet:
    """Enumerate all integer 3-vectors of squared norm m.

    Brute-force scan over |a_1|, |a_2| <= floor(sqrt(m)) solving for the third
    coordinate. Ordering is lexicographic on the coordinates.

    Parameters
    ----------
    m : int
        Positive integer, at most ``ENUMERATION_CAP``.

    Returns
    -------
    LatticeSet
    """
    m = int(m)
    if m < 1:
        msg = f"Expected m >= 1, got {m}"
        logging.error(msg)
        raise DomainError(msg)
    if m > ENUMERATION_CAP:
        msg = f"m={m} exceeds the enumeration cap {ENUMERATION_CAP}"
        logging.error(msg)
        raise CapacityError(msg)

    if not is_representable(m):
        logging.info(f"m={m} is of the form 4^l(8k+7): no lattice points")
        return LatticeSet(m=m, points=empty((0, 3), dtype=int64))

    bound = math.isqrt(m)
    b = arange(-bound, bound + 1, dtype=int64)
    found = []
    for a in range(-bound, bound + 1):
        rest = m - a * a - b * b
        ok = rest >= 0
        c = floor(sqrt(rest[ok].astype(float64)) + 0.5).astype(int64)
        hit = c * c == rest[ok]
        for bb, cc in zip(b[ok][hit], c[hit]):
            found.append((a, bb, -cc))
            if cc != 0:
                found.append((a, bb, cc))
    points = asarray(found, dtype=int64).reshape(-1, 3)
    order = lexsort((points[:, 2], points[:, 1], points[:, 0]))
    return LatticeSet(m=m, points=points[order])


def project(lattice: LatticeSet) -> ProjectedSet:
    """Project the lattice points to the unit sphere, mu -> mu/sqrt(m)."""
    if lattice.n_points == 0:
        msg = f"Cannot project the empty lattice set of m={lattice.m}"
        logging.error(msg)
        raise DomainError(msg)
    return ProjectedSet(directions=lattice.points / sqrt(lattice.m), m=lattice.m)


def riesz_energy(proj: ProjectedSet, s: float = 1.0) -> float:
    """Riesz s-energy sum_{i != j} |P_i - P_j|^(-s) of the directions."""
    s = validate_positive(s, "s")
    directions = asarray(getattr(proj, "directions", proj), dtype=float64)
    if len(directions) < 2:
        raise DomainError("Riesz energy needs at least two points")
    dist = pdist(directions)
    if (dist == 0.0).any():
        msg = "Duplicate points in configuration, Riesz energy is infinite"
        logging.error(msg)
        raise DomainError(msg)
    return float(2.0 * (dist ** (-s)).sum())


def riesz_limit(s: float) -> float:
    """Normalized continuum energy 2^(1-s)/(2-s) of the uniform measure."""
    return 2.0 ** (1.0 - s) / (2.0 - s)


def cap_count(lattice: LatticeSet, center: Any, s: float) -> int:
    """Number of lattice points within distance s of sqrt(m) * center."""
    if lattice.n_points == 0:
        raise DomainError("Cap count of an empty lattice set")
    center = validate_unit_vector(center, name="center")
    dist = norm(lattice.points - sqrt(lattice.m) * center, axis=-1)
    return int((dist <= s + 1e-9).sum())


def max_cap_count(
    lattice: LatticeSet, s: float, n_random: int = 256, seed: int = 0
) -> int:
    """Maximal cap count over lattice directions and random centers.

    A lower bound for the supremum over all cap centers.
    """
    if lattice.n_points == 0:
        raise DomainError("Cap count of an empty lattice set")
    centers = project(lattice).directions
    if n_random > 0:
        rnd = default_rng(seed).standard_normal((n_random, 3))
        centers = concatenate([centers, rnd / norm(rnd, axis=1)[:, None]])
    counts = [
        int((norm(lattice.points - sqrt(lattice.m) * c, axis=-1) <= s + 1e-9).sum())
        for c in centers
    ]
    return max(counts)


def max_coplanar(lattice: LatticeSet) -> int:
    """Maximal number of lattice points on a plane section of the sphere.

    Planes are generated by all point triples and identified by their
    primitive integer normal and offset. A plane holding k points arises from
    C(k, 3) triples, which gives k from the multiplicity of each plane.
    """
    n = lattice.n_points
    if n > COPLANAR_CAP:
        msg = f"N={n} exceeds the coplanar brute-force cap {COPLANAR_CAP}"
        logging.error(msg)
        raise CapacityError(msg)
    if n < 3:
        return n

    triples = asarray(list(combinations(range(n), 3)), dtype=int64)
    p0 = lattice.points[triples[:, 0]]
    p1 = lattice.points[triples[:, 1]]
    p2 = lattice.points[triples[:, 2]]
    normals = cross(p1 - p0, p2 - p0)
    g = gcd.reduce(normals, axis=1)
    normals = normals // g[:, None]
    # fix the sign on the first nonzero normal component
    pivot = argmax(normals != 0, axis=1)
    sgn = sign(normals[arange(len(normals)), pivot])
    normals = normals * sgn[:, None]
    offsets = (normals * p0).sum(axis=1)
    keys = concatenate([normals, offsets[:, None]], axis=1)
    _, multiplicity = unique(keys, axis=0, return_counts=True)

    best = int(multiplicity.max())
    k = 3
    while k * (k - 1) * (k - 2) // 6 < best:
        k += 1
    return k


def _encode(vectors: NDArrayInt, radius: int) -> NDArrayInt:
    base = 2 * radius + 1
    shifted = vectors + radius
    return (shifted[..., 0] * base + shifted[..., 1]) * base + shifted[..., 2]


def _paired_count(points: NDArrayInt, radius: int) -> int:
    """Number of zero-sum 4-tuples that split into two antipodal pairs.

    Each point is joined with its antipode through the encoded keys, then the
    tuples (a, -a, b, -b), (a, b, -a, -b) and (a, b, -b, -a) are listed as
    index quadruples and counted once each.
    """
    n = len(points)
    keys = _encode(points, radius)
    order = keys.argsort()
    pos = searchsorted(keys[order], _encode(-points, radius)).clip(0, n - 1)
    antipode = order[pos]
    if (points[antipode] != -points).any():
        msg = "Lattice set is not closed under negation"
        logging.error(msg)
        raise NumericError(msg)
    i, j = meshgrid(arange(n), arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    ni, nj = antipode[i], antipode[j]
    quads = concatenate(
        [
            stack([i, ni, j, nj], axis=1),
            stack([i, j, ni, nj], axis=1),
            stack([i, j, nj, ni], axis=1),
        ]
    )
    return len(unique(quads, axis=0))


def spectral_correlations4(lattice: LatticeSet) -> Tuple[int, int, float]:
    """Length-4 spectral correlations of the lattice set.

    Pair sums mu_1 + mu_2 are hashed and met with -(mu_3 + mu_4), which
    counts C(4) in O(N^2). The off-diagonal sum of |mu_1+mu_2+mu_3+mu_4|^-2
    is accumulated over pairs of distinct pair sums in a fixed order.

    Returns
    -------
    tuple
        (|C(4)|, number of tuples made of two antipodal pairs,
        sum over E^4 minus C(4) of |mu_1 + mu_2 + mu_3 + mu_4|^-2)
    """
    n = lattice.n_points
    if n**4 > CORRELATION_BUDGET:
        msg = f"N^4 = {n**4} exceeds the correlation budget {CORRELATION_BUDGET}"
        logging.error(msg)
        raise CapacityError(msg)
    if n == 0:
        return 0, 0, 0.0

    radius = 4 * math.isqrt(lattice.m) + 4
    pair_sums = (lattice.points[:, None, :] + lattice.points[None, :, :]).reshape(-1, 3)
    values, counts = unique(pair_sums, axis=0, return_counts=True)
    keys = _encode(values, radius)
    order = keys.argsort()
    keys_sorted = keys[order]
    counts_sorted = counts[order]
    neg = _encode(-values, radius)
    pos = searchsorted(keys_sorted, neg)
    pos[pos >= len(keys_sorted)] = 0
    match = keys_sorted[pos] == neg
    count = int((counts[match] * counts_sorted[pos[match]]).sum())
    paired = _paired_count(lattice.points, radius)

    partial: List[float] = []
    chunk = max(1, 2_000_000 // len(values))
    for start in range(0, len(values), chunk):
        stop = start + chunk
        total = values[start:stop, None, :] + values[None, :, :]
        weight = counts[start:stop, None] * counts[None, :]
        sq = (total**2).sum(axis=-1)
        nonzero = sq > 0
        partial.append(float((weight[nonzero] / sq[nonzero]).sum()))
    return count, paired, math.fsum(partial)


def _spectral_correlations4_bruteforce(lattice: LatticeSet) -> Tuple[int, int, float]:
    """O(N^4) reference loop for small N (test oracle)."""
    pts = lattice.points
    n = len(pts)
    if n > 30:
        raise CapacityError("Brute-force correlation oracle is limited to N <= 30")
    count = 0
    paired = 0
    off = 0.0
    for i in range(n):
        s1 = pts[i] + pts[:, None, None, :]
        total = s1 + pts[None, :, None, :] + pts[None, None, :, :]
        sq = (total**2).sum(axis=-1)
        count += int((sq == 0).sum())
        off += float((1.0 / sq[sq > 0]).sum())
        for j, k, h in zip(*(sq == 0).nonzero()):
            if any((pts[i] + pts[other] == 0).all() for other in (j, k, h)):
                paired += 1
    return count, paired, off


def directional_moment(lattice: LatticeSet, i: int, j: int, k: int, l: int) -> float:
    """Normalized mixed moment (1/(m^2 N)) sum_mu (mu_i)^k (mu_j)^l.

    Axes are 0-based. Requires i != j, k + l = 4 and 0 <= k <= l.
    """
    if i == j or not {i, j} <= {0, 1, 2}:
        raise DomainError(f"Expected two distinct axes in (0, 1, 2), got {i}, {j}")
    if k + l != 4 or not 0 <= k <= l:
        raise DomainError(f"Expected k + l = 4 and 0 <= k <= l, got k={k}, l={l}")
    if lattice.n_points == 0:
        raise DomainError("Directional moment of an empty lattice set")
    total = int((lattice.points[:, i] ** k * lattice.points[:, j] ** l).sum())
    return total / (lattice.m**2 * lattice.n_points)


def integrate_against_tau(
    lattice: LatticeSet,
    g: Callable[[NDArrayFloat], Any],
    tol: float = 1e-9,
    order: int = 8,
    max_order: int = 512,
) -> Tuple[float, float, float]:
    """Compare the lattice measure tau_m with the uniform measure.

    The uniform average uses Gauss–Legendre in cos(phi) times the trapezoid
    rule in the azimuth, doubling the order until the relative change is
    below ``tol``.

    Returns
    -------
    tuple
        (tau_value, uniform_value, gap)
    """
    directions = project(lattice).directions
    tau_value = float(asarray(g(directions), dtype=float64).mean())
    uniform_value, _ = integrate_sphere(g, tol=tol, order=order, max_order=max_order)
    return tau_value, uniform_value, abs(tau_value - uniform_value)


def lattice_summary(lattice: LatticeSet, s_grid: Optional[List[float]] = None) -> Dict:
    """Plot-ready diagnostics of one lattice set (used by the CLI)."""
    summary: Dict[str, Any] = lattice.to_dict()
    summary["representable"] = lattice.representable
    if lattice.n_points >= 2:
        summary["riesz_energy_1_normalized"] = riesz_energy(project(lattice), 1.0) / (
            lattice.n_points**2
        )
        summary["moments"] = {
            f"k={k}": directional_moment(lattice, 0, 1, k, 4 - k) for k in (0, 1, 2)
        }
    if 0 < lattice.n_points <= COPLANAR_CAP:
        summary["max_coplanar"] = max_coplanar(lattice)
    if 0 < lattice.n_points**4 <= CORRELATION_BUDGET:
        count, paired, off = spectral_correlations4(lattice)
        summary["correlations4"] = {"count": count, "paired": paired, "offdiag": off}
    if s_grid and lattice.n_points:
        summary["max_cap_count"] = {
            str(s): max_cap_count(lattice, s, n_random=64) for s in s_grid
        }
    return summary
