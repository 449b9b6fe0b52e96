import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Literal, Optional, Tuple, Union

from numpy import (
    arange,
    asarray,
    clip,
    complex128,
    concatenate,
    cos,
    cosh,
    einsum,
    empty,
    exp,
    expm1,
    eye,
    float64,
    log1p,
    pi,
    sin,
    sinh,
    sqrt,
    take_along_axis,
    uint64,
    where,
    zeros,
)
from numpy import abs as npabs
from numpy import sort as npsort
from numpy.linalg import cholesky, eigvalsh, norm
from numpy.random import Philox, default_rng
from scipy.stats import norm as normal_dist
from scipy.stats.qmc import Sobol

from ._typing import NDArrayComplex, NDArrayFloat, NDArrayInt
from .errors import DomainError, MatrixError, NearSingularError, ResolutionError
from .lattice import LatticeSet
from .lattice import enumerate as enumerate_lattice
from .surface import Mesh, Surface, triangulate
from .utils import dumps_json, validate_positive, validate_vector

NEAR_SINGULAR = 1e-10  # |r| >= 1 - NEAR_SINGULAR is refused
EXPANSION_RADIUS = 0.5  # the second-order expansion is used for |r| <= 1/2
EXPANSION_CONSTANT = 0.5  # k2 remainder <= C (r^4 + |X|^2 + |X'|^2 + |Y|^4 + |Y'|^4)

FieldFunction = Callable[[NDArrayFloat], Tuple[NDArrayFloat, NDArrayFloat]]


def energy_scale(m: int) -> float:
    """M = 4 pi^2 m / 3, the variance of each gradient component."""
    return 4.0 * pi**2 * m / 3.0


@dataclass
class WaveSample:
    lattice: LatticeSet = field(repr=False)
    coefficients: NDArrayComplex = field(repr=False)
    seed: int
    """
    One draw of an arithmetic random wave.

    Parameters
    ----------
    lattice : LatticeSet
        The frequencies mu with |mu|^2 = m.
    coefficients : NDArrayComplex
        One complex standard Gaussian per entry of ``lattice.half_set``; the
        partner -mu carries the complex conjugate.
    seed : int
        Seed the coefficients were drawn with.
    """

    @property
    def m(self) -> int:
        return self.lattice.m

    def full_coefficients(self) -> NDArrayComplex:
        """Coefficients for every lattice point, with a(-mu) = conj(a(mu))."""
        points = self.lattice.points
        index = {p: i for i, p in zip(range(len(points)), map(tuple, points.tolist()))}
        full = empty(self.lattice.n_points, dtype=complex128)
        for i, a in zip(self.lattice.half_set.tolist(), self.coefficients.tolist()):
            full[i] = a
            full[index[tuple(-x for x in points[i].tolist())]] = a.conjugate()
        return full

    def __call__(self, x: Any) -> Tuple[NDArrayFloat, NDArrayFloat]:
        return evaluate(self, x)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "m": self.m,
            "seed": self.seed,
            "coefficients": [[c.real, c.imag] for c in self.coefficients.tolist()],
        }

    def to_json(self) -> str:
        return dumps_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str, lattice: Optional[LatticeSet] = None) -> "WaveSample":
        data = json.loads(text)
        if lattice is None:
            lattice = enumerate_lattice(int(data["m"]))
        elif lattice.m != int(data["m"]):
            raise DomainError(f"Sample of m={data['m']} given lattice of m={lattice.m}")
        coefficients = asarray(data["coefficients"], dtype=float64).reshape(-1, 2)
        if len(coefficients) != len(lattice.half_set):
            raise DomainError("Number of coefficients does not match the lattice")
        return cls(
            lattice=lattice,
            coefficients=coefficients[:, 0] + 1j * coefficients[:, 1],
            seed=int(data["seed"]),
        )


def _philox_uniforms(m: int, seed: int, n: int) -> NDArrayFloat:
    """2n uniforms on [0, 1) from the counter-based stream of (m, seed).

    Uniform 2i and 2i+1 belong to coefficient i whatever n is.
    """
    if not 0 <= seed < 2**64:
        raise ValueError(f"Expected 0 <= seed < 2^64, got {seed}")
    raw = Philox(key=(int(m) << 64) | int(seed)).random_raw(2 * n)
    return (asarray(raw, dtype=uint64) >> uint64(11)).astype(float64) * 2.0**-53


def sample(lattice: LatticeSet, seed: int) -> WaveSample:
    """Draw complex standard Gaussian coefficients on the half set.

    Real and imaginary parts are independent with variance 1/2, so
    E|a|^2 = 1. Deterministic given (m, seed).
    """
    if lattice.n_points == 0:
        msg = f"Cannot sample a wave for m={lattice.m}: no lattice points"
        logging.error(msg)
        raise DomainError(msg)
    n = len(lattice.half_set)
    u = _philox_uniforms(lattice.m, seed, n).reshape(n, 2)
    modulus = sqrt(-log1p(-u[:, 0]))
    coefficients = modulus * exp(2j * pi * u[:, 1])
    return WaveSample(lattice=lattice, coefficients=coefficients, seed=int(seed))


def evaluate(wave: WaveSample, x: Any) -> Tuple[NDArrayFloat, NDArrayFloat]:
    """Field value and ambient gradient at points ``x`` of shape (..., 3).

    F(x) = (2/sqrt(N)) sum over the half set of Re(a) cos - Im(a) sin of
    2 pi <mu, x>.
    """
    x = validate_vector(x, name="x")
    mu = wave.lattice.half_points.astype(float64)
    scale = 2.0 / sqrt(wave.lattice.n_points)
    theta = 2.0 * pi * (x @ mu.T)
    c, s = cos(theta), sin(theta)
    re, im = wave.coefficients.real, wave.coefficients.imag
    value = scale * (c @ re - s @ im)
    gradient = scale * 2.0 * pi * ((-s * re - c * im) @ mu)
    return value, gradient


@dataclass
class CovarianceJet:
    r: NDArrayFloat
    D: NDArrayFloat
    hess: NDArrayFloat
    m: int
    """
    Covariance r(x - y) of the normalized field with its first and second
    derivatives in x. Arrays carry arbitrary leading dimensions.

    Attributes
    ----------
    r : NDArrayFloat
        (1/N) sum of cos(2 pi <mu, x - y>).
    D : NDArrayFloat
        Gradient of r in x, shape (..., 3).
    hess : NDArrayFloat
        Hessian of r in x, shape (..., 3, 3); equals -M I on the diagonal.
    """


def covariance_jet(lattice: LatticeSet, sigma: Any, sigma_p: Any) -> CovarianceJet:
    """Exact trigonometric sums for r, D and the Hessian at point pairs."""
    if lattice.n_points == 0:
        raise DomainError(f"Covariance of an empty lattice set (m={lattice.m})")
    sigma = validate_vector(sigma, name="sigma")
    diff = sigma - validate_vector(sigma_p, name="sigma_p")
    mu = lattice.half_points.astype(float64)
    n = lattice.n_points
    theta = 2.0 * pi * (diff @ mu.T)
    c, s = cos(theta), sin(theta)
    outer = einsum("ki,kj->kij", mu, mu)
    return CovarianceJet(
        r=2.0 * c.sum(axis=-1) / n,
        D=-4.0 * pi * (s @ mu) / n,
        hess=-8.0 * pi**2 * einsum("...k,kij->...ij", c, outer) / n,
        m=lattice.m,
    )


def pairwise_covariance(lattice: LatticeSet, x: Any, y: Any) -> NDArrayFloat:
    """r between every point of ``x`` (p, 3) and of ``y`` (q, 3), shape (p, q)."""
    if lattice.n_points == 0:
        raise DomainError(f"Covariance of an empty lattice set (m={lattice.m})")
    mu = lattice.half_points.astype(float64)
    ax = 2.0 * pi * (validate_vector(x, name="x").reshape(-1, 3) @ mu.T)
    ay = 2.0 * pi * (validate_vector(y, name="y").reshape(-1, 3) @ mu.T)
    return 2.0 * (cos(ax) @ cos(ay).T + sin(ax) @ sin(ay).T) / lattice.n_points


def pairwise_covariance_jet(lattice: LatticeSet, x: Any, y: Any) -> CovarianceJet:
    """Covariance jet between every point of ``x`` (p, 3) and of ``y`` (q, 3).

    Same values as ``covariance_jet(lattice, x[:, None], y[None, :])``, built
    from the addition formulas cos(a - b) = cos a cos b + sin a sin b and
    sin(a - b) = sin a cos b - cos a sin b as matrix products.
    """
    if lattice.n_points == 0:
        raise DomainError(f"Covariance of an empty lattice set (m={lattice.m})")
    x = validate_vector(x, name="x").reshape(-1, 3)
    y = validate_vector(y, name="y").reshape(-1, 3)
    mu = lattice.half_points.astype(float64)
    n = lattice.n_points
    ax, ay = 2.0 * pi * (x @ mu.T), 2.0 * pi * (y @ mu.T)
    cx, sx, cy, sy = cos(ax), sin(ax), cos(ay), sin(ay)
    outer = einsum("ki,kj->kij", mu, mu)
    r = 2.0 * (cx @ cy.T + sx @ sy.T) / n
    D = -4.0 * pi * (
        einsum("pk,ki,qk->pqi", sx, mu, cy, optimize=True)
        - einsum("pk,ki,qk->pqi", cx, mu, sy, optimize=True)
    ) / n
    hess = -8.0 * pi**2 * (
        einsum("pk,kij,qk->pqij", cx, outer, cy, optimize=True)
        + einsum("pk,kij,qk->pqij", sx, outer, sy, optimize=True)
    ) / n
    return CovarianceJet(r=r, D=D, hess=hess, m=lattice.m)


@dataclass
class Frame:
    permutation: NDArrayInt
    sign: NDArrayFloat
    """
    Per-point axis pivot: coordinates are permuted so that the chosen normal
    component comes third, and the normal sign is flipped so that this
    component is positive.
    """

    @classmethod
    def with_axis(cls, normals: Any, axis: Any) -> "Frame":
        normals = validate_vector(normals, name="normals")
        axis = asarray(axis, dtype=int) + zeros(normals.shape[:-1], dtype=int)
        permutation = concatenate(
            [((axis + 1) % 3)[..., None], ((axis + 2) % 3)[..., None], axis[..., None]],
            axis=-1,
        )
        third = take_along_axis(normals, axis[..., None], axis=-1)[..., 0]
        if (third == 0.0).any():
            msg = "Frame axis has a vanishing normal component"
            logging.error(msg)
            raise DomainError(msg)
        return cls(permutation=permutation, sign=where(third > 0.0, 1.0, -1.0))

    @classmethod
    def pivot(cls, normals: Any) -> "Frame":
        """Place the largest |n_i| third; it is at least 1/sqrt(3)."""
        normals = validate_vector(normals, name="normals")
        return cls.with_axis(normals, npabs(normals).argmax(axis=-1))

    def matrix(self) -> NDArrayFloat:
        """Permutation matrices P with (P n)_k = n[permutation[k]]."""
        shape = self.permutation.shape
        eye3 = eye(3)
        return eye3[self.permutation.reshape(-1, 3)].reshape(shape + (3,))

    def selection(self) -> NDArrayFloat:
        """S = L^T P, the first two rows of P, shape (..., 2, 3)."""
        return self.matrix()[..., :2, :]

    def pivoted(self, normals: NDArrayFloat) -> NDArrayFloat:
        permuted = take_along_axis(normals, self.permutation, axis=-1)
        return self.sign[..., None] * permuted


def projection(normals: Any) -> NDArrayFloat:
    """Omega = I - n n^T, the tangent projection."""
    normals = validate_vector(normals, name="normals")
    return eye(3) - einsum("...i,...j->...ij", normals, normals)


def square_root(normals: Any, frame: Optional[Frame] = None) -> NDArrayFloat:
    """Q = I + p p^T / (n3 (1 + n3)) in the pivoted frame.

    Q is symmetric and Q^2 (S Omega S^T) = I with S the frame selection.
    """
    normals = validate_vector(normals, name="normals")
    frame = frame if frame is not None else Frame.pivot(normals)
    nhat = frame.pivoted(normals)
    p = nhat[..., :2]
    n3 = nhat[..., 2]
    outer = einsum("...i,...j->...ij", p, p)
    return eye(2) + outer / asarray(n3 * (1.0 + n3))[..., None, None]


@dataclass
class KacRiceMatrices:
    omega: NDArrayFloat
    omega_p: NDArrayFloat
    q: NDArrayFloat
    q_p: NDArrayFloat
    X: NDArrayFloat
    X_p: NDArrayFloat
    Y: NDArrayFloat
    Y_p: NDArrayFloat
    theta_hat: NDArrayFloat
    r: NDArrayFloat
    """
    The conditioned and whitened gradient covariance at a point pair.

    ``theta_hat`` is I_4 + [[X, Y], [Y_p, X_p]], the covariance of the
    normalized tangent gradients (a(x), a(y)) conditioned on F(x) = F(y) = 0.
    """

    def traces(self) -> Tuple[NDArrayFloat, NDArrayFloat, NDArrayFloat]:
        """tr(X), tr(X_p) and tr(Y_p Y), all frame invariant."""
        tr_x = einsum("...ii->...", self.X)
        tr_xp = einsum("...ii->...", self.X_p)
        tr_yy = einsum("...ij,...ji->...", self.Y_p, self.Y)
        return tr_x, tr_xp, tr_yy


def _check_singular(r: NDArrayFloat) -> None:
    if (npabs(r) >= 1.0 - NEAR_SINGULAR).any():
        msg = "|r| too close to 1, the conditioned Gaussian law is singular"
        logging.error(msg)
        raise NearSingularError(msg)


def kacrice_matrices(
    jet: CovarianceJet,
    n: Any,
    n_p: Any,
    m: Optional[int] = None,
    frame: Optional[Frame] = None,
    frame_p: Optional[Frame] = None,
) -> KacRiceMatrices:
    """Build Omega, Q, X, X', Y, Y' and Theta-hat at point pairs.

    Parameters
    ----------
    jet : CovarianceJet
        r, D and the Hessian at the pairs.
    n, n_p : array_like
        Unit normals at the first and second point, shape (..., 3).
    m : int, optional
        Energy, defaults to ``jet.m``.
    frame, frame_p : Frame, optional
        Axis pivots, default is the largest normal component.

    Raises
    ------
    NearSingularError
        If |r| >= 1 - 1e-10.
    """
    m = jet.m if m is None else m
    r = asarray(jet.r, dtype=float64)
    _check_singular(r)
    n = validate_vector(n, name="n")
    n_p = validate_vector(n_p, name="n_p")
    frame = frame if frame is not None else Frame.pivot(n)
    frame_p = frame_p if frame_p is not None else Frame.pivot(n_p)
    big_m = energy_scale(m)
    one_minus = 1.0 - r**2

    omega, omega_p = projection(n), projection(n_p)
    q, q_p = square_root(n, frame), square_root(n_p, frame_p)
    a = einsum("...ij,...jk,...kl->...il", q, frame.selection(), omega)
    a_p = einsum("...ij,...jk,...kl->...il", q_p, frame_p.selection(), omega_p)

    v = einsum("...ij,...j->...i", a, jet.D)
    v_p = einsum("...ij,...j->...i", a_p, jet.D)
    scale = asarray(one_minus * big_m)[..., None, None]
    X = -einsum("...i,...j->...ij", v, v) / scale
    X_p = -einsum("...i,...j->...ij", v_p, v_p) / scale

    core = jet.hess + asarray(r / one_minus)[..., None, None] * einsum(
        "...i,...j->...ij", jet.D, jet.D
    )
    Y = -einsum("...ij,...jk,...lk->...il", a, core, a_p) / big_m
    Y_p = Y.swapaxes(-1, -2)

    theta_hat = concatenate(
        [concatenate([X, Y], axis=-1), concatenate([Y_p, X_p], axis=-1)], axis=-2
    ) + eye(4)
    return KacRiceMatrices(
        omega=omega,
        omega_p=omega_p,
        q=q,
        q_p=q_p,
        X=X,
        X_p=X_p,
        Y=Y,
        Y_p=Y_p,
        theta_hat=theta_hat,
        r=r,
    )


def covariance_matrix_phi(
    lattice: LatticeSet,
    sigma: Any,
    sigma_p: Any,
    n: Any,
    n_p: Any,
    frame: Optional[Frame] = None,
    frame_p: Optional[Frame] = None,
) -> NDArrayFloat:
    """The 6 x 6 covariance of (F(x), F(y), a(x), a(y)).

    a(x) = S Omega grad F(x) are the two selected tangent gradient
    coordinates.
    """
    jet = covariance_jet(lattice, sigma, sigma_p)
    n = validate_vector(n, name="n")
    n_p = validate_vector(n_p, name="n_p")
    frame = frame if frame is not None else Frame.pivot(n)
    frame_p = frame_p if frame_p is not None else Frame.pivot(n_p)
    big_m = energy_scale(lattice.m)
    b = einsum("...ij,...jk->...ik", frame.selection(), projection(n))
    b_p = einsum("...ij,...jk->...ik", frame_p.selection(), projection(n_p))

    shape = jet.r.shape
    phi = zeros(shape + (6, 6))
    phi[..., 0, 0] = phi[..., 1, 1] = 1.0
    phi[..., 0, 1] = phi[..., 1, 0] = jet.r
    cov_f_ap = -einsum("...ij,...j->...i", b_p, jet.D)
    cov_fp_a = einsum("...ij,...j->...i", b, jet.D)
    phi[..., 0, 4:6] = phi[..., 4:6, 0] = cov_f_ap
    phi[..., 1, 2:4] = phi[..., 2:4, 1] = cov_fp_a
    phi[..., 2:4, 2:4] = big_m * einsum("...ij,...kj->...ik", b, b)
    phi[..., 4:6, 4:6] = big_m * einsum("...ij,...kj->...ik", b_p, b_p)
    cross_block = -einsum("...ij,...jk,...lk->...il", b, jet.hess, b_p)
    phi[..., 2:4, 4:6] = cross_block
    phi[..., 4:6, 2:4] = cross_block.swapaxes(-1, -2)
    return phi


def reduced_theta(
    phi: NDArrayFloat, q: NDArrayFloat, q_p: NDArrayFloat, m: int
) -> NDArrayFloat:
    """Schur complement of the values block in phi, whitened by Q and M."""
    a11 = phi[..., :2, :2]
    a12 = phi[..., :2, 2:]
    a22 = phi[..., 2:, 2:]
    det = a11[..., 0, 0] * a11[..., 1, 1] - a11[..., 0, 1] ** 2
    inv = zeros(a11.shape)
    inv[..., 0, 0] = a11[..., 1, 1]
    inv[..., 1, 1] = a11[..., 0, 0]
    inv[..., 0, 1] = inv[..., 1, 0] = -a11[..., 0, 1]
    inv = inv / det[..., None, None]
    schur = a22 - einsum("...ji,...jk,...kl->...il", a12, inv, a12)
    w = zeros(q.shape[:-2] + (4, 4))
    w[..., :2, :2] = q
    w[..., 2:, 2:] = q_p
    return einsum("...ij,...jk,...lk->...il", w, schur, w) / energy_scale(m)


def k1_density(m: int) -> float:
    """Zero density pi sqrt(m) / sqrt(3), constant over any surface."""
    if m < 1:
        raise DomainError(f"Expected m >= 1, got {m}")
    return float(pi * sqrt(m) / sqrt(3.0))


def _check_positive_definite(theta_hat: NDArrayFloat) -> None:
    sym = 0.5 * (theta_hat + theta_hat.swapaxes(-1, -2))
    if (eigvalsh(sym)[..., 0] <= 0.0).any():
        msg = "Theta-hat is not positive definite"
        logging.error(msg)
        raise MatrixError(msg)


def _scaled_inverse(block: NDArrayFloat, s: NDArrayFloat) -> NDArrayFloat:
    """2 s (I + 2 s B)^(-1) for symmetric 2 x 2 blocks B (P, 2, 2), batched over s."""
    lam = eigvalsh(block)
    two_s = 2.0 * s[None, :]
    det = (1.0 + two_s * lam[:, :1]) * (1.0 + two_s * lam[:, 1:])
    adj = zeros(det.shape + (2, 2))
    adj[..., 0, 0] = 1.0 + two_s * block[:, 1, 1, None]
    adj[..., 1, 1] = 1.0 + two_s * block[:, 0, 0, None]
    adj[..., 0, 1] = adj[..., 1, 0] = -two_s * block[:, 0, 1, None]
    return (two_s / det)[..., None, None] * adj


def _scale_nodes(step: float, y_max: float) -> Tuple[NDArrayFloat, NDArrayFloat]:
    """Exp-sinh nodes s = exp(pi/2 sinh y) and weights of ds / s."""
    y = arange(-y_max, y_max + 0.5 * step, step)
    return exp(0.5 * pi * sinh(y)), step * 0.5 * pi * cosh(y)


def _norm_product_quadrature(
    theta_hat: NDArrayFloat, step: float, y_max: float, chunk: int = 2**20
) -> NDArrayFloat:
    """E|(W1, W2)| |(W3, W4)| for W ~ N(0, theta_hat), matrices of shape (P, 4, 4).

    Uses |w| = (1 / (2 sqrt(pi))) int_0^inf (1 - exp(-s |w|^2)) s^(-3/2) ds
    and E exp(-W^T K W) = det(I + 2 K Theta)^(-1/2), which reduces the 4d
    Gaussian moment to a smooth integral over two scales (s, t). The joint
    determinant is factored through 2 x 2 Schur complements so that no
    precision is lost when s and t differ by many orders of magnitude.
    """
    s, ws = _scale_nodes(step, y_max)
    weight = ws / sqrt(s)
    rows = max(1, chunk // len(s) ** 2)
    out = empty(len(theta_hat))
    for start in range(0, len(theta_hat), rows):
        th = theta_hat[start : start + rows]
        t11, t12 = th[:, :2, :2], th[:, :2, 2:]
        t21, t22 = th[:, 2:, :2], th[:, 2:, 2:]
        a = -0.5 * log1p(2.0 * s[None, :, None] * eigvalsh(t11)[:, None, :]).sum(-1)
        b = -0.5 * log1p(2.0 * s[None, :, None] * eigvalsh(t22)[:, None, :]).sum(-1)
        p = _scaled_inverse(t11, s)
        q = _scaled_inverse(t22, s)
        # coupling k = (2t E^-1) T21 (2s A^-1) T12, indexed [matrix, s, t]
        k = einsum("pjab,pbc,picd,pde->pijae", q, t21, p, t12, optimize=True)
        tr_k = k[..., 0, 0] + k[..., 1, 1]
        det_k = k[..., 0, 0] * k[..., 1, 1] - k[..., 0, 1] * k[..., 1, 0]
        excess = -0.5 * log1p(det_k - tr_k)
        ab = a[:, :, None] + b[:, None, :]
        term = expm1(a)[:, :, None] * expm1(b)[:, None, :] + exp(ab) * expm1(excess)
        out[start : start + rows] = einsum("i,pij,j->p", weight, term, weight)
    return out / (4.0 * pi)


def gaussian_norm_product(
    theta_hat: Any,
    method: Literal["quadrature", "qmc"] = "quadrature",
    step: float = 0.1,
    y_max: float = 4.5,
    n_qmc: int = 2**16,
    n_replicates: int = 16,
    seed: int = 0,
    estimate_error: bool = True,
) -> Tuple[NDArrayFloat, NDArrayFloat]:
    """E|(W1, W2)| |(W3, W4)| for W ~ N(0, theta_hat).

    Parameters
    ----------
    theta_hat : array_like
        Positive definite 4 x 4 matrices, shape (..., 4, 4).
    method : {'quadrature', 'qmc'}
        'quadrature' integrates over two scales with the exp-sinh trapezoid
        rule; its error estimate is the change against the rule with twice
        the step (skipped when ``estimate_error`` is False). 'qmc' averages
        over ``n_replicates`` scrambled Sobol point sets of ``n_qmc``
        Gaussian points; its error is the standard error across replicates.

    Returns
    -------
    tuple
        (value, error estimate), each with the leading shape of theta_hat.

    Raises
    ------
    MatrixError
        If a matrix is not positive definite.
    """
    theta_hat = asarray(theta_hat, dtype=float64)
    if theta_hat.shape[-2:] != (4, 4):
        msg = f"Expected matrices of shape (..., 4, 4), got {theta_hat.shape}"
        logging.error(msg)
        raise ValueError(msg)
    _check_positive_definite(theta_hat)
    flat = theta_hat.reshape(-1, 4, 4)
    values = empty(len(flat))
    errors = empty(len(flat))

    if method == "quadrature":
        values = _norm_product_quadrature(flat, step, y_max)
        if estimate_error:
            errors = npabs(values - _norm_product_quadrature(flat, 2.0 * step, y_max))
        else:
            errors = zeros(len(flat))
    elif method == "qmc":
        engines = [
            Sobol(d=4, scramble=True, seed=seed + k) for k in range(n_replicates)
        ]
        points = [
            normal_dist.ppf(clip(e.random(n_qmc), 1e-16, 1.0 - 1e-16)) for e in engines
        ]
        for i, th in zip(range(len(flat)), flat):
            chol = cholesky(th)
            means = []
            for z in points:
                w = z @ chol.T
                means.append((norm(w[:, :2], axis=1) * norm(w[:, 2:], axis=1)).mean())
            arr = asarray(means)
            values[i] = arr.mean()
            errors[i] = arr.std(ddof=1) / sqrt(n_replicates)
    else:
        raise ValueError(f"Unknown method '{method}', expected 'quadrature' or 'qmc'")
    shape = theta_hat.shape[:-2]
    return values.reshape(shape), errors.reshape(shape)


def k2_exact(
    mats: KacRiceMatrices,
    r: Any = None,
    method: Literal["quadrature", "qmc"] = "quadrature",
    **kwargs: Any,
) -> Tuple[NDArrayFloat, NDArrayFloat]:
    """Scaled two-point function E|a(x)||a(y)| / (2 pi sqrt(1 - r^2)).

    Multiplying by M gives the two-point correlation of the nodal length.

    Returns
    -------
    tuple
        (value, error estimate of the Gaussian moment engine)
    """
    r = mats.r if r is None else asarray(r, dtype=float64)
    _check_singular(r)
    value, error = gaussian_norm_product(mats.theta_hat, method=method, **kwargs)
    scale = 1.0 / (2.0 * pi * sqrt(1.0 - r**2))
    return value * scale, error * scale


def k2_expanded(mats: KacRiceMatrices, r: Any = None) -> NDArrayFloat:
    """Second-order expansion 1/4 [1 + r^2/2 + tr X/4 + tr X'/4 + tr(Y'Y)/8].

    Raises
    ------
    DomainError
        If |r| > 1/2, outside the validity region of the expansion.
    """
    r = mats.r if r is None else asarray(r, dtype=float64)
    if (npabs(r) > EXPANSION_RADIUS).any():
        msg = f"Expansion requires |r| <= {EXPANSION_RADIUS}"
        logging.error(msg)
        raise DomainError(msg)
    tr_x, tr_xp, tr_yy = mats.traces()
    return 0.25 * (1.0 + 0.5 * r**2 + tr_x / 4.0 + tr_xp / 4.0 + tr_yy / 8.0)


@dataclass
class GaussianMoment:
    formula: float
    numeric: float
    gap: float
    error: float


def perturbed_gaussian_moment(
    X: Any,
    X_p: Any,
    Y: Any,
    Y_p: Any,
    method: Literal["quadrature", "qmc"] = "quadrature",
    **kwargs: Any,
) -> GaussianMoment:
    """E|(W1, W2)| |(W3, W4)| for W ~ N(0, I + [[X, Y], [Y', X']]).

    Reports the second-order value (pi/2)(1 + tr X/4 + tr X'/4 + tr(Y'Y)/8),
    the numerical value and their gap.

    Raises
    ------
    DomainError
        If X, X' are not symmetric or Y' is not the transpose of Y.
    MatrixError
        If the assembled matrix is not positive definite.
    """
    X, X_p, Y, Y_p = (asarray(b, dtype=float64).reshape(2, 2) for b in (X, X_p, Y, Y_p))
    if npabs(X - X.T).max() > 1e-12 or npabs(X_p - X_p.T).max() > 1e-12:
        raise DomainError("X and X' must be symmetric")
    if npabs(Y_p - Y.T).max() > 1e-12:
        raise DomainError("Y' must be the transpose of Y")
    theta_hat = eye(4) + concatenate(
        [concatenate([X, Y], axis=1), concatenate([Y_p, X_p], axis=1)], axis=0
    )
    value, error = gaussian_norm_product(theta_hat, method=method, **kwargs)
    correction = X.trace() / 4.0 + X_p.trace() / 4.0 + (Y_p @ Y).trace() / 8.0
    formula = 0.5 * pi * (1.0 + correction)
    return GaussianMoment(
        formula=float(formula),
        numeric=float(value),
        gap=float(abs(value - formula)),
        error=float(error),
    )


def expansion_remainder_scale(mats: KacRiceMatrices) -> NDArrayFloat:
    """r^4 + |X|^2 + |X'|^2 + |Y|^4 + |Y'|^4 with Frobenius norms."""
    x2 = (mats.X**2).sum(axis=(-2, -1))
    xp2 = (mats.X_p**2).sum(axis=(-2, -1))
    y2 = (mats.Y**2).sum(axis=(-2, -1))
    yp2 = (mats.Y_p**2).sum(axis=(-2, -1))
    return mats.r**4 + x2 + xp2 + y2**2 + yp2**2


def _admissible_pairs(
    lattice: LatticeSet, n_pairs: int, seed: int, radius: float
) -> Tuple[CovarianceJet, NDArrayFloat, NDArrayFloat]:
    """Uniform point pairs with |r| <= radius and uniform unit normals."""
    rng = default_rng(seed)
    x, y = rng.random((n_pairs, 3)), rng.random((n_pairs, 3))
    keep = npabs(covariance_jet(lattice, x, y).r) <= radius
    x, y = x[keep], y[keep]
    normals = rng.standard_normal((2, len(x), 3))
    normals /= norm(normals, axis=-1)[..., None]
    return covariance_jet(lattice, x, y), normals[0], normals[1]


def identity_errors(
    lattice: LatticeSet, n_pairs: int = 1000, seed: int = 0
) -> Dict[str, float]:
    """Largest violations of the algebraic identities of the Kac-Rice matrices.

    Uses random point pairs with |r| <= 1/2 and random unit normals. Covers
    Q^2 (S Omega S^T) = I, Omega idempotent, Theta-hat symmetric and the
    frame invariance of tr X, tr X' and tr(Y'Y) between the default pivot
    and the axis of the second largest normal component. Also reports the
    smallest eigenvalue of Theta-hat.
    """
    jet, n, n_p = _admissible_pairs(lattice, n_pairs, seed, EXPANSION_RADIUS)
    mats = kacrice_matrices(jet, n, n_p)
    selection = Frame.pivot(n).selection()
    sos = einsum("pij,pjk,plk->pil", selection, mats.omega, selection)
    identity = einsum("pij,pjk,pkl->pil", mats.q, mats.q, sos)
    idempotent = einsum("pij,pjk->pik", mats.omega, mats.omega) - mats.omega
    theta = mats.theta_hat
    second = npabs(n).argsort(axis=-1)[:, 1]
    second_p = npabs(n_p).argsort(axis=-1)[:, 1]
    fixed = kacrice_matrices(
        jet,
        n,
        n_p,
        frame=Frame.with_axis(n, second),
        frame_p=Frame.with_axis(n_p, second_p),
    )
    invariance = max(
        float((npabs(a - b) / (1.0 + npabs(a))).max())
        for a, b in zip(mats.traces(), fixed.traces())
    )
    return {
        "n_pairs": len(jet.r),
        "square_root": float(npabs(identity - eye(2)).max()),
        "projection": float(npabs(idempotent).max()),
        "theta_symmetry": float(npabs(theta - theta.swapaxes(-1, -2)).max()),
        "frame_invariance": invariance,
        "theta_min_eigenvalue": float(eigvalsh(theta)[:, 0].min()),
    }


def expansion_errors(
    lattice: LatticeSet,
    n_pairs: int = 1000,
    seed: int = 0,
    radius: float = 0.3,
    constant: float = EXPANSION_CONSTANT,
) -> Dict[str, float]:
    """Gap between ``k2_exact`` and ``k2_expanded`` on random pairs with |r| <= radius.

    ``excess`` is the largest gap - constant * (r^4 + |X|^2 + |X'|^2 + |Y|^4 +
    |Y'|^4); it stays at the quadrature error when the remainder bound holds.
    """
    if not 0.0 < radius <= EXPANSION_RADIUS:
        msg = f"Expected 0 < radius <= {EXPANSION_RADIUS}, got {radius}"
        logging.error(msg)
        raise DomainError(msg)
    jet, n, n_p = _admissible_pairs(lattice, n_pairs, seed, radius)
    mats = kacrice_matrices(jet, n, n_p)
    exact, _ = k2_exact(mats, estimate_error=False)
    gap = npabs(exact - k2_expanded(mats))
    scale = expansion_remainder_scale(mats)
    return {
        "n_pairs": len(gap),
        "max_gap": float(gap.max()),
        "max_ratio": float((gap / scale).max()),
        "excess": float((gap - constant * scale).max()),
    }


def _linear_cdf(values: NDArrayFloat, t: float) -> NDArrayFloat:
    """P(f <= t) for f linear on a triangle, uniform position, sorted vertex values."""
    a, b, c = values[:, 0], values[:, 1], values[:, 2]
    d1 = (b - a) * (c - a)
    d2 = (c - a) * (c - b)
    lower = (t - a) ** 2 / where(d1 > 0.0, d1, 1.0)
    upper = 1.0 - (c - t) ** 2 / where(d2 > 0.0, d2, 1.0)
    return where(
        t <= a, 0.0, where(t >= c, 1.0, where(t <= b, lower, upper))
    )


def _field_at(
    wave: Union[WaveSample, FieldFunction], points: NDArrayFloat
) -> Tuple[NDArrayFloat, NDArrayFloat]:
    if isinstance(wave, WaveSample):
        return evaluate(wave, points)
    if callable(wave):
        value, gradient = wave(points)
        return asarray(value, dtype=float64), asarray(gradient, dtype=float64)
    raise TypeError(
        "Please provide a WaveSample or a callable returning (value, gradient)"
    )


def wavelength_resolution(m: int) -> float:
    """Largest mesh spacing accepted at energy m: ten vertices per wavelength."""
    return 1.0 / (10.0 * sqrt(m))


def smoothed_length(
    wave: Union[WaveSample, FieldFunction],
    surface: Surface,
    eps: float,
    h: Optional[float] = None,
    mesh: Optional[Mesh] = None,
    m: Optional[int] = None,
) -> float:
    """(1/2 eps) times the integral over {|F| <= eps} of |grad_Sigma F|.

    The band {|F| <= eps} of the piecewise linear interpolant of F is
    measured exactly per triangle, and weighted by the mean exact surface
    gradient at the triangle's vertices.

    Parameters
    ----------
    wave : WaveSample or callable
        The field; a callable maps points (n, 3) to (values, gradients).
    surface : Surface
    eps : float
        Band half-width.
    h : float, optional
        Mesh spacing, defaults to the wavelength resolution 1/(10 sqrt(m)).
    mesh : Mesh, optional
        A prebuilt triangulation of ``surface``.
    m : int, optional
        Energy for the resolution rule when ``wave`` is a callable.

    Raises
    ------
    ResolutionError
        If the mesh spacing exceeds 1/(10 sqrt(m)).
    """
    eps = validate_positive(eps, "eps")
    m = wave.m if isinstance(wave, WaveSample) else m
    if mesh is None:
        if h is None:
            h = wavelength_resolution(m) if m is not None else 0.01
        mesh = triangulate(surface, h)
    if m is not None and mesh.h > wavelength_resolution(m) * (1.0 + 1e-12):
        msg = (
            f"Mesh spacing {mesh.h} exceeds 1/(10 sqrt(m)) = "
            f"{wavelength_resolution(m):.4g}; refine the mesh"
        )
        logging.error(msg)
        raise ResolutionError(msg)

    value, gradient = _field_at(wave, mesh.vertices)
    tangent = gradient - (gradient * mesh.normals).sum(-1)[:, None] * mesh.normals
    grad_norm = norm(tangent, axis=-1)

    tri_values = npsort(value[mesh.triangles], axis=1)
    band = _linear_cdf(tri_values, eps) - _linear_cdf(tri_values, -eps)
    weight = grad_norm[mesh.triangles].mean(axis=1)
    return float((band * mesh.triangle_areas() * weight).sum() / (2.0 * eps))
