import logging
from dataclasses import dataclass, field
from math import ceil
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from numpy import abs as npabs
from numpy import (
    arange,
    arccos,
    arctan2,
    asarray,
    broadcast_arrays,
    clip,
    concatenate,
    copysign,
    cos,
    cross,
    einsum,
    errstate,
    exp,
    eye,
    full,
    isfinite,
    linspace,
    meshgrid,
    ones,
    ones_like,
    pi,
    sin,
    sinc,
    sqrt,
    stack,
    where,
    zeros,
    zeros_like,
)
from numpy.linalg import inv, norm
from numpy.polynomial.polynomial import polyder, polyval2d

from ._typing import (
    NDArrayBool,
    NDArrayComplex,
    NDArrayFloat,
    NDArrayInt,
    PairFunction,
    PointFunction,
)
from .errors import (
    CapacityError,
    ConfigError,
    GeometryError,
    NumericError,
    RegularityError,
    ResolutionError,
)
from .lattice import project
from .utils import (
    converged,
    gauss_legendre,
    integrate_sphere,
    read_key_value_lines,
    validate_positive,
    validate_unit_vector,
    validate_vector,
)

CURVATURE_THRESHOLD = 1e-8
OSCILLATORY_NODE_CAP = 4_000_000

Jet = Tuple[NDArrayFloat, ...]
Vector3 = Tuple[float, float, float]
ChartMap = Callable[[NDArrayFloat, NDArrayFloat], Jet]
LineMap = Callable[
    [NDArrayFloat, NDArrayFloat], Tuple[NDArrayFloat, NDArrayFloat, NDArrayBool]
]


@dataclass
class SurfaceSpec:
    kind: str
    center: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    radius: float = 0.2
    pole: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    domain: Optional[Tuple[float, float, float, float]] = None
    coefficients: Optional[Tuple[Tuple[int, int, float], ...]] = None
    basis: Optional[Tuple[Vector3, Vector3]] = None
    semi_axes: Tuple[float, float, float] = (0.2, 0.15, 0.1)
    label: str = ""
    """
    Parameter bundle describing one constructible surface.

    Parameters
    ----------
    kind : str
        One of 'sphere', 'hemisphere', 'monge_graph', 'plane_patch',
        'ellipsoid_patch'.
    center : tuple
        Center (sphere, hemisphere, ellipsoid) or origin (Monge graph, plane).
    radius : float
        Sphere and hemisphere radius.
    pole : tuple
        Unit vector pointing to the pole of a hemisphere.
    domain : tuple, optional
        Parameter rectangle (u0, u1, v0, v1) of a single chart.
    coefficients : tuple, optional
        Polynomial table of h(u, v) as (i, j, c) meaning c * u^i * v^j.
    basis : tuple, optional
        Two spanning vectors of a plane patch.
    semi_axes : tuple
        Semi-axes of an ellipsoid patch.
    label : str
        Free text name, defaults to the compact form.
    """

    KINDS = ("sphere", "hemisphere", "monge_graph", "plane_patch", "ellipsoid_patch")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            msg = f"Unknown surface kind '{self.kind}', expected one of {self.KINDS}"
            logging.error(msg)
            raise ValueError(msg)
        if not self.label:
            self.label = self.kind

    @classmethod
    def from_string(cls, text: str) -> "SurfaceSpec":
        """Parse the compact command-line form ``kind:params``.

        Supported forms are ``sphere:rho``, ``hemisphere:rho``, ``plane:side``,
        ``monge:c`` for h = c (u^2 + v^2), ``saddle:c`` for h = c (u^2 - v^2)
        and ``ellipsoid:a,b,c``.
        """
        kind, _, params = text.strip().partition(":")
        try:
            values = [float(p) for p in params.split(",") if p.strip()]
        except ValueError:
            raise ValueError(f"Cannot parse surface parameters in '{text}'")
        label = text.strip()
        if kind in ("sphere", "hemisphere"):
            return cls(kind=kind, radius=values[0] if values else 0.2, label=label)
        if kind == "plane":
            side = values[0] if values else 0.3
            return cls(
                kind="plane_patch",
                domain=(-side / 2, side / 2, -side / 2, side / 2),
                label=label,
            )
        if kind in ("monge", "saddle"):
            c = values[0] if values else 0.5
            sgn = 1.0 if kind == "monge" else -1.0
            return cls(
                kind="monge_graph",
                coefficients=((2, 0, c), (0, 2, sgn * c)),
                label=label,
            )
        if kind == "ellipsoid":
            axes = tuple(values) if values else (0.2, 0.15, 0.1)
            if len(axes) != 3:
                raise ValueError(f"Expected three semi-axes in '{text}'")
            return cls(
                kind="ellipsoid_patch",
                semi_axes=axes,  # type: ignore[arg-type]
                label=label,
            )
        msg = f"Unknown compact surface form '{text}'"
        logging.error(msg)
        raise ValueError(msg)

    @classmethod
    def from_config(
        cls,
        values: Dict[str, str],
        source: str = "",
        lines: Optional[Dict[str, int]] = None,
    ) -> "SurfaceSpec":
        """Build a spec from flat key-value strings.

        Vectors are comma separated, the polynomial table and the plane basis
        are semicolon separated rows. Errors are prefixed with
        ``source:line:`` when the line of the offending key is known.
        """
        lines = lines or {}

        def anchor(key: str) -> str:
            if key in lines:
                return f"{source}:{lines[key]}: "
            return f"{source}: " if source else ""

        def vec(text: str) -> Tuple[float, ...]:
            return tuple(float(x) for x in text.split(","))

        def rows(text: str) -> Tuple[Tuple[float, ...], ...]:
            return tuple(vec(row) for row in text.split(";") if row.strip())

        def table(text: str) -> Tuple[Tuple[int, int, float], ...]:
            out = []
            for row in rows(text):
                if len(row) != 3:
                    raise ValueError(f"expected rows 'i, j, c', got {row}")
                out.append((int(row[0]), int(row[1]), row[2]))
            return tuple(out)

        converters: Dict[str, Callable[[str], Any]] = {
            "kind": str,
            "center": vec,
            "radius": float,
            "pole": vec,
            "domain": vec,
            "semi_axes": vec,
            "coefficients": table,
            "basis": rows,
            "label": str,
        }
        if "kind" not in values:
            raise ValueError(f"{anchor('kind')}Surface config needs a 'kind' entry")
        kwargs: Dict[str, Any] = {}
        for key, text in values.items():
            if key not in converters:
                raise ValueError(f"{anchor(key)}unknown key '{key}'")
            try:
                kwargs[key] = converters[key](text)
            except ValueError as e:
                raise ValueError(f"{anchor(key)}key '{key}': {e}") from e
        try:
            return cls(**kwargs)
        except ValueError as e:
            raise ValueError(f"{anchor('kind')}{e}") from e


def read_surface_config(path: Union[str, Path]) -> SurfaceSpec:
    """Read a surface spec from a key-value config file."""
    entries = read_key_value_lines(path)
    try:
        return SurfaceSpec.from_config(
            {key: value for key, (_, value) in entries.items()},
            source=str(path),
            lines={key: lineno for key, (lineno, _) in entries.items()},
        )
    except ValueError as e:
        msg = str(e)
        logging.error(msg)
        raise ConfigError(msg) from e


@dataclass
class SurfaceChart:
    """Parametrization (u, v) -> torus coordinates over a rectangle.

    ``jet`` returns position and the first and second partial derivatives
    (pos, d_u, d_v, d_uu, d_uv, d_vv), each with a trailing axis of length 3.
    ``intersect`` maps lines (points, directions) to the parameters (u, v) of
    their nearest crossing with the chart and a mask of the lines that cross.
    """

    jet: ChartMap = field(repr=False)
    domain: Tuple[float, float, float, float]
    name: str = ""
    intersect: Optional[LineMap] = field(default=None, repr=False)

    def evaluate(self, u: Any, v: Any) -> Jet:
        """The jet at parameters broadcast against each other."""
        u, v = broadcast_arrays(asarray(u, dtype=float), asarray(v, dtype=float))
        return self.jet(u, v)

    def position(self, u: Any, v: Any) -> NDArrayFloat:
        return self.evaluate(u, v)[0]

    def contains(self, u: NDArrayFloat, v: NDArrayFloat) -> NDArrayBool:
        u0, u1, v0, v1 = self.domain
        return (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)

    def frame(
        self, u: Any, v: Any
    ) -> Tuple[NDArrayFloat, NDArrayFloat, NDArrayFloat, NDArrayFloat]:
        """Position, unit normal, area element and Gauss–Kronecker curvature."""
        pos, du, dv, duu, duv, dvv = self.evaluate(u, v)
        nvec = cross(du, dv)
        jac = norm(nvec, axis=-1)
        normal = nvec / jac[..., None]
        big_e = (du * du).sum(-1)
        big_f = (du * dv).sum(-1)
        big_g = (dv * dv).sum(-1)
        e = (duu * normal).sum(-1)
        f = (duv * normal).sum(-1)
        g = (dvv * normal).sum(-1)
        curvature = (e * g - f**2) / (big_e * big_g - big_f**2)
        return pos, normal, jac, curvature

    def lengths(self, n_grid: int = 9) -> Tuple[float, float]:
        """Upper estimates of the physical extent along u and along v."""
        u0, u1, v0, v1 = self.domain
        uu, vv = meshgrid(linspace(u0, u1, n_grid), linspace(v0, v1, n_grid))
        _, du, dv, *_ = self.jet(uu, vv)
        length_u = float(norm(du, axis=-1).max()) * (u1 - u0)
        length_v = float(norm(dv, axis=-1).max()) * (v1 - v0)
        return length_u, length_v

    def tensor_nodes(
        self, n_u: int, n_v: int
    ) -> Tuple[NDArrayFloat, NDArrayFloat, NDArrayFloat, NDArrayFloat, NDArrayFloat]:
        u0, u1, v0, v1 = self.domain
        xu, wu = gauss_legendre(n_u, u0, u1)
        xv, wv = gauss_legendre(n_v, v0, v1)
        uu, vv = meshgrid(xu, xv, indexing="ij")
        pos, normal, jac, curvature = self.frame(uu, vv)
        weights = wu[:, None] * wv[None, :] * jac
        uv = stack([uu, vv], axis=-1)
        return (
            pos.reshape(-1, 3),
            normal.reshape(-1, 3),
            weights.ravel(),
            curvature.ravel(),
            uv.reshape(-1, 2),
        )


@dataclass
class SurfaceNodes:
    """Flattened tensor Gauss–Legendre nodes of all charts of a surface."""

    points: NDArrayFloat = field(repr=False)
    normals: NDArrayFloat = field(repr=False)
    weights: NDArrayFloat = field(repr=False)
    curvature: NDArrayFloat = field(repr=False)
    chart: NDArrayInt = field(repr=False)
    uv: NDArrayFloat = field(repr=False)
    order: int = 0

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class Surface:
    charts: List[SurfaceChart] = field(repr=False)
    label: str
    spec: Optional[SurfaceSpec] = field(default=None, repr=False)
    area: float = field(init=False)
    curvature_nonvanishing: bool = field(init=False)
    _node_cache: Dict[int, SurfaceNodes] = field(
        default_factory=dict, init=False, repr=False
    )
    """
    Compact regular surface inside one fundamental cell of the torus.

    Parameters
    ----------
    charts : list of SurfaceChart
        Charts with non-overlapping parameter rectangles.
    label : str
        Name used in reports.
    spec : SurfaceSpec, optional
        The `SurfaceSpec` the surface was built from.

    Attributes
    ----------
    area : float
        Surface area, from ``quadrature_single`` of one.
    curvature_nonvanishing : bool
        Whether min |K| over the quadrature nodes exceeds ``CURVATURE_THRESHOLD``.
    """

    def __post_init__(self) -> None:
        self.area = float(quadrature_single(self, lambda p, n: ones(len(p))))
        nodes = self.nodes(16)
        self.curvature_nonvanishing = bool(
            npabs(nodes.curvature).min() > CURVATURE_THRESHOLD
        )

    def nodes(self, order: int) -> SurfaceNodes:
        """Tensor Gauss–Legendre nodes with ``order`` points per chart direction."""
        order = int(order)
        if order not in self._node_cache:
            nodes = self.anisotropic_nodes([(order, order)] * len(self.charts))
            nodes.order = order
            self._node_cache[order] = nodes
        return self._node_cache[order]

    def anisotropic_nodes(self, orders: List[Tuple[int, int]]) -> SurfaceNodes:
        parts = [c.tensor_nodes(nu, nv) for c, (nu, nv) in zip(self.charts, orders)]
        return SurfaceNodes(
            points=concatenate([p[0] for p in parts]),
            normals=concatenate([p[1] for p in parts]),
            weights=concatenate([p[2] for p in parts]),
            curvature=concatenate([p[3] for p in parts]),
            chart=concatenate([full(len(p[2]), i) for i, p in enumerate(parts)]),
            uv=concatenate([p[4] for p in parts]),
        )

    @property
    def max_chart_length(self) -> float:
        return max(max(c.lengths()) for c in self.charts)

    def normal_graph(
        self, points: NDArrayFloat, directions: NDArrayFloat
    ) -> Tuple[NDArrayFloat, NDArrayFloat, NDArrayBool]:
        """Surface points hit by the lines ``points + s * directions``.

        On every line the root of smallest |s| on the underlying surface of
        each chart is taken, and kept when its parameters fall in that chart's
        domain. Earlier charts win on shared edges.

        Parameters
        ----------
        points, directions : NDArrayFloat
            Arrays of shape (n, 3).

        Returns
        -------
        position, normal : NDArrayFloat
            Hit points and their unit normals, arrays of shape (n, 3). Lines
            without a hit keep the input point and direction.
        inside : NDArray[bool_]
            Which lines hit the surface.
        """
        points = asarray(points, dtype=float)
        directions = asarray(directions, dtype=float)
        position = points.copy()
        normal = directions.copy()
        inside = zeros(len(points), dtype=bool)
        for chart in self.charts:
            if chart.intersect is None:
                msg = f"Chart '{chart.name}' has no line intersection"
                logging.error(msg)
                raise NotImplementedError(msg)
            u, v, found = chart.intersect(points, directions)
            with errstate(invalid="ignore"):
                hit = found & ~inside & chart.contains(u, v)
            if not hit.any():
                continue
            with errstate(invalid="ignore", divide="ignore"):
                pos, nrm, _, _ = chart.frame(u[hit], v[hit])
            ok = isfinite(nrm).all(-1)
            index = hit.nonzero()[0][ok]
            position[index] = pos[ok]
            normal[index] = nrm[ok]
            inside[index] = True
        return position, normal, inside


def _rotation_to(pole: NDArrayFloat) -> NDArrayFloat:
    """Orthogonal matrix mapping e_3 to ``pole``."""
    helper = eye(3)[0] if abs(pole[0]) < 0.9 else eye(3)[1]
    e1 = helper - (helper @ pole) * pole
    e1 /= norm(e1)
    e2 = cross(pole, e1)
    return stack([e1, e2, pole], axis=1)


def _ellipsoidal_jet(
    center: NDArrayFloat, scale: NDArrayFloat, rotation: NDArrayFloat
) -> ChartMap:
    """Spherical coordinates (phi, psi) on an ellipsoid with axes ``scale``."""

    def jet(phi: NDArrayFloat, psi: NDArrayFloat) -> Jet:
        sp, cp, ss, cs = sin(phi), cos(phi), sin(psi), cos(psi)
        zero = zeros_like(phi)
        local = (
            stack([sp * cs, sp * ss, cp], axis=-1),
            stack([cp * cs, cp * ss, -sp], axis=-1),
            stack([-sp * ss, sp * cs, zero], axis=-1),
            stack([-sp * cs, -sp * ss, -cp], axis=-1),
            stack([-cp * ss, cp * cs, zero], axis=-1),
            stack([-sp * cs, -sp * ss, zero], axis=-1),
        )
        out = [einsum("ij,...j->...i", rotation, scale * x) for x in local]
        out[0] = out[0] + center
        return tuple(out)

    return jet


def _monge_jet(origin: NDArrayFloat, coefficients: NDArrayFloat) -> ChartMap:
    c_u = polyder(coefficients, axis=0)
    c_v = polyder(coefficients, axis=1)
    c_uu = polyder(c_u, axis=0)
    c_uv = polyder(c_u, axis=1)
    c_vv = polyder(c_v, axis=1)

    def jet(u: NDArrayFloat, v: NDArrayFloat) -> Jet:
        zero = zeros_like(u)
        one = ones_like(u)
        pos = stack([u, v, polyval2d(u, v, coefficients) + zero], axis=-1) + origin
        return (
            pos,
            stack([one, zero, polyval2d(u, v, c_u) + zero], axis=-1),
            stack([zero, one, polyval2d(u, v, c_v) + zero], axis=-1),
            stack([zero, zero, polyval2d(u, v, c_uu) + zero], axis=-1),
            stack([zero, zero, polyval2d(u, v, c_uv) + zero], axis=-1),
            stack([zero, zero, polyval2d(u, v, c_vv) + zero], axis=-1),
        )

    return jet


def _plane_jet(origin: NDArrayFloat, b1: NDArrayFloat, b2: NDArrayFloat) -> ChartMap:
    def jet(u: NDArrayFloat, v: NDArrayFloat) -> Jet:
        zero = zeros(u.shape + (3,))
        pos = origin + u[..., None] * b1 + v[..., None] * b2
        return pos, zero + b1, zero + b2, zero, zero, zero

    return jet


def _ellipsoidal_line(
    center: NDArrayFloat, scale: NDArrayFloat, rotation: NDArrayFloat
) -> LineMap:
    def intersect(
        p: NDArrayFloat, d: NDArrayFloat
    ) -> Tuple[NDArrayFloat, NDArrayFloat, NDArrayBool]:
        z0 = einsum("ji,...j->...i", rotation, p - center) / scale
        w = einsum("ji,...j->...i", rotation, d) / scale
        a = (w * w).sum(-1)
        b = (z0 * w).sum(-1)
        c = (z0 * z0).sum(-1) - 1.0
        disc = b * b - a * c
        found = disc >= 0.0
        # roots of a s^2 + 2 b s + c without cancellation
        q = -(b + copysign(sqrt(where(found, disc, 0.0)), b))
        with errstate(invalid="ignore", divide="ignore"):
            s1 = q / a
            s2 = where(q != 0.0, c / where(q != 0.0, q, 1.0), 0.0)
        s = where(npabs(s1) < npabs(s2), s1, s2)
        z = z0 + s[..., None] * w
        phi = arccos(clip(z[..., 2], -1.0, 1.0))
        psi = arctan2(z[..., 1], z[..., 0]) % (2 * pi)
        return phi, psi, found

    return intersect


def _monge_line(
    origin: NDArrayFloat, coefficients: NDArrayFloat, max_iter: int = 30
) -> LineMap:
    c_u = polyder(coefficients, axis=0)
    c_v = polyder(coefficients, axis=1)

    def intersect(
        p: NDArrayFloat, d: NDArrayFloat
    ) -> Tuple[NDArrayFloat, NDArrayFloat, NDArrayBool]:
        q = p - origin
        s = zeros(q.shape[:-1])
        with errstate(invalid="ignore", divide="ignore", over="ignore"):
            for _ in range(max_iter):
                u = q[..., 0] + s * d[..., 0]
                v = q[..., 1] + s * d[..., 1]
                g = q[..., 2] + s * d[..., 2] - polyval2d(u, v, coefficients)
                dg = (
                    d[..., 2]
                    - polyval2d(u, v, c_u) * d[..., 0]
                    - polyval2d(u, v, c_v) * d[..., 1]
                )
                s = s - g / dg
                if not (npabs(g) > 1e-14).any():
                    break
            u = q[..., 0] + s * d[..., 0]
            v = q[..., 1] + s * d[..., 1]
            g = q[..., 2] + s * d[..., 2] - polyval2d(u, v, coefficients)
            found = isfinite(s) & (npabs(g) <= 1e-12)
        return u, v, found

    return intersect


def _plane_line(origin: NDArrayFloat, b1: NDArrayFloat, b2: NDArrayFloat) -> LineMap:
    normal = cross(b1, b2)
    inverse = inv(asarray([[b1 @ b1, b1 @ b2], [b1 @ b2, b2 @ b2]]))

    def intersect(
        p: NDArrayFloat, d: NDArrayFloat
    ) -> Tuple[NDArrayFloat, NDArrayFloat, NDArrayBool]:
        denom = d @ normal
        found = npabs(denom) > 1e-12 * norm(normal) * norm(d, axis=-1)
        s = ((origin - p) @ normal) / where(found, denom, 1.0)
        y = p + s[..., None] * d - origin
        u, v = einsum("ij,...j->i...", inverse, stack([y @ b1, y @ b2], axis=-1))
        return u, v, found

    return intersect


def _check_fit(chart: SurfaceChart, label: str, n_grid: int = 65) -> None:
    u0, u1, v0, v1 = chart.domain
    uu, vv = meshgrid(linspace(u0, u1, n_grid), linspace(v0, v1, n_grid))
    pos = chart.position(uu, vv)
    if (pos <= 0.0).any() or (pos >= 1.0).any():
        msg = f"Surface '{label}' leaves the open fundamental cell (0, 1)^3"
        logging.error(msg)
        raise GeometryError(msg)


def _check_regular(chart: SurfaceChart, label: str, n_grid: int = 7) -> None:
    u0, u1, v0, v1 = chart.domain
    if not (u1 > u0 and v1 > v0):
        msg = f"Surface '{label}' has an empty chart domain {chart.domain}"
        logging.error(msg)
        raise RegularityError(msg)
    s = (arange(n_grid) + 0.5) / n_grid
    uu, vv = meshgrid(u0 + (u1 - u0) * s, v0 + (v1 - v0) * s)
    _, du, dv, *_ = chart.jet(uu, vv)
    jac = norm(cross(du, dv), axis=-1)
    scale = max(float((norm(du, axis=-1) * norm(dv, axis=-1)).max()), 1e-300)
    if not (jac > 1e-12 * scale).all():
        msg = f"Surface '{label}' has a degenerate parametrization"
        logging.error(msg)
        raise RegularityError(msg)


def _build_charts(spec: SurfaceSpec) -> List[SurfaceChart]:
    center = validate_vector(spec.center, name="center")
    if spec.kind == "sphere":
        rho = validate_positive(spec.radius, "radius")
        jet = _ellipsoidal_jet(center, full(3, rho), eye(3))
        line = _ellipsoidal_line(center, full(3, rho), eye(3))
        cuts = (0.0, pi / 4, 3 * pi / 4, pi)
        return [
            SurfaceChart(
                jet, (cuts[i], cuts[i + 1], 0.0, 2 * pi), f"sphere[{i}]", line
            )
            for i in range(3)
        ]
    if spec.kind == "hemisphere":
        rho = validate_positive(spec.radius, "radius")
        pole = validate_unit_vector(spec.pole, name="pole")
        rotation = _rotation_to(pole)
        jet = _ellipsoidal_jet(center, full(3, rho), rotation)
        line = _ellipsoidal_line(center, full(3, rho), rotation)
        return [
            SurfaceChart(jet, (0.0, pi / 4, 0.0, 2 * pi), "hemisphere[cap]", line),
            SurfaceChart(jet, (pi / 4, pi / 2, 0.0, 2 * pi), "hemisphere[band]", line),
        ]
    if spec.kind == "ellipsoid_patch":
        axes = validate_vector(spec.semi_axes, name="semi_axes")
        domain = spec.domain or (pi / 6, 5 * pi / 6, 0.0, pi)
        jet = _ellipsoidal_jet(center, axes, eye(3))
        line = _ellipsoidal_line(center, axes, eye(3))
        bounds = tuple(domain)
        return [SurfaceChart(jet, bounds, "ellipsoid", line)]  # type: ignore[arg-type]
    if spec.kind == "monge_graph":
        table = spec.coefficients or ((2, 0, 0.5), (0, 2, 0.5))
        degree = max(max(int(i), int(j)) for i, j, _ in table)
        coefficients = zeros((degree + 1, degree + 1))
        for i, j, c in table:
            coefficients[int(i), int(j)] += float(c)
        domain = spec.domain or (-0.2, 0.2, -0.2, 0.2)
        jet = _monge_jet(center, coefficients)
        line = _monge_line(center, coefficients)
        bounds = tuple(domain)
        return [SurfaceChart(jet, bounds, "monge", line)]  # type: ignore[arg-type]
    # plane_patch
    basis = eye(3)[:2] if spec.basis is None else asarray(spec.basis, dtype=float)
    b1 = validate_vector(basis[0], name="basis")
    b2 = validate_vector(basis[1], name="basis")
    domain = spec.domain or (-0.15, 0.15, -0.15, 0.15)
    jet = _plane_jet(center, b1, b2)
    line = _plane_line(center, b1, b2)
    return [SurfaceChart(jet, tuple(domain), "plane", line)]  # type: ignore[arg-type]


def make_surface(spec: Union[SurfaceSpec, str]) -> Surface:
    """Construct a surface with analytic normals and curvature.

    Parameters
    ----------
    spec : SurfaceSpec or str
        The surface description, or its compact string form
        (see ``SurfaceSpec.from_string``).

    Returns
    -------
    Surface

    Raises
    ------
    GeometryError
        If the surface leaves the open fundamental cell.
    RegularityError
        If a chart has a vanishing area element.
    """
    if isinstance(spec, str):
        spec = SurfaceSpec.from_string(spec)
    elif not isinstance(spec, SurfaceSpec):
        raise TypeError("Please provide a SurfaceSpec or a compact surface string")

    charts = _build_charts(spec)
    for chart in charts:
        _check_regular(chart, spec.label)
        _check_fit(chart, spec.label)
    surface = Surface(charts=charts, label=spec.label, spec=spec)
    logging.info(
        f"Built surface '{surface.label}' with area {surface.area:.6g}, "
        f"curvature_nonvanishing={surface.curvature_nonvanishing}"
    )
    return surface


def surface_library() -> Dict[str, Surface]:
    """Reference surfaces used by the geometric checks."""
    specs = [
        "sphere:0.2",
        "hemisphere:0.2",
        "monge:0.5",
        "saddle:0.5",
        "plane:0.3",
        "ellipsoid:0.2,0.15,0.1",
    ]
    return {s: make_surface(s) for s in specs}


def _single_sum(nodes: SurfaceNodes, f: PointFunction) -> Any:
    values = asarray(f(nodes.points, nodes.normals))
    return einsum("i,i...->...", nodes.weights, values)


def quadrature_single(
    surface: Surface,
    f: PointFunction,
    tol: float = 1e-8,
    order: int = 8,
    max_order: int = 256,
) -> Any:
    """Integrate ``f(points, normals)`` over the surface.

    Tensor Gauss–Legendre rule per chart; the order is doubled until the
    relative change drops below ``tol``. ``f`` maps node arrays of shape
    (n, 3) to values with leading axis n; trailing axes are integrated
    componentwise.

    Raises
    ------
    NumericError
        If the rule does not converge up to ``max_order``, with the last two
        values attached.
    """
    old = new = _single_sum(surface.nodes(order), f)
    while order < max_order:
        order *= 2
        new = _single_sum(surface.nodes(order), f)
        if converged(new, old, tol):
            return new
        old = new
    msg = f"Surface quadrature did not converge up to order {max_order}"
    logging.error(msg)
    raise NumericError(msg, values=(old, new))


def pair_sum(
    nodes: SurfaceNodes,
    f: PairFunction,
    exclusion: Optional[float] = None,
    pair_chunk: int = 2**16,
) -> Any:
    """Weighted sum of ``f`` over all node pairs, in fixed row-chunk order.

    ``f(x, n, y, n_p)`` receives broadcastable arrays of shape (c, 1, 3) and
    (1, n, 3) and returns values with leading shape (c, n).
    """
    n = len(nodes)
    rows = max(1, pair_chunk // n)
    partial = []
    for start in range(0, n, rows):
        sl = slice(start, start + rows)
        x = nodes.points[sl, None, :]
        y = nodes.points[None, :, :]
        values = asarray(f(x, nodes.normals[sl, None, :], y, nodes.normals[None, :, :]))
        if exclusion is not None:
            keep = norm(x - y, axis=-1) >= exclusion
            values = values * keep.reshape(keep.shape + (1,) * (values.ndim - 2))
        partial.append(
            einsum("i,j,ij...->...", nodes.weights[sl], nodes.weights, values)
        )
    return sum(partial[1:], partial[0])


def quadrature_double(
    surface: Surface,
    f: PairFunction,
    exclusion: Optional[float] = None,
    tol: float = 1e-8,
    order: int = 8,
    max_order: int = 64,
    pair_chunk: int = 2**16,
) -> Any:
    """Integrate a point-pair function over the product surface.

    Tensor product of the single-surface rules. With ``exclusion`` the pairs
    with |x - y| < exclusion are removed; the indicator is not smooth, so the
    rule is then evaluated once at ``order`` without order doubling.

    Raises
    ------
    NumericError
        If the rule does not converge up to ``max_order``.
    """
    if exclusion is not None:
        validate_positive(exclusion, "exclusion")
        logging.info(f"Excluded double quadrature evaluated at fixed order {order}")
        return pair_sum(surface.nodes(order), f, exclusion, pair_chunk)

    old = new = pair_sum(surface.nodes(order), f, None, pair_chunk)
    while order < max_order:
        order *= 2
        new = pair_sum(surface.nodes(order), f, None, pair_chunk)
        if converged(new, old, tol):
            return new
        old = new
    msg = f"Double surface quadrature did not converge up to order {max_order}"
    logging.error(msg)
    raise NumericError(msg, values=(old, new))


def _normal_alignment(x, n, y, n_p):  # type: ignore[no-untyped-def]
    return (n * n_p).sum(axis=-1) ** 2


def integral_I(surface: Surface, tol: float = 1e-8) -> float:
    """The double integral of <n(x), n(y)>^2 over the product surface.

    Always between A^2/3 (spheres and hemispheres) and A^2 (planar surfaces).
    """
    value = float(quadrature_double(surface, _normal_alignment, tol=tol))
    lo = surface.area**2 / 3.0
    hi = surface.area**2
    slack = 10 * tol * hi
    if not lo - slack <= value <= hi + slack:
        msg = f"Integral I={value} outside [{lo}, {hi}] for '{surface.label}'"
        logging.error(msg)
        raise NumericError(msg)
    return value


def q_theta(surface: Surface, theta: Any, tol: float = 1e-10) -> Any:
    """Integral of <theta, n>^2 over the surface.

    ``theta`` is a unit vector or an array of unit vectors of shape (k, 3);
    the result has the matching shape.
    """
    theta = validate_unit_vector(theta, name="theta")
    thetas = theta.reshape(-1, 3)
    value = quadrature_single(surface, lambda p, n: (n @ thetas.T) ** 2, tol=tol)
    return float(value[0]) if theta.ndim == 1 else asarray(value)


@dataclass
class HReport:
    """Value of H for one lattice set and its equidistributed prediction."""

    value: float
    prediction: float
    residual: float
    integral_I: float


def integral_H(surface: Surface, lattice: Any, tol: float = 1e-10) -> HReport:
    """H = (1/N) sum over lattice directions of q(mu/|mu|)^2.

    Computed with one single integral per antipodal pair, q being even. The
    prediction (A^2 + 2I)/15 is the limit for equidistributed directions.
    """
    directions = project(lattice).directions[lattice.half_set]
    q = q_theta(surface, directions, tol=tol)
    value = float((asarray(q).reshape(-1) ** 2).mean())
    big_i = integral_I(surface)
    prediction = (surface.area**2 + 2.0 * big_i) / 15.0
    return HReport(
        value=value,
        prediction=prediction,
        residual=value - prediction,
        integral_I=big_i,
    )


def c_tau(
    surface: Surface,
    tau: Any = "uniform",
    tol: float = 1e-9,
    check_bounds: bool = True,
) -> float:
    """c(tau, surface), the tau-average of q(theta)^2.

    Parameters
    ----------
    surface : Surface
    tau : ProjectedSet or 'uniform'
        Atomic measure on lattice directions, or the normalized uniform
        measure on the sphere.
    tol : float
        Tolerance of the spherical quadrature and of the bound check.
    check_bounds : bool
        Verify A^2/9 <= c <= A^2/3, valid for reflection-symmetric tau.

    Raises
    ------
    NumericError
        If the bound check fails.
    """
    if isinstance(tau, str):
        if tau != "uniform":
            raise ValueError(f"Unknown measure '{tau}', expected 'uniform'")
        value, _ = integrate_sphere(
            lambda dirs: q_theta(surface, dirs) ** 2, tol=tol, order=4
        )
    else:
        directions = asarray(getattr(tau, "directions", tau), dtype=float)
        value = float((asarray(q_theta(surface, directions)).reshape(-1) ** 2).mean())

    if check_bounds:
        area2 = surface.area**2
        slack = 10 * tol * area2
        if not area2 / 9.0 - slack <= value <= area2 / 3.0 + slack:
            msg = f"c(tau)={value} violates [A^2/9, A^2/3] for '{surface.label}'"
            logging.error(msg)
            raise NumericError(msg)
    return float(value)


def oscillatory_integral(
    surface: Surface,
    xi: Any,
    points_per_unit: float = 20.0,
    min_order: int = 16,
    max_nodes: int = OSCILLATORY_NODE_CAP,
) -> complex:
    """The Fourier transform of surface measure at frequency ``xi``.

    Each chart direction gets ceil(points_per_unit * |xi| * length) Gauss
    nodes, so node spacing stays well below 1/(10 |xi|).

    Raises
    ------
    CapacityError
        If the resolving rule needs more than ``max_nodes`` nodes.
    """
    xi = validate_vector(xi, name="xi")
    k = float(norm(xi))
    orders = []
    for chart in surface.charts:
        length_u, length_v = chart.lengths()
        orders.append(
            (
                max(min_order, ceil(points_per_unit * k * length_u)),
                max(min_order, ceil(points_per_unit * k * length_v)),
            )
        )
    total = sum(nu * nv for nu, nv in orders)
    if total > max_nodes:
        msg = f"|xi|={k:.4g} needs {total} nodes, above the cap {max_nodes}"
        logging.error(msg)
        raise CapacityError(msg)

    value = 0j
    for chart, (nu, nv) in zip(surface.charts, orders):
        pos, _, weights, _, _ = chart.tensor_nodes(nu, nv)
        phase: NDArrayComplex = exp(2j * pi * (pos @ xi))
        value += complex(weights @ phase)
    return value


def sphere_fourier_transform(center: Any, radius: float, xi: Any) -> complex:
    """Closed form of the sphere's surface-measure transform."""
    xi = validate_vector(xi, name="xi")
    center = validate_vector(center, name="center")
    k = float(norm(xi))
    return complex(
        exp(2j * pi * (xi @ center)) * 4.0 * pi * radius**2 * sinc(2.0 * k * radius)
    )


@dataclass
class Mesh:
    vertices: NDArrayFloat = field(repr=False)
    triangles: NDArrayInt = field(repr=False)
    normals: NDArrayFloat = field(repr=False)
    chart: NDArrayInt = field(repr=False)
    uv: NDArrayFloat = field(repr=False)
    h: float
    surface: Optional[Surface] = field(default=None, repr=False)
    """
    Structured triangulation of a surface.

    Attributes
    ----------
    vertices : NDArrayFloat
        Exact chart images, shape (V, 3).
    triangles : NDArrayInt
        Vertex index triples, shape (T, 3); each triangle lies in one chart.
    normals : NDArrayFloat
        Analytic unit normals at the vertices.
    chart, uv : NDArray
        Chart provenance and parameters of each vertex.
    h : float
        Target edge length.
    """

    def triangle_areas(self) -> NDArrayFloat:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * norm(cross(b - a, c - a), axis=-1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def to_text(self) -> str:
        """Indexed triangle list: ``v x y z`` lines, then ``t i j k`` lines."""
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in self.vertices.tolist()]
        lines += [f"t {i} {j} {k}" for i, j, k in self.triangles.tolist()]
        return "\n".join(lines) + "\n"


def _limit_normals(
    chart: SurfaceChart, uu: NDArrayFloat, vv: NDArrayFloat, normal: NDArrayFloat
) -> NDArrayFloat:
    """Replace normals at degenerate parameters (poles) by their limit."""
    bad = ~isfinite(normal).all(axis=-1)
    if not bad.any():
        return normal
    u0, u1, v0, v1 = chart.domain
    nudge = 1e-7
    u = uu[bad] + nudge * ((u0 + u1) / 2.0 - uu[bad])
    v = vv[bad] + nudge * ((v0 + v1) / 2.0 - vv[bad])
    normal = normal.copy()
    normal[bad] = chart.frame(u, v)[1]
    return normal


def triangulate(surface: Surface, h: float) -> Mesh:
    """Structured triangulation of each chart rectangle mapped through the chart.

    Each chart direction is split in ceil(length / h) cells, every cell in two
    triangles.

    Raises
    ------
    ResolutionError
        If some chart would get fewer than 2 x 2 cells.
    """
    h = validate_positive(h, "h")
    vertices, normals, charts, uvs, triangles = [], [], [], [], []
    offset = 0
    for index, chart in enumerate(surface.charts):
        length_u, length_v = chart.lengths()
        n_u, n_v = ceil(length_u / h), ceil(length_v / h)
        if n_u < 2 or n_v < 2:
            msg = (
                f"h={h} gives {n_u} x {n_v} cells on chart '{chart.name}', "
                "at least 2 x 2 are needed"
            )
            logging.error(msg)
            raise ResolutionError(msg)
        u0, u1, v0, v1 = chart.domain
        uu, vv = meshgrid(
            linspace(u0, u1, n_u + 1), linspace(v0, v1, n_v + 1), indexing="ij"
        )
        with errstate(invalid="ignore", divide="ignore"):
            pos, normal, _, _ = chart.frame(uu, vv)
        normal = _limit_normals(chart, uu, vv, normal)
        vertices.append(pos.reshape(-1, 3))
        normals.append(normal.reshape(-1, 3))
        charts.append(full(uu.size, index))
        uvs.append(stack([uu, vv], axis=-1).reshape(-1, 2))

        ii, jj = meshgrid(arange(n_u), arange(n_v), indexing="ij")
        a = (ii * (n_v + 1) + jj).ravel() + offset
        b = a + (n_v + 1)
        triangles.append(stack([a, b, b + 1], axis=-1))
        triangles.append(stack([a, b + 1, a + 1], axis=-1))
        offset += uu.size

    return Mesh(
        vertices=concatenate(vertices),
        triangles=concatenate(triangles),
        normals=concatenate(normals),
        chart=concatenate(charts),
        uv=concatenate(uvs),
        h=h,
        surface=surface,
    )
