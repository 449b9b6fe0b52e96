import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, Tuple, Union

from numpy import abs as npabs
from numpy import (
    asarray,
    bool_,
    complexfloating,
    cos,
    exp,
    floating,
    integer,
    isfinite,
    linspace,
    meshgrid,
    ndarray,
    ones_like,
    pi,
    sin,
    sqrt,
    where,
    zeros_like,
)
from numpy import max as npmax
from numpy.linalg import norm
from scipy.special import roots_legendre

from ._typing import NDArrayFloat
from .errors import ConfigError, NumericError


def validate_vector(x: Any, dim: int = 3, name: str = "vector") -> NDArrayFloat:
    """Return ``x`` as a float array whose last axis has length ``dim``."""
    try:
        arr = asarray(x, dtype=float)
    except (TypeError, ValueError):
        raise TypeError(f"Please provide a numeric {dim}-vector for {name}")

    if arr.ndim == 0 or arr.shape[-1] != dim:
        msg = f"Expected {name} with last dimension {dim}, got shape {arr.shape}"
        logging.error(msg)
        raise ValueError(msg)
    if not isfinite(arr).all():
        msg = f"Non-finite entries found in {name}"
        logging.error(msg)
        raise ValueError(msg)
    return arr


def validate_unit_vector(
    x: Any, atol: float = 1e-8, name: str = "direction"
) -> NDArrayFloat:
    arr = validate_vector(x, name=name)
    if (abs(norm(arr, axis=-1) - 1.0) > atol).any():
        msg = f"Expected {name} of unit norm (tolerance {atol})"
        logging.error(msg)
        raise ValueError(msg)
    return arr


def validate_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0.0:
        msg = f"Expected {name} > 0, got {value}"
        logging.error(msg)
        raise ValueError(msg)
    return value


def converged(new: Any, old: Any, tol: float, floor: float = 1e-14) -> bool:
    """Relative stopping rule shared by all order-doubling quadratures.

    Works on scalars and arrays (max-norm).
    """
    change = float(npmax(npabs(asarray(new) - asarray(old))))
    scale = float(npmax(npabs(asarray(new))))
    return change <= tol * max(scale, floor)


@lru_cache(maxsize=64)
def _legendre(order: int) -> Tuple[NDArrayFloat, NDArrayFloat]:
    x, w = roots_legendre(order)
    return x, w


def gauss_legendre(order: int, a: float, b: float) -> Tuple[NDArrayFloat, NDArrayFloat]:
    """Gauss–Legendre nodes and weights of ``order`` points on [a, b]."""
    x, w = _legendre(int(order))
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def sphere_rule(order: int) -> Tuple[NDArrayFloat, NDArrayFloat]:
    """Product rule for the normalized uniform measure on the unit sphere.

    Gauss–Legendre with ``order`` nodes in cos(phi) times the trapezoid rule
    with ``2 * order`` nodes in the azimuth. Weights sum to one.
    """
    z, wz = gauss_legendre(order, -1.0, 1.0)
    psi = linspace(0.0, 2.0 * pi, 2 * order, endpoint=False)
    zz, pp = meshgrid(z, psi, indexing="ij")
    rho = sqrt(1.0 - zz**2)
    directions = asarray([rho * cos(pp), rho * sin(pp), zz]).reshape(3, -1).T
    weights = (wz[:, None] * ones_like(pp) / (4.0 * order)).ravel()
    return directions, weights


def integrate_sphere(
    g: Callable[[NDArrayFloat], Any],
    tol: float = 1e-9,
    order: int = 8,
    max_order: int = 512,
) -> Tuple[float, int]:
    """Average of ``g`` over the unit sphere by order doubling.

    Returns
    -------
    tuple
        The converged value and the order used.
    """
    directions, weights = sphere_rule(order)
    old = new = float(weights @ asarray(g(directions), dtype=float))
    while order < max_order:
        order *= 2
        directions, weights = sphere_rule(order)
        new = float(weights @ asarray(g(directions), dtype=float))
        if converged(new, old, tol):
            logging.info(f"Spherical quadrature converged at order {order}")
            return new, order
        old = new
    raise NumericError(
        f"Spherical quadrature did not converge up to order {max_order}",
        values=(old, new),
    )


def smooth_cutoff(x: Any) -> NDArrayFloat:
    """C-infinity cutoff: 1 for x <= 1/2, 0 for x >= 1."""
    x = asarray(x, dtype=float)
    t = (x - 0.5) * 2.0
    inside = (t > 0.0) & (t < 1.0)
    tt = where(inside, t, 0.5)
    a = exp(-1.0 / tt)
    b = exp(-1.0 / (1.0 - tt))
    step = where(inside, b / (a + b), zeros_like(t))
    return where(t <= 0.0, 1.0, where(t >= 1.0, 0.0, step))


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy scalars and arrays to JSON-native types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, bool_):
        return bool(obj)
    if isinstance(obj, integer):
        return int(obj)
    if isinstance(obj, floating):
        return float(obj)
    if isinstance(obj, (complex, complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, range):
        return [obj.start, obj.stop]
    return obj


def dumps_json(obj: Any) -> str:
    """Deterministic JSON text; floats keep round-trip precision."""
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True)


def read_key_value_lines(path: Union[str, Path]) -> Dict[str, Tuple[int, str]]:
    """Read a flat ``key = value`` file into key -> (line number, value).

    ``#`` starts a comment.
    """
    path = Path(path)
    values: Dict[str, Tuple[int, str]] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            msg = f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'"
            logging.error(msg)
            raise ConfigError(msg)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            msg = f"{path}:{lineno}: empty key"
            logging.error(msg)
            raise ConfigError(msg)
        if key in values:
            msg = f"{path}:{lineno}: duplicated key '{key}'"
            logging.error(msg)
            raise ConfigError(msg)
        values[key] = (lineno, value)
    return values


def read_key_value_file(path: Union[str, Path]) -> Dict[str, str]:
    """Read a flat ``key = value`` file. ``#`` starts a comment."""
    return {key: value for key, (_, value) in read_key_value_lines(path).items()}
