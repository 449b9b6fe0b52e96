import argparse
import datetime
import hashlib
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from numpy import pi, zeros

from ._version import __version__
from .errors import ConfigError, NumericError
from .kacrice import approx_variance, trace_integrals
from .lattice import enumerate as enumerate_lattice
from .lattice import LatticeSet, is_representable, lattice_summary
from .nodal import (
    concentration,
    mc_experiment,
    predict_mean,
    predict_variance,
)
from .randomwave import (
    EXPANSION_RADIUS,
    expansion_errors,
    identity_errors,
    perturbed_gaussian_moment,
    wavelength_resolution,
)
from .surface import (
    Surface,
    SurfaceSpec,
    c_tau,
    integral_H,
    integral_I,
    make_surface,
    read_surface_config,
)
from .utils import dumps_json, read_key_value_lines

SCHEMA = 1
COMMANDS = ("lattice", "surface", "predict", "simulate", "verify")
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
VERIFY_PAIRS = 1000  # random point pairs of the matrix and expansion checks
IDENTITY_ATOL = 1e-10
QUADRATURE_ATOL = 1e-7  # error of k2_exact allowed on top of the remainder bound


def _invalid(msg: str) -> None:
    logging.error(msg)
    raise ConfigError(msg)


def _field_problem(name: str, value: Any, command: Optional[str]) -> Optional[str]:
    """What is wrong with one configuration value, None when it is valid."""
    if name == "m_list":
        if not value or any(m < 0 for m in value):
            return f"Expected a non-empty list of m >= 0, got {list(value)}"
        if command in ("predict", "simulate"):
            bad = [m for m in value if not is_representable(m) or m == 0]
            if bad:
                return f"m={bad} not a sum of three squares"
    elif name in ("n_samples", "c0", "tol"):
        if not value > 0:
            return f"Expected {name} > 0, got {value}"
    elif name in ("h", "residual_rtol"):
        if value is not None and not value > 0:
            return f"Expected {name} > 0, got {value}"
    elif name == "surface" and not Path(value).is_file():
        try:
            SurfaceSpec.from_string(value)
        except ValueError as e:
            return str(e)
    return None


def load_surface(text: str) -> Surface:
    """Surface from its compact form or from a key-value surface file."""
    if Path(text).is_file():
        return make_surface(read_surface_config(text))
    return make_surface(text)


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    m_list: Tuple[int, ...] = (3,)
    surface: str = "sphere:0.2"
    n_samples: int = 200
    base_seed: int = 0
    h: Optional[float] = None
    c0: float = 0.1
    tol: float = 1e-8
    out: Optional[str] = None
    csv: bool = False
    workers: Optional[int] = 1
    residual_rtol: Optional[float] = None
    """
    Parameters of one command-line run.

    Parameters
    ----------
    command : str
        One of 'lattice', 'surface', 'predict', 'simulate', 'verify'.
    m_list : tuple of int
        Energies to process.
    surface : str
        Compact surface form, e.g. 'sphere:0.2' or 'monge:0.5', or the path
        of a key-value surface file.
    n_samples : int
        Monte Carlo replicas for 'simulate'.
    base_seed : int
        First replica seed.
    h : float, optional
        Mesh spacing, defaults to 1/(10 sqrt(m)).
    c0 : float
        Singular cell size constant for 'verify'.
    tol : float
        Tolerance of the surface quadratures and numeric checks.
    out : str, optional
        Output directory; the report goes to stdout when missing.
    csv : bool
        Also write per-replica lengths for 'simulate'.
    workers : int, optional
        Replica threads, None for all cores.
    residual_rtol : float, optional
        Bound on the relative residuals of the second-moment integrals
        checked by 'verify'; unchecked when missing.
    """

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            _invalid(f"Unknown command '{self.command}'")
        for f in fields(self):
            problem = _field_problem(f.name, getattr(self, f.name), self.command)
            if problem is not None:
                _invalid(problem)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """sha256 of the configuration, output location excluded."""
        values = self.to_dict()
        values.pop("out")
        return hashlib.sha256(dumps_json(values).encode()).hexdigest()


def _parse_m_list(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        msg = f"Expected a comma separated list of integers, got '{text}'"
        logging.error(msg)
        raise ConfigError(msg) from None


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"Expected a boolean, got '{text}'")


def _optional_int(text: str) -> Optional[int]:
    return None if text.lower() in ("none", "all") else int(text)


PARSERS: Dict[str, Callable[[str], Any]] = {
    "m_list": _parse_m_list,
    "surface": str,
    "n_samples": int,
    "base_seed": int,
    "h": float,
    "c0": float,
    "tol": float,
    "out": str,
    "csv": _parse_bool,
    "workers": _optional_int,
    "residual_rtol": float,
}
ALIASES = {"m": "m_list", "n": "n_samples", "seed": "base_seed"}


def read_config(path: Path, command: Optional[str] = None) -> Dict[str, Any]:
    """Parse a ``key = value`` experiment file into ExperimentConfig fields.

    Every error is anchored as ``path:line:``. A surface file named in the
    experiment file is looked up relative to it first.
    """
    values: Dict[str, Any] = {}
    for key, (lineno, text) in read_key_value_lines(path).items():
        name = ALIASES.get(key, key)
        if name not in PARSERS:
            _invalid(f"{path}:{lineno}: unknown key '{key}'")
        try:
            value = PARSERS[name](text)
        except ValueError as e:
            msg = f"{path}:{lineno}: key '{key}': {e}"
            logging.error(msg)
            raise ConfigError(msg) from e
        if name == "surface" and (path.parent / value).is_file():
            value = str(path.parent / value)
        problem = _field_problem(name, value, command)
        if problem is not None:
            _invalid(f"{path}:{lineno}: {problem}")
        values[name] = value
    return values


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the config file, then command-line flags."""
    values: Dict[str, Any] = {}
    if args.config is not None:
        values.update(read_config(Path(args.config), args.command))
    flags = {
        "m_list": _parse_m_list(args.m_list) if args.m_list else None,
        "surface": args.surface,
        "n_samples": args.n,
        "base_seed": args.seed,
        "h": args.h,
        "c0": args.c0,
        "tol": args.tol,
        "out": args.out,
        "csv": True if args.csv else None,
        "workers": args.workers,
        "residual_rtol": args.residual_rtol,
    }
    if args.m is not None:
        flags["m_list"] = (args.m,)
    values.update({k: v for k, v in flags.items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    return ExperimentConfig(
        command=args.command, **{k: v for k, v in values.items() if k in known}
    )


def _run_lattice(config: ExperimentConfig) -> Tuple[List[Dict[str, Any]], bool]:
    results = []
    for m in config.m_list:
        results.append(lattice_summary(enumerate_lattice(m), s_grid=[0.5, 0.75]))
    return results, True


def _run_surface(config: ExperimentConfig) -> Tuple[List[Dict[str, Any]], bool]:
    surface = load_surface(config.surface)
    big_i = integral_I(surface, tol=config.tol)
    result: Dict[str, Any] = {
        "surface": config.surface,
        "area": surface.area,
        "curvature_nonvanishing": surface.curvature_nonvanishing,
        "integral_I": big_i,
        "I_over_A2": big_i / surface.area**2,
        "c_tau_uniform": c_tau(surface, "uniform"),
        "H": {},
    }
    for m in config.m_list:
        lattice = enumerate_lattice(m)
        if lattice.n_points:
            result["H"][str(m)] = integral_H(surface, lattice).__dict__
    return [result], True


def _predict(m: int, surface: Surface, tol: float) -> Dict[str, Any]:
    lattice = enumerate_lattice(m)
    variance = predict_variance(m, lattice, surface, tol=tol)
    return {
        "m": m,
        "n_points": lattice.n_points,
        "mean": predict_mean(m, surface),
        "variance": variance.to_dict(),
    }


def _run_predict(config: ExperimentConfig) -> Tuple[List[Dict[str, Any]], bool]:
    surface = load_surface(config.surface)
    return [_predict(m, surface, config.tol) for m in config.m_list], True


def _z_score(value: float, expected: float, error: float) -> float:
    return (value - expected) / error if error > 0.0 else 0.0


def _run_simulate(config: ExperimentConfig) -> Tuple[List[Dict[str, Any]], bool]:
    surface = load_surface(config.surface)
    results = []
    for m in config.m_list:
        lattice = enumerate_lattice(m)
        stats = mc_experiment(
            m,
            surface,
            config.n_samples,
            base_seed=config.base_seed,
            h=config.h,
            lattice=lattice,
            workers=config.workers,
        )
        expected = predict_mean(m, surface)
        fraction, bound = concentration(stats, expected)
        result = {
            "m": m,
            "n_points": lattice.n_points,
            "stats": stats.to_dict(),
            "ks_pvalue": stats.ks_test(),
            "prediction": _predict(m, surface, config.tol),
            "mean_z_score": _z_score(stats.mean, expected, stats.std_error_mean),
            "concentration": {"fraction": fraction, "chebyshev_bound": bound},
        }
        if config.csv and config.out is not None:
            path = Path(config.out) / f"simulate_m{m}.csv"
            stats.to_csv(path)
            result["csv"] = path.name
        results.append(result)
    return results, True


def _matrix_checks(lattice: LatticeSet, seed: int) -> Dict[str, Any]:
    identities = identity_errors(lattice, n_pairs=VERIFY_PAIRS, seed=seed)
    expansion = expansion_errors(
        lattice, n_pairs=VERIFY_PAIRS, seed=seed, radius=EXPANSION_RADIUS
    )
    checks = {
        "square_root_identity": identities["square_root"] <= IDENTITY_ATOL,
        "projection_idempotent": identities["projection"] <= IDENTITY_ATOL,
        "theta_positive_definite": identities["theta_symmetry"] <= IDENTITY_ATOL
        and identities["theta_min_eigenvalue"] > 0.0,
        "frame_invariance": identities["frame_invariance"] <= IDENTITY_ATOL,
        "expansion_remainder": expansion["excess"] <= QUADRATURE_ATOL,
    }
    return {"identities": identities, "expansion": expansion, "checks": checks}


def _run_verify(config: ExperimentConfig) -> Tuple[List[Dict[str, Any]], bool]:
    surface = load_surface(config.surface)
    identity = perturbed_gaussian_moment(
        zeros((2, 2)), zeros((2, 2)), zeros((2, 2)), zeros((2, 2))
    )
    passed = identity.gap <= 1e-6
    results: List[Dict[str, Any]] = [
        {
            "check": "gaussian_moment_identity",
            "numeric": identity.numeric,
            "expected": 0.5 * pi,
            "passed": passed,
        }
    ]
    for m in config.m_list:
        lattice = enumerate_lattice(m)
        report = trace_integrals(lattice, surface, c0=config.c0)
        approx = approx_variance(lattice, surface, report=report)
        variance_scale = pi**2 / 30.0 * surface.area**2 * m / lattice.n_points
        matrices = _matrix_checks(lattice, config.base_seed)
        relative = report.relative_residuals()
        checks = {
            "x_diagonal_nonpositive": report.max_x_diagonal <= 1e-12,
            "r2_nonnegative": report.R2 >= 0.0,
            "r4_nonnegative": report.R4 is not None and report.R4 >= 0.0,
            "approx_variance_nonnegative": approx >= -0.05 * variance_scale,
            **matrices.pop("checks"),
        }
        if config.residual_rtol is not None:
            checks["residuals_within_rtol"] = all(
                abs(v) <= config.residual_rtol for v in relative.values()
            )
        passed = passed and all(checks.values())
        result = {
            "m": m,
            "report": report.to_dict(),
            "approx_variance": approx,
            "k1_squared": pi**2 * m / 3.0,
            **matrices,
            "checks": checks,
        }
        if surface.curvature_nonvanishing:
            leading = predict_variance(m, lattice, surface, tol=config.tol).leading
            result["leading_variance"] = leading
            result["relative_gap"] = (approx - leading) / leading if leading else None
        results.append(result)
    return results, passed


RUNNERS = {
    "lattice": _run_lattice,
    "surface": _run_surface,
    "predict": _run_predict,
    "simulate": _run_simulate,
    "verify": _run_verify,
}


def run(config: ExperimentConfig) -> Tuple[int, Dict[str, Any]]:
    """Dispatch one command and write its JSON report.

    Returns
    -------
    tuple
        Exit status (0 success, 3 failed verification) and the report.
    """
    if config.out is not None:
        Path(config.out).mkdir(parents=True, exist_ok=True)
    results, passed = RUNNERS[config.command](config)
    report = {
        "schema": SCHEMA,
        "command": config.command,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seeds": [config.base_seed, config.base_seed + config.n_samples]
        if config.command == "simulate"
        else None,
        "tolerances": {
            "tol": config.tol,
            "c0": config.c0,
            "h": config.h,
            "h_default": {
                str(m): wavelength_resolution(m) for m in config.m_list if m > 0
            },
        },
        "passed": passed,
        "results": results,
        "metadata": {
            "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "version": __version__,
        },
    }
    text = dumps_json(report)
    if config.out is not None:
        (Path(config.out) / f"{config.command}.json").write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")
    return (EXIT_OK if passed else EXIT_NUMERIC), report


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--m", type=int, help="energy m = |mu|^2")
    common.add_argument("--m-list", dest="m_list", help="comma separated energies")
    common.add_argument(
        "--surface", help="compact surface form, e.g. sphere:0.2, or a surface file"
    )
    common.add_argument("--n", type=int, help="Monte Carlo replicas")
    common.add_argument("--seed", type=int, help="first replica seed")
    common.add_argument("--h", type=float, help="mesh spacing")
    common.add_argument("--c0", type=float, help="singular cell size constant")
    common.add_argument("--tol", type=float, help="quadrature tolerance")
    common.add_argument("--out", help="output directory")
    common.add_argument("--csv", action="store_true", help="write replica lengths")
    common.add_argument("--workers", type=_optional_int, help="replica threads")
    common.add_argument(
        "--residual-rtol",
        dest="residual_rtol",
        type=float,
        help="relative residual bound of the second-moment integrals",
    )
    common.add_argument("--config", help="key = value experiment file")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(
        prog="arwaves",
        description="Nodal intersections of arithmetic random waves with surfaces.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "lattice": "lattice point diagnostics",
        "surface": "surface integrals",
        "predict": "mean and variance predictions",
        "simulate": "Monte Carlo nodal lengths",
        "verify": "moment integral and Kac-Rice checks",
    }
    for command in COMMANDS:
        sub.add_parser(command, parents=[common], help=helps[command])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = build_config(args)
        status, _ = run(config)
    except NumericError as e:
        sys.stderr.write(f"arwaves: numeric error: {e}\n")
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        sys.stderr.write(f"arwaves: {e}\n")
        return EXIT_INVALID
    return status
