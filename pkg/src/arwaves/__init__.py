# flake8: noqa
from . import cli, kacrice, lattice, nodal, randomwave, stats, surface, utils
from ._version import __version__, show_versions
from .kacrice import (
    approx_variance,
    exact_second_moment,
    moment_Rk,
    singular_partition,
    trace_integrals,
)
from .lattice import LatticeSet, enumerate
from .nodal import extract_nodal_curve, mc_experiment, predict_mean, predict_variance
from .randomwave import k2_exact, k2_expanded, kacrice_matrices, sample
from .surface import Surface, integral_I, make_surface, triangulate
