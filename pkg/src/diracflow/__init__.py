"""Spectral simulator for the Dirac-harmonic map heat flow on the flat spin 2-torus."""

from . import cli, dirac_map, errors, flow, target, torus_spin
from .torus_spin import CLIFFORD, SpinTorusGrid, make_grid
from .target import CliffordTorus, ConstantsLedger, Sphere, get_target

__version__ = "0.1.0"
