"""Limit interface: extraction, multiplicity, Jacobi spectra and verdicts."""

from .jacobi import (JacobiOperator, MultiplicityEstimate, RayleighTransfer, ShrinkingBallTable,
                     SpectralVerdict, SurfaceProjector, cutoff, estimate_multiplicity, jacobi_index,
                     jacobi_operator, jacobi_spectrum, rayleigh_quotient_bulk, rayleigh_transfer_check,
                     shrinking_ball_spectrum, spectral_verdict, transfer_test_function)
from .mesh import (SurfaceComponent, SurfaceMesh, circle, curve_from_samples, extract_level_set,
                   min_face_angle, straight_line)

__all__ = [
    "JacobiOperator", "MultiplicityEstimate", "RayleighTransfer", "ShrinkingBallTable",
    "SpectralVerdict", "SurfaceComponent", "SurfaceMesh", "SurfaceProjector", "circle", "cutoff",
    "curve_from_samples", "estimate_multiplicity", "extract_level_set", "jacobi_index",
    "jacobi_operator", "jacobi_spectrum", "min_face_angle", "rayleigh_quotient_bulk",
    "rayleigh_transfer_check", "shrinking_ball_spectrum", "spectral_verdict", "straight_line",
    "transfer_test_function",
]
