"""Multiplicative volatility cascades across time scales.

Wavelet-based volatility proxies, WTMM multifractal analysis, the cascade
SDE and its Monte Carlo simulation, Kramers-Moyal estimation of its
coefficients and Fokker-Planck evolution of the volatility pdf.
"""

from .cascade import (Ensemble, ModelParams, analytic_moment, check_constraints,
                      multiplier_stats, simulate_discrete_cascade, simulate_sde)
from .fpsolve import FokkerPlanckSolver, FPCoefficients, PdfGrid, build_initial_pdf, solve
from .ingest import SeriesPath, synthesize_cascade_path
from .kmest import KramersMoyalEstimator, estimate_km
from .wavelet import AnalyzingWavelet, CWTTransformer, ScaleGrid, WaveletField, cwt
from .wtmm import WTMMEstimator

__all__ = [
    "AnalyzingWavelet", "CWTTransformer", "Ensemble", "FPCoefficients", "FokkerPlanckSolver",
    "KramersMoyalEstimator", "ModelParams", "PdfGrid", "ScaleGrid", "SeriesPath",
    "WTMMEstimator", "WaveletField", "analytic_moment", "build_initial_pdf", "check_constraints",
    "cwt", "estimate_km", "multiplier_stats", "simulate_discrete_cascade", "simulate_sde",
    "solve", "synthesize_cascade_path",
]
