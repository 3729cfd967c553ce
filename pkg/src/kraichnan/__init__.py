"""Numerical laboratory for the Batchelor-regime Kraichnan passive scalar.

Modules
-------
covariance     isotropic structure function, gradient covariance, diffusion square root
exact_laws     mixing rate, Riesz potentials, radial kernel ODE, lognormal separation law
dispersion     Monte Carlo particle-pair separation and inverse moments
lyapunov       tangent-flow Monte Carlo for the top Lyapunov exponent
scalar         periodic spectral scalar solver and the mixing-identity experiment
stats          3-SE rule, KS tests, rate fits and the experiment report
verify         deterministic algebra and ODE residual suite
cli            JSON-configured command-line driver
"""
__version__ = "0.1.0"
