"""Reconstruction of dielectric permittivity and conductivity from
time-domain backscattered electric-field traces.

Subpackages follow the processing pipeline: geometry (:mod:`wcip.mesh`),
time stepping (:mod:`wcip.solver`), misfit and gradients
(:mod:`wcip.objective`), optimization loops (:mod:`wcip.inversion`),
synthetic data (:mod:`wcip.datagen`), and the command-line front end
(:mod:`wcip.cli`).
"""

__version__ = "0.1.0"
