"""Convex-integration constructions for the stochastic Navier-Stokes equations on T^3.

Modules
-------
field
    Spectral fields, operators, mollifiers and norms.
geometry
    The six directions and the geometric decomposition of symmetric matrices.
jets
    Intermittent jets.
noise
    Stochastic Stokes convolution, stopping times and restarts.
scheme
    Level-q to level-(q+1) steps for the prescribed-energy and prescribed-datum schemes.
ledger
    Inductive ledgers, energy processes and report files.
cli
    The ``wildns`` command.
"""

__version__ = "0.1.0"
