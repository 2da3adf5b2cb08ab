"""Toolkit for discrete frequency-modulated entangling gates on trapped-ion chains.

Modules:
    chain        ion-chain equilibria, normal modes, Lamb-Dicke parameters
    pulse        FM pulse types, phase-space trajectories, geometric phase
    design       FM pulse optimizer
    dynamics     Schrodinger / Lindblad gate simulation
    budget       error-budget assembly, detuning scans, compensation maps
    calibration  simulated-hardware calibration pipeline and fidelity extraction
    coherence    Debye-Waller corrections and coherence-time fits
    beam         Gaussian addressing-beam crosstalk model
    config       run-configuration parsing
    cli          command-line entry points
"""

__version__ = "0.1.0"
