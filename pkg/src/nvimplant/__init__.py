"""Seeded Monte Carlo model of deterministic single-ion NV implantation.

Stages: count-controlled trap loading, extraction and time of flight,
focusing, implantation, NV activation, and fitting of the resulting
characterization signals.
"""

from .core import CA40, N14_2, N15_2, N15N14, REGISTRY, IonSpecies, RngStream, SimConfig, derive_stream, species_mass_kg

__version__ = "0.1.0"

__all__ = ["CA40", "N14_2", "N15_2", "N15N14", "REGISTRY", "IonSpecies", "RngStream", "SimConfig",
           "derive_stream", "species_mass_kg"]
