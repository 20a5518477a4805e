"""Population PK/PD modelling with SAEM estimation and quantum-inspired proposal engines."""

__version__ = "0.1.0"
