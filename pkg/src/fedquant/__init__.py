"""fedquant: quantized federated-learning simulation and parameter optimization."""

__version__ = "0.1.0"
