"""Tensor-network simulation of random quantum circuits."""

from .circuit import Circuit, generate_rqc, parse_circuit, serialize_circuit

__all__ = ["Circuit", "generate_rqc", "parse_circuit", "serialize_circuit"]
__version__ = "0.1.0"
