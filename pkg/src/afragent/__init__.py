"""Desk-scale GUI agent: fused screen/text encoding, action decoding, evaluation tooling."""

__version__ = "0.1.0"
