"""Toy-scale VITS-style TTS with a mixture-of-experts duration predictor and an ISTFT-head vocoder."""

__version__ = "0.1.0"
