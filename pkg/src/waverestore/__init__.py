"""Desk-scale universal speech restoration.

A frozen conformer encoder extracts robust features, lightweight parallel
adapters map degraded features onto clean ones, and an iterative vocoder
resynthesizes a waveform from the cleaned features. A degradation simulator
manufactures paired training data, and batch inference / benchmark / metric
engines close the loop.
"""

from waverestore.audio import SAMPLE_RATE, StftConfig, Waveform, read_wav, write_wav

__all__ = ["SAMPLE_RATE", "StftConfig", "Waveform", "read_wav", "write_wav"]
__version__ = "0.1.0"
