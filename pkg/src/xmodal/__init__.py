"""Distance-preserving adversarial translation from embedding vectors to
raw audio waveforms, with a learned audio metric and evaluation suite."""

__version__ = "0.1.0"
