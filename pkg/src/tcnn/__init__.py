"""Timbre-oriented CNNs for music audio on a small numpy engine.

Modules: ``audio`` (log-mel frontend), ``nn`` (layers, SGD, gradient check),
``archzoo`` (architecture builders and parameter counts), ``model`` (networks),
``dataio`` (manifests, excerpts, feature cache), ``trainer`` (training loop and
checkpoints), ``metrics`` (accuracy, P/R/F1, AUC) and ``cli``.
"""
__version__ = "0.1.0"
