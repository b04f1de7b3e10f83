"""Self-supervised audio embeddings via temporal-proximity triplet training.

The package is organised as a pipeline:

- ``corpus``: WAV ingest, labeled manifests, and a deterministic synthetic
  speech-like corpus generator.
- ``frontend``: log-mel spectrogram extraction and fixed-size context windows.
- ``autodiff``: a minimal reverse-mode automatic-differentiation engine.
- ``encoder``: a small residual convolutional embedding model with
  intermediate-layer taps and a binary checkpoint format.
- ``triplet``: window sampling, semi-hard triplet mining, the triplet loss,
  and the SGD training loop.
- ``probes``: frozen-representation evaluation with shallow classifiers.
- ``adapt``: distillation into smaller students and task fine-tuning.
- ``report``: cross-task accuracy regression and the command-line interface.
"""

__version__ = "0.1.0"
