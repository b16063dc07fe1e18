"""Self-explaining ICU mortality prediction with organ-failure concepts.

Modules: ``autodiff`` (reverse-mode gradients), ``layers`` (dense, LSTM,
dropout, checkpoints), ``imputer``, ``model`` (concept model and baseline),
``cohort`` (synthetic stays, SOFA labels, scaling), ``trainer``, ``metrics``
and ``cli``.
"""

__version__ = "0.1.0"
