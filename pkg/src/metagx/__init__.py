"""Meta-learning pipeline for binary classification of gene-expression profiles.

The package is organized bottom-up:

- ``autodiff``: reverse-mode tape over numpy float64 arrays
- ``data``: expression/interaction file formats, gene selection, scaling, folds
- ``models``: MLP / CNN / attention classifiers plus checkpoints
- ``training``: episodic meta-training and the plain / transfer baselines
- ``evaluate``: classification metrics, cross-validation, mixing-weight sweep
- ``explain``: Shapley feature attribution
- ``synth``: generator for related synthetic classification task families
- ``cli``: the ``metagx`` command-line entry point
"""

__version__ = "0.1.0"
