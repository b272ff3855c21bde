"""Single-source federated domain generalization with global consistent augmentation."""

__version__ = "0.1.0"
