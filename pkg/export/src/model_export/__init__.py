"""Export glue: training checkpoints to pipeline model files, annotations to labels."""

__version__ = "0.1.0"
