"""depthcl: continual-learning benchmark harness for unsupervised depth completion."""

__version__ = "0.1.0"
