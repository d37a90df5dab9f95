"""Memory AMP and GVAMP for generalized linear models y = Clip(Ax) + n."""

__version__ = "0.1.0"
