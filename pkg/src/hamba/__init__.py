"""Graph-guided state-space decoder for 3D hand reconstruction, built on a small numpy autodiff core."""

__version__ = "0.1.0"
