"""Two-stage face super-resolution: a flow-field degradation network that
manufactures realistic low-resolution images, and a self-conditioned
progressive SR network, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
