"""Flow-matching MIMO channel estimation with a numpy autodiff U-Net."""

__version__ = "0.1.0"
