"""Missing-MRI-sequence synthesis: 2.5D pix2pix training, loss ablations and multi-axis fusion."""

SEQUENCES = ("t1c", "t1n", "t2f", "t2w")

__version__ = "0.1.0"
