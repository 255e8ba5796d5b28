"""Synthetic dialog data, training loop, sweeps, plot data and the ``gma`` CLI."""
