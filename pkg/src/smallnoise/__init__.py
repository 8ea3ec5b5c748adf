"""Gaussian approximations of small-noise diffusions and their KL accuracy."""
