"""Gaussian-primitive slice-to-volume reconstruction."""
