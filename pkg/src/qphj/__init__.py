"""Homogenization of 1D Hamilton-Jacobi equations with quasi-periodic potentials."""
