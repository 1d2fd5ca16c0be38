"""Side-by-side true Bayes filter, mean-field EnKF and finite-particle EnKF."""

__version__ = "0.1.0"
