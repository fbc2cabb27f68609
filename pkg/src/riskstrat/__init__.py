"""Risk-stratified treatment-effect estimation for observational cohorts."""

__version__ = "0.1.0"
