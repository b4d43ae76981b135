"""Loop-soup Monte Carlo for determinants of twisted Laplacians on flat tori."""

__version__ = "0.1.0"
