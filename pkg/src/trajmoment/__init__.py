"""Language-conditioned sub-task localization in robot trajectories."""

__version__ = "0.1.0"
