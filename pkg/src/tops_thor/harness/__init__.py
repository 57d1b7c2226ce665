"""Data loading, evaluation, sweeps and the command-line front end."""
