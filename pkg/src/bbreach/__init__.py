"""Hamilton-Jacobi reachability for systems available only as black-box step functions."""

__version__ = "0.1.0"
