"""Small-transformer testbed for in-context vs in-weight learning."""

__version__ = "0.1.0"
