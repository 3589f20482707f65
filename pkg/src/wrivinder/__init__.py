"""Zero-shot alignment of a ground-level reconstruction to a geo-registered satellite tile."""

__version__ = "0.1.0"

SCHEMA_VERSION = 1
