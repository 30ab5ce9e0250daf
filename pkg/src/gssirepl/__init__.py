"""Asynchronous statement replication with read/write-set aware replay and routing."""

__version__ = "0.1.0"
