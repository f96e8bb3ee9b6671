"""Shared error base classes.

DataError covers everything caused by bad input (domains, files, configs,
datasets); the CLI maps it to exit code 2.  Anything else that escapes is an
internal error (exit code 3).
"""

from __future__ import annotations


class DataError(Exception):
    """Input data or configuration is invalid."""


class UsageError(Exception):
    """Command line invocation is malformed; maps to exit code 1."""
