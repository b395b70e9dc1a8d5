"""Exception family shared across the toolkit.

Every error that should map to a distinct CLI exit code lives here so the
command layer can translate without importing half the package.
"""

from __future__ import annotations


class PrivinfError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PrivinfError):
    """Invalid or inconsistent parameters (ring width, scale budget, shapes)."""


class HandshakeError(PrivinfError):
    """The two endpoints disagree on protocol version or parameters."""


class DesyncError(PrivinfError):
    """A frame arrived with an unexpected tag or size: the parties diverged."""


class BundleExhausted(PrivinfError):
    """A party asked for more correlated randomness than the dealer provided."""


class BundleIntegrityError(PrivinfError):
    """A bundle file failed its checksum or structural validation."""


class VerificationError(PrivinfError):
    """A self-check (oracle comparison, transcript replay) did not pass."""
