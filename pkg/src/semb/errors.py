"""Exception types shared across the package.

The CLI maps these to stable exit codes: any :class:`SembError` other than
divergence exits with code 2 (input / contract error), divergence exits
with code 3.
"""


class SembError(Exception):
    """Base class for all errors raised by this package."""


class MeshParseError(SembError):
    """A mesh file could not be parsed (malformed line, non-triangle face)."""


class TopologyError(SembError):
    """Mesh violates the required topology (disconnected, non-manifold edge)."""


class ConfigError(SembError):
    """A configuration document violates the schema."""


class DivergenceError(SembError):
    """Training aborted because the total loss exceeded the divergence guard.

    Carries the partial training report collected up to the aborting step.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
