"""Exception hierarchy shared across the package.

Every error raised on a contract violation derives from :class:`SargcpError`
so callers (notably the CLI) can map failure classes to exit codes without
inspecting messages.
"""

from __future__ import annotations


class SargcpError(Exception):
    """Base class for all package errors."""


class ParseError(SargcpError):
    """A file could not be decoded into a value.

    Parsers are total: whatever the input bytes, they either return a value
    or raise this with a location. `line` is 1-based for text formats,
    `offset` is a byte offset for binary formats.
    """

    def __init__(self, message: str, path: str | None = None,
                 line: int | None = None, offset: int | None = None):
        self.path = path
        self.line = line
        self.offset = offset
        where = path or "<data>"
        if line is not None:
            where += f":{line}"
        if offset is not None:
            where += f" (byte {offset})"
        super().__init__(f"{where}: {message}")


class ValidationError(SargcpError):
    """A domain value violated one of its invariants."""


class GeometryError(SargcpError):
    """Base for viewing-geometry failures."""


class OrbitValidityError(GeometryError):
    """An orbit polynomial was evaluated outside its validity interval."""


class ConvergenceError(GeometryError):
    """An iterative solver stagnated or ran out of iterations."""


class NoIntersectionError(GeometryError):
    """A range sphere does not intersect the requested height surface."""


class DegenerateGeometryError(GeometryError):
    """The observation geometry does not determine a 3-D point."""


class UnsolvableError(GeometryError):
    """Fewer than two usable geometries remain; no solution is attempted."""


class PeakError(SargcpError):
    """Base for point-target peak analysis failures."""


class PeakOnBorderError(PeakError):
    """The oversampled maximum sits on the grid border; no 3x3 fit exists."""


class FlatPeakError(PeakError):
    """The 3x3 neighborhood has no concave vertex (constant or degenerate chip)."""


class RegistrationError(SargcpError):
    """Point-cloud registration found no significant correlation peak."""


class EmptyResultError(SargcpError):
    """A pipeline stage that must produce output produced none."""
