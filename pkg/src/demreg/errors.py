"""Domain error types raised by the library.

Every raiser picks the narrowest class that fits; the CLI maps any of
these to exit code 1 with a one-line diagnostic.
"""


class DemRegError(Exception):
    """Base class for all domain errors."""


# --- raster I/O -------------------------------------------------------------

class MissingHeaderField(DemRegError):
    """A required ESRI ASCII header key is absent."""


class CellCountMismatch(DemRegError):
    """Body token count does not equal nrows * ncols."""


class NonNumericCell(DemRegError):
    """A token that should be a number is not parseable as one."""


class FeatureOutOfBounds(DemRegError):
    """A synthetic feature center lies outside the grid."""


# --- segmentation / landmarks ----------------------------------------------

class AllNoData(DemRegError):
    """Operation needs at least one valid cell, none present."""


class WindowOutOfBounds(DemRegError):
    """A concentric analysis window does not fit inside the grid."""


class NoDataInWindow(DemRegError):
    """A concentric analysis window overlaps nodata cells."""


class InsufficientLandmarks(DemRegError):
    """No landmark class reached the required number of majors."""


class DegenerateRange(DemRegError):
    """Elevation range is empty; iso-levels cannot be placed."""


class GridTooSmall(DemRegError):
    """Grid dimensions are below the minimum an operation supports."""


# --- graph matching ---------------------------------------------------------

class ClassMismatch(DemRegError):
    """Graphs being matched carry different landmark classes."""


class SizeMismatch(DemRegError):
    """Graphs being matched have different padded node counts."""


class NoUsableClass(DemRegError):
    """No landmark class produced enough matched pairs."""


# --- registration -----------------------------------------------------------

class DegenerateConfiguration(DemRegError):
    """Point pairs do not determine a similarity transform."""


class RegistrationFailed(DemRegError):
    """No registration path (landmarks or contour fallback) succeeded."""


class DimsMismatch(DemRegError):
    """Two rasters that must share dimensions do not."""


# --- metrics ----------------------------------------------------------------

class ConstantInput(DemRegError):
    """A statistic is undefined because an input is constant."""


class EmptyMask(DemRegError):
    """A statistic was requested over zero cells."""
