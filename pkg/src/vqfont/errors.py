"""Exception hierarchy.

Every error carries a stable ``code`` string so the command line can emit a
single machine-readable line on failure.
"""


class VQFontError(Exception):
    code = "ERROR"


class MissingGlyph(VQFontError, KeyError):
    code = "MISSING_GLYPH"


class UnreadableSource(VQFontError, OSError):
    code = "UNREADABLE_SOURCE"


class BadRatio(VQFontError, ValueError):
    code = "BAD_RATIO"


class EmptyReferencePool(VQFontError, ValueError):
    code = "EMPTY_REFERENCE_POOL"


class UnknownCharacter(VQFontError, KeyError):
    code = "UNKNOWN_CHARACTER"


class GridTooSmall(VQFontError, ValueError):
    code = "GRID_TOO_SMALL"


class ShapeMismatch(VQFontError, ValueError):
    code = "SHAPE_MISMATCH"


class DimensionMismatch(VQFontError, ValueError):
    code = "DIMENSION_MISMATCH"


class LayoutMismatch(VQFontError, ValueError):
    code = "LAYOUT_MISMATCH"


class EmptyReferences(VQFontError, ValueError):
    code = "EMPTY_REFERENCES"


class IndexOutOfRange(VQFontError, IndexError):
    code = "INDEX_OUT_OF_RANGE"


class DivergenceDetected(VQFontError, FloatingPointError):
    code = "DIVERGENCE_DETECTED"


class MissingCheckpoint(VQFontError, FileNotFoundError):
    code = "MISSING_CHECKPOINT"


class MissingGroundTruth(VQFontError, KeyError):
    code = "MISSING_GROUND_TRUTH"


class ExtractorUnavailable(VQFontError, RuntimeError):
    code = "EXTRACTOR_UNAVAILABLE"


class ConfigError(VQFontError, ValueError):
    code = "CONFIG_ERROR"

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class RunDirectoryLocked(VQFontError, RuntimeError):
    code = "RUN_DIR_LOCKED"


# KeyError.__str__ repr-quotes its argument; keep messages readable.
for _cls in (MissingGlyph, UnknownCharacter, MissingGroundTruth):
    _cls.__str__ = Exception.__str__
