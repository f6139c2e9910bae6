"""Exception types raised by the identification pipeline stages."""


class IdentificationError(RuntimeError):
    """Base class; carries optional diagnostics for post-mortem plotting."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoCyclicPeakError(IdentificationError):
    """Every subcarrier-count candidate failed the peak validation test."""


class AmbiguousPeakError(IdentificationError):
    """Guard-length score landscape too flat to pick a winner."""


class NoLongLagPeakError(IdentificationError):
    """No frame-period correlation peak (capture may hold a single frame)."""


class ClusteringError(IdentificationError):
    """Constellation clustering degenerated for every search grid point."""


class CoherenceError(IdentificationError):
    """Coherent stacking produced no phase-stable result."""


class StitchError(IdentificationError):
    """Sub-band differential segments cannot be merged."""


class SequenceAmbiguityError(IdentificationError):
    """Candidate search could not separate best from runner-up."""


class DetectionError(IdentificationError):
    """Correlation peak below the detection threshold."""
