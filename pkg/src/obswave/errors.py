"""Exception types shared across the laboratory."""


class ObsWaveError(Exception):
    """Base class for all obswave errors."""


class NonPositiveWeight(ObsWaveError):
    """Weight function is not strictly positive on the closed domain."""


class DegenerateMetric(ObsWaveError):
    """Metric violates the uniform ellipticity floor."""


class EmptyGamma0(ObsWaveError):
    """No boundary node passes the outgoing-flux sign test."""


class InvalidParameters(ObsWaveError):
    """Carleman parameters out of their admissible range."""


class CflViolation(ObsWaveError):
    """Explicit stepping refused: CFL number exceeds 1."""


class NonFiniteState(ObsWaveError):
    """A nodal value became inf/nan during time stepping."""


class DegenerateEnsemble(ObsWaveError):
    """Observation vanished while the observed quantity did not.

    Raised with diagnostics attached; signals a violated observability or
    stability premise rather than a numerical failure.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoConvergence(ObsWaveError):
    """Iteration cap reached with the gradient still above tolerance."""

    def __init__(self, message, result=None, diagnostics=None):
        super().__init__(message)
        self.result = result
        self.diagnostics = diagnostics or {}


class IllPosedGeometry(ObsWaveError):
    """Reconstruction requested on a geometry with no observation region."""


class ConfigError(ObsWaveError):
    """Experiment configuration failed to parse or validate."""


class MissingArtifact(ObsWaveError):
    """Requested artifact file does not exist."""
