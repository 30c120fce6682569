"""Exception hierarchy shared across the laboratory."""


class LabError(Exception):
    """Base class for all laboratory errors."""


class ConfigurationError(LabError, ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class PreconditionError(LabError, ValueError):
    """An operation was called with arguments outside its contract."""


class ProtocolError(LabError, RuntimeError):
    """A policy violated the meta-episode protocol."""

    def __init__(self, step, message):
        self.step = step
        super().__init__(f"step {step}: {message}")


class EstimationError(LabError, ValueError):
    """Model estimation had neither data nor a smoothing prior."""


class InferenceError(LabError, ValueError):
    """An observation had zero likelihood under every task."""

    def __init__(self, step, message):
        self.step = step
        super().__init__(f"step {step}: {message}")


class ConvergenceError(LabError, RuntimeError):
    """A contraction failed to converge within its certified iteration bound."""


class TrainingError(LabError, RuntimeError):
    """Embedding fitting diverged."""


class ResourceError(LabError, RuntimeError):
    """An exact expansion exceeded its node budget."""

    def __init__(self, nodes, message):
        self.nodes = nodes
        super().__init__(message)


class VerificationError(LabError, ValueError):
    """Inputs to a bound verifier have inconsistent provenance."""


class MissingArtifactError(LabError, FileNotFoundError):
    """A run directory lacks the artifacts of a required phase."""

    def __init__(self, phase, path):
        self.phase = phase
        super().__init__(f"missing artifact for phase '{phase}': {path}")
