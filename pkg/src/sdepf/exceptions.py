"""Exception types used across the package."""


class SdepfError(Exception):
    """Base class for all errors raised by this package."""


class DiffusionError(SdepfError):
    """Diffusion matrix is not symmetric positive definite at some time."""


class SingularMatrixError(SdepfError):
    """A matrix that must be inverted is singular or too ill-conditioned."""


class IntegrationError(SdepfError):
    """A drift, state or weight became non-finite during integration."""


class DegeneracyError(SdepfError):
    """All particle weights vanished at a measurement update."""


class ConfigError(SdepfError):
    """Invalid or inconsistent run configuration."""
