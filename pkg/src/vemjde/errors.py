"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class JdeError(Exception):
    """Base class for all package errors."""


class ConfigError(JdeError):
    """Invalid user-supplied configuration or arguments."""


class InvalidParadigmError(ConfigError):
    """Onsets outside the session, unsorted lists, or no conditions."""


class InvalidSamplingError(ConfigError):
    """Inconsistent sampling grids (e.g. HRF period not finer than TR)."""


class DriftBasisError(ConfigError):
    """Drift basis request that is too rich or ill-posed."""


class NonstationaryNoiseError(ConfigError):
    """AR parameters outside the stationarity region."""


class DataError(JdeError):
    """Problems with on-disk datasets, reports or their contents."""


class FormatError(DataError):
    """Unrecognized magic bytes or format version."""


class ShapeError(DataError):
    """Array dimensions disagree with the manifest or expectations."""


class InvariantError(DataError):
    """A loaded object violates one of its type invariants."""


class NumericalError(JdeError):
    """A linear-algebra or optimization step failed beyond recovery."""


class MetricError(JdeError):
    """A metric is undefined for the given inputs."""
