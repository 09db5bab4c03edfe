"""Exception hierarchy shared by all modules.

Exit-code mapping (used by the CLI): ConfigError -> 2,
DataFormatError -> 3, ContractError -> 4.
"""


class CropRotError(Exception):
    pass


class ConfigError(CropRotError):
    """Invalid configuration (bad probabilities, unknown keys, ...)."""


class DataFormatError(CropRotError):
    """Malformed dataset / checkpoint files (bad magic, truncation, ...)."""


class ContractError(CropRotError):
    """A call violated a documented precondition."""


class DimensionError(ContractError):
    """Tensor shape mismatch."""
