"""Exception types shared across the toolkit.

Argument misuse raises plain ``ValueError``; everything that depends on
external state (files, manifests, model outputs) gets a named class so
callers can catch narrowly.
"""


class LesionForgeError(Exception):
    """Base class for toolkit-specific errors."""


class NiftiFormatError(LesionForgeError):
    """The file is not a little-endian single-file NIfTI-1."""


class NiftiUnsupportedError(LesionForgeError):
    """The file is NIfTI-1 but uses a feature we deliberately reject."""


class ValidationError(LesionForgeError):
    """Data violates a declared invariant (bad voxels, grids, records)."""


class ManifestParseError(LesionForgeError):
    """Manifest JSON does not conform to the schema.

    ``pointer`` holds a JSON pointer to the offending element.
    """

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer


class ContractError(LesionForgeError):
    """A callable supplied by the caller broke its contract."""


class UndefinedCorrelationError(LesionForgeError):
    """Pearson correlation requested for a zero-variance sequence."""
