"""Exception types shared across the package.

The command-line layer maps these onto its stable exit codes:
usage errors exit 1, ``InputFormatError`` exits 2, ``NumericalError``
exits 3.
"""


class InputFormatError(ValueError):
    """Malformed or inconsistent input data (files, dimensions, schemes)."""


class NumericalError(RuntimeError):
    """A numerical routine failed to produce a usable result."""


class NiftiError(InputFormatError):
    """Base class for NIfTI file problems."""


class BadMagicError(NiftiError):
    """File does not carry a recognized NIfTI magic string."""


class UnsupportedFormatError(NiftiError):
    """Recognized but unsupported NIfTI variant (e.g. detached header)."""


class UnsupportedDatatypeError(NiftiError):
    """NIfTI datatype code outside the supported set."""


class TruncatedFileError(NiftiError):
    """File ends before the declared data payload is complete."""
