"""Error types raised across the deblurring package."""


class DeblurError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DeblurError, ValueError):
    """Extents of images, kernels, stacks or spectra do not fit together."""


class ParameterError(DeblurError, ValueError):
    """A parameter is outside its documented range."""


class ConfigError(ParameterError):
    """Unknown or malformed configuration key."""


class FormatError(DeblurError, ValueError):
    """A file on disk does not follow its documented format."""


class TopologyError(DeblurError, ValueError):
    """Network channel counts do not match the data fed to them."""


class InputError(DeblurError, ValueError):
    """No usable input data."""


class NumericError(DeblurError, ArithmeticError):
    """NaN/Inf or an unexpected complex residue appeared."""
