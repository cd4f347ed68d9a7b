"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message wording: ConfigError and bad usage exit 2,
data/file problems exit 3, numerical divergence exits 4 and checkpoint
format violations exit 5.
"""


class MMNetError(Exception):
    """Base class for every error raised deliberately by this package."""


class ShapeError(MMNetError):
    """An array arrived with dimensions an op cannot accept."""


class ConfigError(MMNetError):
    """A configuration value is out of range, unknown or inconsistent."""


class FormatError(MMNetError):
    """On-disk data (sequence dir, trajectory file, config file) is malformed."""


class InputError(MMNetError):
    """Runtime input outside an op's domain (empty sequence, bad box, ...)."""


class DivergenceError(MMNetError):
    """A non-finite value appeared where the math requires finite ones."""


class CheckpointError(MMNetError):
    """A checkpoint file violates the binary format contract."""
