"""Exception taxonomy shared across the package.

Two failure classes matter to callers: bad inputs (caller can fix the
call) and runtime failures (training diverged, artifact corrupt, frozen
weights drifted).  The CLI maps them to exit codes 1 and 2.
"""


class InputError(ValueError):
    """A precondition on arguments, shapes, or file contents was violated."""


class RunFailure(RuntimeError):
    """A run-time contract broke: divergence, checksum drift, corrupt state."""
