"""Exception hierarchy for the Volterra solvers and simulators"""

from typing import Optional


class VolterraError(Exception):
    """Base class for every error raised by this package"""


class KernelDomainError(VolterraError, ValueError):
    """Kernel evaluated outside its domain, or a kernel unfit for the requested operation"""


class JumpDomainError(VolterraError, ValueError):
    """Exponential moment of the jump measure does not exist at the requested argument"""


class UnsupportedKernelError(VolterraError, ValueError):
    """Operation has no implementation for the given kernel family"""


class ConfigError(VolterraError, ValueError):
    """Run configuration could not be read or validated"""


class NumericError(VolterraError, ArithmeticError):
    """A numerical procedure failed to converge or became unstable"""

    def __init__(self, message: str, node: Optional[int] = None):
        self.node = node
        if node is not None:
            message = f"{message} (node {node})"
        super().__init__(message)


class BlowUpError(NumericError):
    """Riccati solution exceeded the configured modulus cap"""

    def __init__(self, message: str, node: Optional[int] = None, time: Optional[float] = None):
        self.time = time
        if time is not None:
            message = f"{message} at t={time:.6g}"
        super().__init__(message, node=node)
