"""Exception hierarchy shared by every module.

The CLI maps :class:`ConfigurationError` to exit status 1 and every other
:class:`SimulationError` to exit status 2.
"""


class SimulationError(Exception):
    """Base class for all errors raised by the simulator."""


class ConfigurationError(SimulationError, ValueError):
    """Invalid or inconsistent configuration (unknown preset, bad rate, capacity overflow)."""


class ContractViolation(SimulationError):
    """A caller broke an operation's precondition."""


class InvariantViolation(ContractViolation):
    """A data structure invariant does not hold."""


class ProtocolError(SimulationError):
    """A DRAM/NMC command violates timing or mode-transition rules.

    ``parameter`` names the violated timing parameter or rule when known.
    """

    def __init__(self, message: str, parameter: str | None = None):
        super().__init__(message)
        self.parameter = parameter


class AddressError(ProtocolError):
    """Global-buffer address out of range."""


class AllocationError(SimulationError):
    """A reallocation plan does not fit the PIM capacity."""
