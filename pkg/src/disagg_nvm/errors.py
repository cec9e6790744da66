"""Exception hierarchy shared by every layer of the simulator."""


class NvmError(Exception):
    """Base class for all errors raised by this package."""


class FabricError(NvmError):
    pass


class DestinationUnreachable(FabricError):
    def __init__(self, dst, detail=""):
        super().__init__(f"node {dst} unreachable{': ' + detail if detail else ''}")
        self.dst = dst


class NodeCrashed(FabricError):
    """Raised inside the control flow of a node that has just crashed.

    Code running "on" the crashed node must not continue; harnesses catch this
    to discard the node's volatile state.
    """

    def __init__(self, node):
        super().__init__(f"node {node} crashed")
        self.node = node


class MisalignedAtomic(FabricError):
    pass


class RegionBoundsError(FabricError):
    pass


class LogAreaFull(NvmError):
    pass


class ChecksumMismatch(NvmError):
    pass


class OutOfMemory(NvmError):
    pass


class DoubleFree(NvmError):
    pass


class NotOwner(NvmError):
    pass


class LockHeld(NvmError):
    pass


class PopEmpty(NvmError):
    pass


class DequeueEmpty(NvmError):
    pass


class UnsortedInput(NvmError):
    pass


class BackendUnavailable(NvmError):
    """The front-end lost its back-end and must go through recovery first."""


class ServiceHalted(NvmError):
    """No back-end and no promotable mirror remain."""


class ConfigError(NvmError):
    pass
