"""Exception hierarchy shared by every layer of the simulator."""


class ManaError(Exception):
    """Base class for simulator errors."""


class InvalidConfiguration(ManaError):
    pass


class ConfigurationError(ManaError):
    """Unknown or unsupported wrapper mode."""


class StaleHandle(ManaError):
    """A real handle from an earlier lower-half epoch was used."""


class InvalidRank(ManaError):
    pass


class ProtocolViolation(ManaError):
    """Members of one collective instance disagree on its kind, root or op."""


class UnknownVirtualHandle(ManaError):
    pass


class InvalidOperation(ManaError):
    pass


class RejectedBusy(ManaError):
    """A checkpoint was requested while another round is in progress."""


class DrainStuck(ManaError):
    def __init__(self, sender, receiver, missing_bytes, missing_msgs):
        self.sender = sender
        self.receiver = receiver
        self.missing_bytes = missing_bytes
        self.missing_msgs = missing_msgs
        super().__init__(
            f"drain made no progress: rank {receiver} still expects "
            f"{missing_bytes} bytes / {missing_msgs} messages from rank {sender}"
        )


class GidCollision(ManaError):
    pass


class CheckpointAborted(ManaError):
    pass


class RestartIncomplete(ManaError):
    pass


class IncompatibleImage(ManaError):
    pass


class CorruptImage(ManaError):
    pass


class RestartInconsistency(ManaError):
    pass
