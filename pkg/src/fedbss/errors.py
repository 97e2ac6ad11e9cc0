"""Exception types raised across the package."""


class FedBSSError(Exception):
    pass


class ShapeError(FedBSSError, ValueError):
    """Input or parameter shapes do not line up."""


class LabelError(FedBSSError, ValueError):
    pass


class FormatError(FedBSSError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class PartitionError(FedBSSError, ValueError):
    pass


class ScheduleError(FedBSSError, ValueError):
    pass


class ConfigError(FedBSSError, ValueError):
    pass


class ReportError(FedBSSError, ValueError):
    pass
