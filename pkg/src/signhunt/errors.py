"""Exception types shared across the toolkit."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class BudgetExceeded(RuntimeError):
    """The query budget is exhausted; no further model evaluations allowed."""

    def __init__(self, used, limit):
        super().__init__(f"query budget exhausted: used={used} limit={limit}")
        self.used = used
        self.limit = limit


class TrainingFailed(RuntimeError):
    """Toy training diverged (non-finite loss)."""


class CorruptModel(RuntimeError):
    """Model directory failed integrity checks (bad checksum or truncated blob)."""


class RemoteUnavailable(RuntimeError):
    """Remote classifier unreachable after the configured retry attempts."""


class ProtocolError(RuntimeError):
    """Remote classifier answered with a malformed response."""


class CampaignAborted(RuntimeError):
    """Too many campaign items failed unexpectedly; results are unreliable."""
