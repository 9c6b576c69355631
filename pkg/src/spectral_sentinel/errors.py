"""Exception types shared across the package."""


class SentinelError(Exception):
    pass


class InvalidInput(SentinelError, ValueError):
    pass


class NumericalFailure(SentinelError, ArithmeticError):
    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class DegenerateDistribution(SentinelError, ValueError):
    pass


class InsufficientClients(SentinelError, ValueError):
    pass


# ledger errors

class LedgerError(SentinelError):
    pass


class AlreadyRegistered(LedgerError):
    pass


class Unregistered(LedgerError):
    pass


class NoOpenRound(LedgerError):
    pass


class DuplicateSubmission(LedgerError):
    pass


class UnknownRound(LedgerError):
    pass


class IntegrityError(LedgerError):
    pass


class PurgedError(LedgerError):
    pass
