class BranchlabError(Exception):
    pass


class ValidationError(BranchlabError, ValueError):
    """
    Malformed input: a law, a spec file or a config value
    The message names the offending key where there is one
    """

    def __init__(self, message: str, key: str = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class DomainError(ValidationError):
    pass


class ConvergenceError(BranchlabError):
    def __init__(self, message: str, iterations: int = None, residual: float = None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class InstabilityError(ConvergenceError):
    pass


class TruncationOverflowError(BranchlabError):
    def __init__(self, message: str, cap: int = None):
        super().__init__(message)
        self.cap = cap
