class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class DomainError(ValueError):
    """Input outside the domain an operation is defined on."""


class ConsistencyError(ValueError):
    """Inputs that were expected to derive from one another do not agree."""


class VocabularyError(KeyError):
    """Node id not present in the vocabulary."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss component."""
