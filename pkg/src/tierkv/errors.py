"""Exception hierarchy shared across tierkv."""


class TierKVError(Exception):
    """Base class for every error raised by tierkv."""


class ConfigError(TierKVError):
    """Bad profile, curve, policy or CLI configuration."""


class ParseError(TierKVError):
    """Malformed input file (trace rows, profile JSON)."""


class ContractError(TierKVError, ValueError):
    """A caller violated an operation's precondition."""


class ConsistencyError(TierKVError):
    """Engine and policy state disagree (e.g. decision for an unknown entry)."""


class FormatError(TierKVError):
    """Truncated or corrupt compressed stream."""


class InstanceTooLargeError(TierKVError):
    """Exhaustive search refused because the instance is too big."""


class InputError(TierKVError, ValueError):
    """Input data that an operation cannot accept (non-finite values, bad layout)."""
