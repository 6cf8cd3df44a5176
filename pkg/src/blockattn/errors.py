"""Exception types shared across the package."""


class BlockAttnError(Exception):
    """Base class for all package errors."""


class ContractError(BlockAttnError, ValueError):
    """A precondition of an operation was violated."""


class PositionRangeError(BlockAttnError, IndexError):
    """A position index falls outside the model's supported range."""


class StaleCacheError(BlockAttnError):
    """A cached block was produced by a different model than the one asking for it."""


class CacheFormatError(BlockAttnError):
    """A serialized file has the wrong magic bytes or format version."""


class CacheCorruptionError(BlockAttnError):
    """A serialized file is truncated or internally inconsistent."""
