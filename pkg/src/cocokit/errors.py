class DivergenceError(RuntimeError):
    """Training produced non-finite values or the cost blew up."""


class StaleCacheError(RuntimeError):
    """A backward pass was given a cache that was already consumed or belongs to other params."""
