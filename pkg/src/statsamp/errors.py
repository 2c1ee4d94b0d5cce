"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid experiment configuration.

    ``path`` names the offending field, e.g. ``"kernel.sigma"``.
    """

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericalError(ArithmeticError):
    """A sampler or integrator produced a non-finite state."""

    def __init__(self, message, step=None, chain=None):
        self.step = step
        self.chain = chain
        where = []
        if chain is not None:
            where.append(f"chain {chain}")
        if step is not None:
            where.append(f"step {step}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
