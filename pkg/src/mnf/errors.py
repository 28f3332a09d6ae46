"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's preconditions (bad shapes, bad ranges)."""


class NumericFault(ArithmeticError):
    """A computation produced non-finite values.

    Carries the identifier of the primitive or layer that produced them so
    training aborts can be localized.
    """

    def __init__(self, where, detail=""):
        self.where = where
        self.detail = detail
        msg = f"non-finite values produced by '{where}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ConfigError(ValueError):
    """An experiment or model configuration is invalid.

    ``fields`` lists every violated field so a single run reports all
    problems at once.
    """

    def __init__(self, fields):
        if isinstance(fields, str):
            fields = [fields]
        self.fields = list(fields)
        super().__init__("invalid configuration: " + "; ".join(self.fields))


class FormatError(ValueError):
    """A binary input file does not match its declared format."""
