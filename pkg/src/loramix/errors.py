"""Exception types raised across the package."""


class LoramixError(Exception):
    pass


class ShapeError(LoramixError, ValueError):
    pass


class ParameterError(LoramixError, ValueError):
    pass


class PreconditionError(LoramixError, ValueError):
    pass


class ContractError(LoramixError, ValueError):
    pass


class CompatibilityError(LoramixError, ValueError):
    """Adapter targets a layer the model lacks, or with the wrong shape."""

    def __init__(self, layers):
        self.layers = list(layers)
        super().__init__("incompatible adapter layers: " + ", ".join(self.layers))


class FormatError(LoramixError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the failure."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")
