"""Exception types shared across the package.

The CLI maps these onto exit codes: shape/data problems exit 2,
numerical failures exit 3.
"""


class ShapeError(ValueError):
    """Tensor, dataset or concept dimensions do not agree."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (e.g. backward before forward)."""


class NumericalError(ArithmeticError):
    """A loss or intermediate value became non-finite."""


class ContainerError(ValueError):
    """Malformed manifest+payload container on disk."""


class AbsentAttributeError(KeyError):
    """A label was requested that the dataset does not carry."""

    def __init__(self, name, available):
        self.name = name
        self.available = list(available)
        super().__init__(name)

    def __str__(self):
        avail = ", ".join(self.available) if self.available else "<none>"
        return f"dataset has no attribute {self.name!r}; available: {avail}"


class StLoadError(ValueError):
    """One or more lines of a spatial-transcriptomics input were rejected."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))
