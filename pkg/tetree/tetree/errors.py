from dataclasses import dataclass
from typing import List
from typing import Sequence
from typing import Tuple


class TetException(Exception):
    def message(self) -> str:
        return str(self.args[0]) if self.args else self.__class__.__name__

    def __str__(self) -> str:
        return self.message()


@dataclass
class ContractException(TetException):
    """
        Raised when a caller violates an operation's precondition.
    """
    reason: str

    def message(self) -> str:
        return self.reason


@dataclass
class DimensionException(ContractException):
    left: Tuple[int, ...]
    right: Tuple[int, ...]

    def message(self) -> str:
        return "%s (shapes %s and %s)" % (self.reason, str(self.left), str(self.right))


@dataclass
class LookupException(TetException):
    kind: str
    key: str
    known: Sequence[str]

    def message(self) -> str:
        return "Unknown %s '%s' (known values are: %s)" % (self.kind, self.key, ", ".join(self.known))


@dataclass
class DataException(TetException):
    reason: str

    def message(self) -> str:
        return self.reason


@dataclass
class CheckpointException(TetException):
    path: str
    reason: str

    def message(self) -> str:
        return "Invalid checkpoint %s: %s" % (self.path, self.reason)


@dataclass
class NumericException(TetException):
    step: int
    languages: List[str]

    def message(self) -> str:
        return "Non-finite loss at step %d for languages: %s" % (self.step, ", ".join(self.languages))


@dataclass
class Rejection:
    """
        Reason an input was rejected by an operation that returns `Union[Boxed[T], List[Rejection]]`.
    """
    reason: str

    def to_string(self) -> str:
        return "Rejected: " + self.reason
