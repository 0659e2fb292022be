from dataclasses import dataclass
from typing import Any


@dataclass(frozen=True)
class FieldName:
    """A dataclass field."""

    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Variant:
    """A union variant that was attempted."""

    type_: Any

    def __str__(self) -> str:
        return f"<{getattr(self.type_, '__name__', self.type_)}>"


@dataclass(frozen=True)
class ListIndex:
    """A list or tuple element."""

    index: int

    def __str__(self) -> str:
        return f"[{self.index}]"


@dataclass(frozen=True)
class MapKey:
    """A mapping key."""

    key: Any

    def __str__(self) -> str:
        return f"key({self.key})"


@dataclass(frozen=True)
class MapValue:
    """A mapping value."""

    key: Any

    def __str__(self) -> str:
        return f"[{self.key}]"


@dataclass(frozen=True)
class LineNumber:
    """A 1-based line of a line-delimited record file."""

    line: int

    def __str__(self) -> str:
        return f"line {self.line}"


PathElem = FieldName | Variant | ListIndex | MapKey | MapValue | LineNumber
