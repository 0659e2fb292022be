import json
import math
from collections.abc import Callable, Iterable, Mapping
from dataclasses import MISSING, Field, fields, is_dataclass
from enum import Enum
from pathlib import Path
from types import NoneType, UnionType
from typing import Any, NewType, TypeVar, Union, get_args, get_origin, get_type_hints, overload

from ._errors import ValidationFailure
from ._geometry import BoundingBox, InvalidGeometry
from .path import FieldName, LineNumber, ListIndex, MapKey, MapValue, PathElem, Variant


class RecordError(ValidationFailure):
    def __init__(self, message: str, inner_errors: list[tuple[PathElem, "RecordError"]] = []):
        super().__init__(message)
        self.message = message
        self.inner_errors = inner_errors

    def __str__(self) -> str:
        messages = collect_messages([], self)

        _, msg = messages[0]
        message_strings = [msg] + [
            "  " * len(path) + ".".join(str(elem) for elem in path) + f": {msg}"
            for path, msg in messages[1:]
        ]

        return "\n".join(message_strings)


def collect_messages(path: list[PathElem], exc: RecordError) -> list[tuple[list[PathElem], str]]:
    result = [(path, exc.message)]
    for path_elem, inner_exc in exc.inner_errors:
        result.extend(collect_messages([*path, path_elem], inner_exc))
    return result


Handler = Callable[["Codec", Any, Any], Any]


def lookup_order(tp: Any) -> list[Any]:
    """
    Returns the handler lookup order for a type.

    - A ``typing.NewType`` is followed by the order of its supertype.
    - A generic alias is followed by the order of its origin.
    - An ``Enum`` subclass is followed by ``Enum`` itself, so that ``StrEnum`` members
      are not picked up by the ``str`` handler of their mixin base.
    - A dataclass is followed by the ``dataclass`` marker :py:data:`DATACLASS`.
    - Any other class uses its MRO without ``object``.
    """
    if isinstance(tp, NewType):
        return [tp, *lookup_order(tp.__supertype__)]

    origin = get_origin(tp)
    if origin is not None:
        return [tp, *lookup_order(origin)]

    if isinstance(tp, type) and issubclass(tp, Enum):
        return [tp, Enum]

    if is_dataclass(tp):
        return [tp, DATACLASS]

    if hasattr(tp, "mro"):
        return list(tp.mro()[:-1])

    return [tp]


DATACLASS = object()
"""Lookup key for the generic dataclass handlers."""


_T = TypeVar("_T")


class Codec:
    """
    Converts harness values to and from JSON-compatible builtins,
    dispatching on the declared type rather than on the runtime value.
    """

    def __init__(
        self,
        decoders: Mapping[Any, Handler],
        encoders: Mapping[Any, Handler],
    ):
        self._decoders = dict(decoders)
        self._encoders = dict(encoders)

    @overload
    def decode(self, tp: type[_T], val: Any) -> _T: ...

    @overload
    def decode(self, tp: Any, val: Any) -> Any: ...

    def decode(self, tp: Any, val: Any) -> Any:
        for key in lookup_order(tp):
            handler = self._decoders.get(key)
            if handler is not None:
                return handler(self, tp, val)
        raise RecordError(f"No decoder registered for {tp}")

    def encode(self, tp: Any, val: Any) -> Any:
        for key in lookup_order(tp):
            handler = self._encoders.get(key)
            if handler is not None:
                return handler(self, tp, val)
        raise RecordError(f"No encoder registered for {tp}")


def _decode_none(_codec: Codec, _tp: Any, val: Any) -> None:
    if val is not None:
        raise RecordError("The value must be `null`")


def _decode_bool(_codec: Codec, _tp: Any, val: Any) -> bool:
    if not isinstance(val, bool):
        raise RecordError("The value must be a boolean")
    return val


def _decode_int(_codec: Codec, _tp: Any, val: Any) -> int:
    # `bool` is a subclass of `int` in Python, and we don't want to mix them up.
    if not isinstance(val, int) or isinstance(val, bool):
        raise RecordError("The value must be an integer")
    return val


def _decode_float(_codec: Codec, _tp: Any, val: Any) -> float:
    if not isinstance(val, int | float) or isinstance(val, bool):
        raise RecordError("The value must be a real number")
    if not math.isfinite(val):
        raise RecordError("The value must be finite")
    return float(val)


def _decode_str(_codec: Codec, _tp: Any, val: Any) -> str:
    if not isinstance(val, str):
        raise RecordError("The value must be a string")
    return val


def _decode_path(_codec: Codec, _tp: Any, val: Any) -> Path:
    if not isinstance(val, str):
        raise RecordError("A path must be a string")
    return Path(val)


def _decode_enum(_codec: Codec, tp: Any, val: Any) -> Any:
    try:
        return tp(val)
    except ValueError as exc:
        allowed = ", ".join(repr(member.value) for member in tp)
        raise RecordError(f"The value must be one of {allowed}, got {val!r}") from exc


def _decode_box(_codec: Codec, _tp: Any, val: Any) -> BoundingBox:
    if not isinstance(val, list | tuple) or len(val) != 4:
        raise RecordError("A box must be a list of 4 numbers `[x, y, w, h]`")
    try:
        return BoundingBox.from_sequence(val)
    except InvalidGeometry as exc:
        raise RecordError(str(exc)) from exc


def _decode_union(codec: Codec, tp: Any, val: Any) -> Any:
    exceptions: list[tuple[PathElem, RecordError]] = []
    for variant in get_args(tp):
        try:
            return codec.decode(variant, val)
        except RecordError as exc:  # noqa: PERF203
            exceptions.append((Variant(variant), exc))
    raise RecordError(f"Cannot decode into {tp}", exceptions)


def _decode_list(codec: Codec, tp: Any, val: Any) -> list[Any]:
    if not isinstance(val, list | tuple):
        raise RecordError("The value must be a list")

    (item_type,) = get_args(tp) or (Any,)
    result = []
    exceptions: list[tuple[PathElem, RecordError]] = []
    for index, item in enumerate(val):
        try:
            result.append(codec.decode(item_type, item))
        except RecordError as exc:  # noqa: PERF203
            exceptions.append((ListIndex(index), exc))

    if exceptions:
        raise RecordError(f"Cannot decode into {tp}", exceptions)
    return result


def _decode_tuple(codec: Codec, tp: Any, val: Any) -> tuple[Any, ...]:
    if not isinstance(val, list | tuple):
        raise RecordError("The value must be a list")

    elem_types = get_args(tp)
    # Homogeneous tuples (tuple[some_type, ...])
    if len(elem_types) == 2 and elem_types[1] == ...:
        elem_types = tuple(elem_types[0] for _ in range(len(val)))

    if len(val) != len(elem_types):
        raise RecordError(f"Expected {len(elem_types)} elements, got {len(val)}")

    result = []
    exceptions: list[tuple[PathElem, RecordError]] = []
    for index, (item, item_type) in enumerate(zip(val, elem_types, strict=True)):
        try:
            result.append(codec.decode(item_type, item))
        except RecordError as exc:  # noqa: PERF203
            exceptions.append((ListIndex(index), exc))

    if exceptions:
        raise RecordError(f"Cannot decode into {tp}", exceptions)
    return tuple(result)


def _decode_dict(codec: Codec, tp: Any, val: Any) -> dict[Any, Any]:
    if not isinstance(val, dict):
        raise RecordError("The value must be a mapping")

    key_type, value_type = get_args(tp)
    result = {}
    exceptions: list[tuple[PathElem, RecordError]] = []
    for key, value in val.items():
        try:
            decoded_key = codec.decode(key_type, key)
        except RecordError as exc:
            exceptions.append((MapKey(key), exc))
            continue
        try:
            result[decoded_key] = codec.decode(value_type, value)
        except RecordError as exc:
            exceptions.append((MapValue(key), exc))

    if exceptions:
        raise RecordError(f"Cannot decode into {tp}", exceptions)
    return result


def _decode_dataclass(codec: Codec, tp: Any, val: Any) -> Any:
    if not isinstance(val, dict):
        raise RecordError(f"Can only decode a mapping into {tp.__name__}")

    hints = get_type_hints(tp)
    known = {field.name for field in fields(tp) if field.init}
    exceptions: list[tuple[PathElem, RecordError]] = [
        (FieldName(name), RecordError("Unknown field")) for name in val if name not in known
    ]

    results = {}
    for field in fields(tp):
        if not field.init:
            continue
        if field.name in val:
            try:
                results[field.name] = codec.decode(hints[field.name], val[field.name])
            except RecordError as exc:
                exceptions.append((FieldName(field.name), exc))
        elif not _has_default(field):
            exceptions.append((FieldName(field.name), RecordError("Missing field")))

    if exceptions:
        raise RecordError(f"Cannot decode a mapping into {tp.__name__}", exceptions)

    try:
        return tp(**results)
    except ValidationFailure as exc:
        raise RecordError(f"Invalid {tp.__name__}: {exc}") from exc


def _has_default(field: Field[Any]) -> bool:
    return field.default is not MISSING or field.default_factory is not MISSING


def _encode_scalar(_codec: Codec, tp: Any, val: Any) -> Any:
    base = tp.__supertype__ if isinstance(tp, NewType) else tp
    while isinstance(base, NewType):  # type: ignore[unreachable]
        base = base.__supertype__  # type: ignore[unreachable]
    if base is float and isinstance(val, int) and not isinstance(val, bool):
        return float(val)
    if not isinstance(val, base) or (base is int and isinstance(val, bool)):
        raise RecordError(f"The value must be of type `{base.__name__}`")
    return val


def _encode_path(_codec: Codec, _tp: Any, val: Any) -> str:
    if not isinstance(val, Path):
        raise RecordError("The value must be a path")
    return val.as_posix()


def _encode_enum(_codec: Codec, tp: Any, val: Any) -> Any:
    if not isinstance(val, tp):
        raise RecordError(f"The value must be a member of `{tp.__name__}`")
    return val.value


def _encode_box(_codec: Codec, _tp: Any, val: Any) -> list[float]:
    if not isinstance(val, BoundingBox):
        raise RecordError("The value must be a `BoundingBox`")
    return list(val.as_tuple())


def _encode_union(codec: Codec, tp: Any, val: Any) -> Any:
    exceptions: list[tuple[PathElem, RecordError]] = []
    for variant in get_args(tp):
        try:
            return codec.encode(variant, val)
        except RecordError as exc:  # noqa: PERF203
            exceptions.append((Variant(variant), exc))
    raise RecordError(f"Cannot encode as {tp}", exceptions)


def _encode_sequence(codec: Codec, tp: Any, val: Any) -> list[Any]:
    if not isinstance(val, list | tuple):
        raise RecordError("The value must be a list or a tuple")

    elem_types = get_args(tp)
    if get_origin(tp) is list or not elem_types:
        elem_types = (elem_types[0] if elem_types else Any, ...)
    if len(elem_types) == 2 and elem_types[1] == ...:
        elem_types = tuple(elem_types[0] for _ in range(len(val)))
    if len(val) != len(elem_types):
        raise RecordError(f"Expected {len(elem_types)} elements, got {len(val)}")

    result = []
    exceptions: list[tuple[PathElem, RecordError]] = []
    for index, (item, item_type) in enumerate(zip(val, elem_types, strict=True)):
        try:
            result.append(codec.encode(item_type, item))
        except RecordError as exc:  # noqa: PERF203
            exceptions.append((ListIndex(index), exc))

    if exceptions:
        raise RecordError(f"Cannot encode as {tp}", exceptions)
    return result


def _encode_dict(codec: Codec, tp: Any, val: Any) -> dict[Any, Any]:
    if not isinstance(val, Mapping):
        raise RecordError("The value must be a mapping")

    key_type, value_type = get_args(tp)
    result = {}
    exceptions: list[tuple[PathElem, RecordError]] = []
    for key, value in val.items():
        try:
            encoded_key = codec.encode(key_type, key)
        except RecordError as exc:
            exceptions.append((MapKey(key), exc))
            continue
        try:
            result[encoded_key] = codec.encode(value_type, value)
        except RecordError as exc:
            exceptions.append((MapValue(key), exc))

    if exceptions:
        raise RecordError(f"Cannot encode as {tp}", exceptions)
    return result


def _encode_dataclass(codec: Codec, tp: Any, val: Any) -> dict[str, Any]:
    if not isinstance(val, tp):
        raise RecordError(f"The value must be of type `{tp.__name__}`")

    hints = get_type_hints(tp)
    result = {}
    exceptions: list[tuple[PathElem, RecordError]] = []
    for field in fields(tp):
        if not field.init:
            continue
        try:
            result[field.name] = codec.encode(hints[field.name], getattr(val, field.name))
        except RecordError as exc:
            exceptions.append((FieldName(field.name), exc))

    if exceptions:
        raise RecordError(f"Cannot encode {tp.__name__}", exceptions)
    return result


def _passthrough(_codec: Codec, _tp: Any, val: Any) -> Any:
    return val


CODEC = Codec(
    decoders={
        NoneType: _decode_none,
        bool: _decode_bool,
        int: _decode_int,
        float: _decode_float,
        str: _decode_str,
        Path: _decode_path,
        Enum: _decode_enum,
        BoundingBox: _decode_box,
        UnionType: _decode_union,
        Union: _decode_union,
        list: _decode_list,
        tuple: _decode_tuple,
        dict: _decode_dict,
        DATACLASS: _decode_dataclass,
        Any: _passthrough,
    },
    encoders={
        NoneType: _encode_scalar,
        bool: _encode_scalar,
        int: _encode_scalar,
        float: _encode_scalar,
        str: _encode_scalar,
        Path: _encode_path,
        Enum: _encode_enum,
        BoundingBox: _encode_box,
        UnionType: _encode_union,
        Union: _encode_union,
        list: _encode_sequence,
        tuple: _encode_sequence,
        dict: _encode_dict,
        DATACLASS: _encode_dataclass,
        Any: _passthrough,
    },
)
"""The codec used for every record, report, manifest and configuration file."""


def dumps(tp: Any, value: Any) -> str:
    """Encodes a single value as an indented JSON document."""
    return json.dumps(CODEC.encode(tp, value), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def loads(tp: type[_T], text: str) -> _T:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RecordError(f"Malformed JSON: {exc}") from exc
    return CODEC.decode(tp, data)


def dump_jsonl(path: Path, tp: Any, records: Iterable[Any]) -> None:
    """Writes one JSON object per line, in the order given."""
    with path.open("w", encoding="utf-8", newline="\n") as stream:
        for record in records:
            encoded = CODEC.encode(tp, record)
            stream.write(json.dumps(encoded, sort_keys=True, ensure_ascii=False) + "\n")


def load_jsonl(path: Path, tp: type[_T]) -> list[_T]:
    """Reads a line-delimited record file; blank lines are skipped."""
    result = []
    exceptions: list[tuple[PathElem, RecordError]] = []
    with path.open(encoding="utf-8") as stream:
        for line_no, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            try:
                result.append(CODEC.decode(tp, json.loads(line)))
            except json.JSONDecodeError as exc:
                exceptions.append((LineNumber(line_no), RecordError(f"Malformed JSON: {exc}")))
            except RecordError as exc:
                exceptions.append((LineNumber(line_no), exc))

    if exceptions:
        raise RecordError(f"Cannot read records from {path}", exceptions)
    return result
