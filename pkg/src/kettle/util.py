import base64
import binascii
import collections.abc
import datetime
import enum
import hashlib
import logging
import pathlib
import re
import types
import typing

import pydantic
import yarl

from kettle import errors

Clock = typing.Callable[[], datetime.datetime]
"""Zero-argument callable returning an aware UTC datetime"""

_LOWER_HEX = re.compile(r'[0-9a-f]*')
_TIMESTAMP = re.compile(
    r'[0-9]{4}-[0-9]{2}-[0-9]{2}T[0-9]{2}:[0-9]{2}:[0-9]{2}Z'
)


def get_logger_for(obj: object) -> logging.Logger:
    """Retrieve a logger for obj.__class__

    >>> class C:
    ...     def __init__(self):
    ...         self.logger = get_logger_for(self)
    >>> c = C()
    >>> c.logger.name
    'kettle.util.C'

    """
    if isinstance(obj, types.FunctionType):
        return logging.getLogger(obj.__module__).getChild(obj.__name__)
    cls = obj if isinstance(obj, type) else type(obj)
    return logging.getLogger(cls.__module__).getChild(cls.__name__)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256_hex(data: bytes) -> str:
    """Lowercase hex SHA-256 of `data`"""
    return hashlib.sha256(data).hexdigest()


def is_lower_hex(value: object, *lengths: int) -> bool:
    """Is `value` a lowercase hex string of one of `lengths`?"""
    return (
        isinstance(value, str)
        and len(value) in lengths
        and _LOWER_HEX.fullmatch(value) is not None
    )


def check_hex(field: str, value: str, *lengths: int) -> str:
    """Return `value` or raise [kettle.errors.BadDigestError][]"""
    if not is_lower_hex(value, *lengths):
        raise errors.BadDigestError(field, value, *lengths)
    return value


def length_prefixed(*parts: bytes) -> bytes:
    """Concatenate `parts` each preceded by its 8-byte big-endian length"""
    return b''.join(len(p).to_bytes(8, 'big') + p for p in parts)


def utc_now() -> datetime.datetime:
    """Default clock: the current time truncated to whole seconds"""
    return datetime.datetime.now(datetime.UTC).replace(microsecond=0)


def format_timestamp(when: datetime.datetime) -> str:
    """RFC 3339 UTC timestamp with second precision and a trailing Z"""
    if when.tzinfo is None:
        when = when.replace(tzinfo=datetime.UTC)
    return when.astimezone(datetime.UTC).strftime('%Y-%m-%dT%H:%M:%SZ')


def _check_timestamp_text(value: object) -> object:
    if isinstance(value, str) and not _TIMESTAMP.fullmatch(value):
        raise ValueError(
            f'timestamp {value!r} is not in YYYY-MM-DDTHH:MM:SSZ form'
        )
    return value


def _as_utc(when: datetime.datetime) -> datetime.datetime:
    if when.tzinfo is None:
        when = when.replace(tzinfo=datetime.UTC)
    return when.astimezone(datetime.UTC).replace(microsecond=0)


def _from_hex(value: object) -> bytes:
    if isinstance(value, bytes | bytearray):
        return bytes(value)
    if (
        not isinstance(value, str)
        or len(value) % 2
        or not is_lower_hex(value, len(value))
    ):
        raise ValueError('expected an even-length lowercase hex string')
    return bytes.fromhex(typing.cast(str, value))


def _from_base64(value: object) -> bytes:
    if isinstance(value, bytes | bytearray):
        return bytes(value)
    if not isinstance(value, str):
        raise ValueError('expected a base64 string')  # noqa: TRY004
    try:
        return base64.b64decode(value, validate=True)
    except binascii.Error as error:
        raise ValueError(f'invalid base64: {error}') from None


HexBytes = typing.Annotated[
    bytes,
    pydantic.PlainValidator(_from_hex),
    pydantic.PlainSerializer(lambda b: b.hex(), return_type=str),
]
"""Bytes that travel as lowercase hex"""

Base64Bytes = typing.Annotated[
    bytes,
    pydantic.PlainValidator(_from_base64),
    pydantic.PlainSerializer(
        lambda b: base64.b64encode(b).decode('ascii'), return_type=str
    ),
]
"""Bytes that travel as standard base64"""

Timestamp = typing.Annotated[
    datetime.datetime,
    pydantic.BeforeValidator(_check_timestamp_text),
    pydantic.AfterValidator(_as_utc),
    pydantic.PlainSerializer(format_timestamp, return_type=str),
]
"""Second-precision UTC datetime serialized as ``YYYY-MM-DDTHH:MM:SSZ``"""


def exact_size(size: int) -> pydantic.AfterValidator:
    """Annotation that requires a bytes value to be `size` long"""

    def validate(value: bytes) -> bytes:
        if len(value) != size:
            raise ValueError(f'expected {size} bytes, got {len(value)}')
        return value

    return pydantic.AfterValidator(validate)


def absolute_uri(value: str) -> str:
    """Validator that accepts absolute URIs and PURLs"""
    if value.startswith('pkg:'):
        return value
    if not yarl.URL(value).is_absolute():
        raise ValueError(f'{value!r} is not an absolute URI')
    return value


AbsoluteURI = typing.Annotated[str, pydantic.AfterValidator(absolute_uri)]


def safe_relative_path(name: str) -> pathlib.PurePosixPath:
    """Interpret `name` as a relative path that stays below its root"""
    path = pathlib.PurePosixPath(name)
    if not name or path.is_absolute() or '..' in path.parts:
        raise ValueError(f'{name!r} is not a safe relative path')
    return path


class FieldOmittingMixin(pydantic.BaseModel):
    """Mix this into pydantic models to omit `None` fields

    The fields named in `OMIT_IF_NONE` will be ignored during
    serialization if their value is `None`.

    The fields named in `OMIT_IF_EMPTY` will be ignored during
    serialization if their value is *empty*. This is only relevant
    for instances that implement [collections.abc.Sized][].

    Names are attribute names; the serialized key is looked up
    through the field alias when serializing by alias.

    """

    OMIT_IF_EMPTY: typing.ClassVar[tuple[str, ...]] = ()
    OMIT_IF_NONE: typing.ClassVar[tuple[str, ...]] = ()

    @pydantic.model_serializer(mode='wrap')
    def _omit_fields(
        self,
        handler: typing.Callable[
            [typing.Self, pydantic.SerializationInfo], dict[str, object]
        ],
        info: pydantic.SerializationInfo,
    ) -> dict[str, object]:
        result = handler(self, info)
        for name, field in type(self).model_fields.items():
            key = field.alias if info.by_alias and field.alias else name
            value = result.get(key, None)
            empty = isinstance(value, collections.abc.Sized) and not len(value)
            if (name in self.OMIT_IF_NONE and value is None) or (
                name in self.OMIT_IF_EMPTY and empty
            ):
                result.pop(key, None)
        return result


@typing.runtime_checkable
class HasIsoFormat(typing.Protocol):
    """Runtime checkable protocol that detects the isoformat method"""

    def isoformat(self, spec: str = ...) -> str: ...


def json_serialize_hook(
    obj: object,
) -> bool | float | int | str | list[object] | dict[str, object]:
    """Standard `default` function passed to json.dump

    This function is used to serialize the non-standard objects
    that appear in command output.

    | Type                      | Description                     |
    | ------------------------- | ------------------------------- |
    | [datetime.datetime][]     | RFC 3339 UTC timestamp          |
    | has attribute isoformat   | `obj.isoformat()`               |
    | [bytes][]                 | lowercase hex                   |
    | [enum.Enum][]             | `obj.value`                     |
    | [pathlib.PurePath][]      | `str(obj)`                      |
    | [yarl.URL][]              | `str(obj)`                      |
    | Pydantic models           | `obj.model_dump(by_alias=True)` |

    """
    if isinstance(obj, datetime.datetime):
        return format_timestamp(obj)
    if isinstance(obj, HasIsoFormat):
        return obj.isoformat()
    if isinstance(obj, bytes | bytearray):
        return bytes(obj).hex()
    if isinstance(obj, enum.Enum):
        return typing.cast(str | int, obj.value)
    if isinstance(obj, pathlib.PurePath | yarl.URL):
        return str(obj)
    if isinstance(obj, pydantic.BaseModel):
        return obj.model_dump(by_alias=True, mode='json')

    raise errors.NotSerializableError(obj)
