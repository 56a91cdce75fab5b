"""Canonical JSON

The canonical form is the JCS shape restricted to a float-free
schema:

* UTF-8 output with object keys sorted by Unicode code point
* no insignificant whitespace
* strings escape only ``"``, ``\\`` and control characters; the
  control characters with short forms use them (``\\n``, ``\\t``, ...)
  and the rest use ``\\u00xx`` with lowercase hex
* integers in shortest decimal form, no floating point values

Decoding is strict as well: floats, duplicate object keys, invalid
UTF-8 and the non-finite constants are rejected.

"""

import collections.abc
import json
import typing

from kettle import errors


def _check(value: object) -> None:
    if value is None or isinstance(value, bool | int | str):
        return
    if isinstance(value, collections.abc.Mapping):
        for key, item in value.items():
            if not isinstance(key, str):
                raise errors.NonCanonicalizableError(key)
            _check(item)
        return
    if isinstance(value, list | tuple):
        for item in value:
            _check(item)
        return
    raise errors.NonCanonicalizableError(value)


def encode(value: object) -> bytes:
    """Serialize `value` to canonical bytes

    Raises [kettle.errors.NonCanonicalizableError][] when anything
    outside of null, booleans, integers, strings, lists and
    string-keyed mappings is reached.

    """
    _check(value)
    text = json.dumps(
        value,
        ensure_ascii=False,
        allow_nan=False,
        separators=(',', ':'),
        sort_keys=True,
    )
    try:
        return text.encode('utf-8')
    except UnicodeEncodeError:
        # lone surrogates have no UTF-8 form
        raise errors.NonCanonicalizableError(value) from None


def _reject_float(value: str) -> typing.NoReturn:
    raise errors.MalformedStatementError(f'floating point value {value}')


def _reject_constant(value: str) -> typing.NoReturn:
    raise errors.MalformedStatementError(f'non-finite value {value}')


def _unique_object(pairs: list[tuple[str, object]]) -> dict[str, object]:
    result: dict[str, object] = {}
    for key, value in pairs:
        if key in result:
            raise errors.MalformedStatementError(f'duplicate key {key!r}')
        result[key] = value
    return result


def decode(data: bytes) -> object:
    """Parse UTF-8 JSON under the canonical value restrictions

    The input does not need to be in canonical form; callers that
    care compare ``encode(decode(data))`` against `data`.

    """
    try:
        text = data.decode('utf-8')
    except UnicodeDecodeError as error:
        raise errors.MalformedStatementError(str(error)) from None
    try:
        return json.loads(
            text,
            object_pairs_hook=_unique_object,
            parse_constant=_reject_constant,
            parse_float=_reject_float,
        )
    except json.JSONDecodeError as error:
        raise errors.MalformedStatementError(str(error)) from None


def is_canonical(data: bytes) -> bool:
    try:
        return encode(decode(data)) == data
    except errors.ProvenanceError:
        return False
