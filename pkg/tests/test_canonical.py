import datetime
import string
import unittest

import hypothesis
from hypothesis import strategies

from kettle import canonical, errors, manifest, provenance
from tests import BUILD_TYPE, lock_document

_canonical_values = strategies.recursive(
    strategies.none()
    | strategies.booleans()
    | strategies.integers()
    | strategies.text(),
    lambda children: strategies.lists(children)
    | strategies.dictionaries(strategies.text(), children),
    max_leaves=20,
)


class EncodingTests(unittest.TestCase):
    def test_keys_are_sorted_without_whitespace(self) -> None:
        self.assertEqual(
            b'{"a":[1,true,null],"b":{"c":"d"},"z":-5}',
            canonical.encode({'z': -5, 'b': {'c': 'd'}, 'a': [1, True, None]}),
        )

    def test_key_order_is_by_code_point(self) -> None:
        self.assertEqual(
            b'{"B":1,"_":2,"a":3}', canonical.encode({'a': 3, '_': 2, 'B': 1})
        )

    def test_string_escapes(self) -> None:
        expectations = [
            ('plain', b'"plain"'),
            ('quote " and \\', b'"quote \\" and \\\\"'),
            ('line\nbreak\ttab', b'"line\\nbreak\\ttab"'),
            ('\x01\x1f', b'"\\u0001\\u001f"'),
            ('café ☃', 'café ☃'.join('""').encode()),
            ('a/b', b'"a/b"'),
        ]
        for value, expected in expectations:
            self.assertEqual(expected, canonical.encode(value), repr(value))

    def test_integers(self) -> None:
        self.assertEqual(
            b'[0,-1,18446744073709551616]', canonical.encode([0, -1, 2**64])
        )

    def test_tuples_encode_as_arrays(self) -> None:
        self.assertEqual(b'[1,2]', canonical.encode((1, 2)))

    def test_rejected_values(self) -> None:
        for value in (
            1.5,
            float('nan'),
            b'bytes',
            {1: 'int key'},
            {'nested': [object()]},
            '\ud800',
        ):
            with self.assertRaises(
                errors.NonCanonicalizableError, msg=repr(value)
            ):
                canonical.encode(value)

    @hypothesis.given(_canonical_values)
    def test_encoding_is_a_fixpoint(self, value: object) -> None:
        encoded = canonical.encode(value)
        self.assertTrue(canonical.is_canonical(encoded))
        self.assertEqual(encoded, canonical.encode(canonical.decode(encoded)))


class DecodingTests(unittest.TestCase):
    def test_non_canonical_input_is_accepted(self) -> None:
        data = b'{ "b": 1,\n  "a": [true] }'
        self.assertEqual({'a': [True], 'b': 1}, canonical.decode(data))
        self.assertFalse(canonical.is_canonical(data))

    def test_rejected_documents(self) -> None:
        for data in (
            b'{"a": 1.0}',
            b'[1e3]',
            b'[NaN]',
            b'[Infinity]',
            b'{"a": 1, "a": 2}',
            b'\xff\xfe',
            b'{"a": ',
        ):
            with self.assertRaises(
                errors.MalformedStatementError, msg=repr(data)
            ):
                canonical.decode(data)
            self.assertFalse(canonical.is_canonical(data))


_hex32 = strategies.binary(min_size=32, max_size=32).map(bytes.hex)
_package_names = strategies.text(
    alphabet=string.ascii_letters + string.digits + '-_',
    min_size=1,
    max_size=12,
)


@strategies.composite
def _statements(
    draw: strategies.DrawFn,
) -> provenance.ProvenanceStatement:
    document = lock_document(draw(_hex32))
    document['dependencies'] = [
        {
            'name': name,
            'version': '1.0.0',
            'purl': f'pkg:cargo/{name}@1.0.0',
            'sha256': draw(_hex32),
        }
        for name in draw(
            strategies.lists(_package_names, max_size=5, unique=True)
        )
    ]
    lock = manifest.LockManifest.model_validate(document)
    started_on = draw(
        strategies.datetimes(
            min_value=datetime.datetime(2000, 1, 1),
            max_value=datetime.datetime(2100, 1, 1),
            timezones=strategies.just(datetime.UTC),
        )
    )
    elapsed = datetime.timedelta(seconds=draw(strategies.integers(0, 86400)))
    outputs = draw(
        strategies.lists(
            strategies.tuples(strategies.text(min_size=1), _hex32),
            min_size=1,
            max_size=4,
        )
    )
    return provenance.assemble_statement(
        manifest.InputManifest(
            ordered_leaves=(),
            merkle_root=bytes.fromhex(draw(_hex32)),
        ),
        lock,
        outputs,
        provenance.BuildMetadata(
            build_type=BUILD_TYPE,
            tee_platform=draw(
                strategies.sampled_from(['sim', 'sev-snp', 'tdx'])
            ),
            kettle_version=draw(strategies.text(max_size=10)),
            invocation_id=draw(strategies.text(max_size=20)),
            started_on=started_on,
            finished_on=started_on + elapsed,
        ),
        bytes.fromhex(draw(_hex32)),
    )


class StatementFixpointTests(unittest.TestCase):
    @hypothesis.settings(max_examples=100)
    @hypothesis.given(_statements())
    def test_statement_encoding_is_a_fixpoint(
        self, statement: provenance.ProvenanceStatement
    ) -> None:
        encoded = provenance.canonical_encode(statement)
        self.assertTrue(canonical.is_canonical(encoded))
        parsed = provenance.parse_statement(encoded)
        self.assertEqual(statement, parsed)
        self.assertEqual(encoded, provenance.canonical_encode(parsed))
