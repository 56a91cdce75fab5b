import copy
import json
import pathlib
import tempfile
import unittest

import hypothesis
from hypothesis import strategies

from kettle import errors, manifest, util
from tests import DEPENDENCY_BLOB, lock_document


def _encode(document: dict[str, object]) -> bytes:
    return json.dumps(document).encode()


def _as_list(value: object) -> list[dict[str, object]]:
    assert isinstance(value, list)
    return value


def _as_dict(value: object) -> dict[str, object]:
    assert isinstance(value, dict)
    return value


class LockManifestParsingTests(unittest.TestCase):
    def setUp(self) -> None:
        super().setUp()
        self.document = lock_document('cd' * 32)

    def test_parsing_valid_manifest(self) -> None:
        lock = manifest.parse_lock_manifest(_encode(self.document))
        self.assertEqual('https://github.com/org/repo', lock.source.repository)
        self.assertFalse(lock.source.signed)
        self.assertEqual(1, len(lock.dependencies))
        self.assertEqual('dep.serde@1.0.228', lock.dependencies[0].label)
        self.assertEqual('vendor/serde.crate', lock.dependencies[0].local_path)
        self.assertEqual('tool.cc', lock.toolchain[0].label)

    def test_that_dependencies_are_sorted_bytewise(self) -> None:
        deps = _as_list(self.document['dependencies'])
        for name in ('zlib', 'Zed', 'anyhow'):
            deps.append(
                {
                    'name': name,
                    'version': '1.0.0',
                    'purl': f'pkg:cargo/{name}@1.0.0',
                    'sha256': util.sha256_hex(name.encode()),
                }
            )
        lock = manifest.parse_lock_manifest(_encode(self.document))
        self.assertListEqual(
            ['Zed', 'anyhow', 'serde', 'zlib'],
            [entry.name for entry in lock.dependencies],
        )

    def test_duplicate_dependency_names(self) -> None:
        deps = _as_list(self.document['dependencies'])
        deps.append(copy.deepcopy(deps[0]))
        with self.assertRaises(errors.DuplicateDependencyError) as context:
            manifest.parse_lock_manifest(_encode(self.document))
        self.assertEqual('serde', context.exception.name)

    def test_bad_digests(self) -> None:
        for bad in ('AB' * 32, 'ab' * 31, 'zz' * 32, ''):
            document = copy.deepcopy(self.document)
            _as_list(document['dependencies'])[0]['sha256'] = bad
            with self.assertRaises(
                errors.BadDigestError, msg=f'accepted {bad!r}'
            ):
                manifest.parse_lock_manifest(_encode(document))

    def test_commit_id_lengths(self) -> None:
        for commit_id in ('ab' * 20, 'ab' * 32):
            document = copy.deepcopy(self.document)
            _as_dict(document['source'])['commit_id'] = commit_id
            lock = manifest.parse_lock_manifest(_encode(document))
            self.assertEqual(commit_id, lock.source.commit_id)

        _as_dict(self.document['source'])['commit_id'] = 'ab' * 21
        with self.assertRaises(errors.BadDigestError):
            manifest.parse_lock_manifest(_encode(self.document))

    def test_malformed_documents(self) -> None:
        with self.assertRaises(errors.MalformedManifestError):
            manifest.parse_lock_manifest(b'{not json')
        del self.document['toolchain']
        with self.assertRaises(errors.MalformedManifestError):
            manifest.parse_lock_manifest(_encode(self.document))

    def test_unknown_fields_are_rejected(self) -> None:
        self.document['extra'] = True
        with self.assertRaises(errors.MalformedManifestError) as context:
            manifest.parse_lock_manifest(_encode(self.document))
        self.assertIn('extra', context.exception.reason)

    def test_unsafe_local_paths(self) -> None:
        for path in ('/etc/passwd', '../outside', ''):
            document = copy.deepcopy(self.document)
            _as_list(document['dependencies'])[0]['path'] = path
            with self.assertRaises(errors.MalformedManifestError):
                manifest.parse_lock_manifest(_encode(document))

    def test_errors_are_manifest_errors(self) -> None:
        for error in (
            errors.MalformedManifestError('x'),
            errors.DuplicateDependencyError('x'),
            errors.BadDigestError('f', 'v', 64),
        ):
            self.assertIsInstance(error, errors.ManifestError)
            self.assertNotIsInstance(error, ValueError)


class PinnedInputTests(unittest.TestCase):
    def setUp(self) -> None:
        super().setUp()
        self.lock = manifest.parse_lock_manifest(
            _encode(lock_document('cd' * 32))
        )

    def test_matching_blobs(self) -> None:
        report = manifest.verify_pinned_inputs(
            self.lock, {'serde': DEPENDENCY_BLOB}.get
        )
        self.assertEqual(1, len(report.checks))
        self.assertEqual('serde', report.checks[0].name)
        self.assertEqual(
            util.sha256_hex(DEPENDENCY_BLOB), report.checks[0].digest
        )

    def test_substituted_blob(self) -> None:
        with self.assertLogs('kettle.manifest', 'WARNING'):
            with self.assertRaises(errors.InputMismatchError) as context:
                manifest.verify_pinned_inputs(
                    self.lock, {'serde': b'evil'}.get
                )
        self.assertEqual('serde', context.exception.name)
        self.assertEqual(util.sha256_hex(b'evil'), context.exception.actual)

    def test_missing_blob(self) -> None:
        with self.assertRaises(errors.MissingBlobError):
            manifest.verify_pinned_inputs(self.lock, {}.get)

        def raising(name: str) -> bytes:
            raise KeyError(name)

        with self.assertRaises(errors.MissingBlobError):
            manifest.verify_pinned_inputs(self.lock, raising)

    def test_empty_blob(self) -> None:
        document = lock_document('cd' * 32, blob=b'')
        self.assertEqual(
            'e3b0c44298fc1c149afbf4c8996fb924'
            '27ae41e4649b934ca495991b7852b855',
            _as_list(document['dependencies'])[0]['sha256'],
        )
        lock = manifest.parse_lock_manifest(_encode(document))
        report = manifest.verify_pinned_inputs(lock, {'serde': b''}.get)
        self.assertEqual(lock.dependencies[0].digest, report.checks[0].digest)

    @hypothesis.given(
        strategies.integers(0, len(DEPENDENCY_BLOB) - 1),
        strategies.integers(1, 255),
    )
    def test_any_single_byte_change_is_caught(
        self, position: int, delta: int
    ) -> None:
        mutated = bytearray(DEPENDENCY_BLOB)
        mutated[position] ^= delta
        with self.assertRaises(errors.InputMismatchError):
            manifest.verify_pinned_inputs(
                self.lock, {'serde': bytes(mutated)}.get
            )

    def test_directory_resolver(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = pathlib.Path(tmp)
            resolve = manifest.directory_resolver(root, self.lock)
            self.assertIsNone(resolve('serde'))
            (root / 'vendor').mkdir()
            (root / 'vendor' / 'serde.crate').write_bytes(DEPENDENCY_BLOB)
            self.assertEqual(DEPENDENCY_BLOB, resolve('serde'))
            self.assertIsNone(resolve('unknown'))


class SourceTreeTests(unittest.TestCase):
    def setUp(self) -> None:
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.root = pathlib.Path(self._tmp.name)
        (self.root / 'src').mkdir()
        (self.root / 'src' / 'lib.rs').write_bytes(b'pub fn f() {}\n')
        (self.root / 'Cargo.toml').write_bytes(b'[package]\n')

    def test_digest_format(self) -> None:
        expected = util.sha256(
            util.length_prefixed(
                b'Cargo.toml', util.sha256(b'[package]\n')
            )
            + util.length_prefixed(
                b'src/lib.rs', util.sha256(b'pub fn f() {}\n')
            )
        ).hex()
        self.assertEqual(expected, manifest.digest_source_tree(self.root))

    def test_git_directory_is_excluded(self) -> None:
        before = manifest.digest_source_tree(self.root)
        (self.root / '.git').mkdir()
        (self.root / '.git' / 'HEAD').write_bytes(b'ref: refs/heads/main\n')
        self.assertEqual(before, manifest.digest_source_tree(self.root))

    def test_modified_source_is_detected(self) -> None:
        document = lock_document(manifest.digest_source_tree(self.root))
        lock = manifest.parse_lock_manifest(_encode(document))
        manifest.verify_source_tree(lock.source, self.root)

        (self.root / 'src' / 'lib.rs').write_bytes(b'pub fn g() {}\n')
        with self.assertRaises(errors.SourceTreeMismatchError) as context:
            manifest.verify_source_tree(lock.source, self.root)
        self.assertEqual('src.tree', context.exception.name)
        self.assertIsInstance(context.exception, errors.InputMismatchError)


class EnumerationTests(unittest.TestCase):
    def test_leaf_order_and_format(self) -> None:
        document = lock_document('cd' * 32)
        _as_list(document['dependencies']).append(
            {
                'name': 'anyhow',
                'version': '1.0.0',
                'purl': 'pkg:cargo/anyhow@1.0.0',
                'sha256': 'ee' * 32,
            }
        )
        _as_list(document['toolchain']).append(
            {'tool': 'ar', 'sha256': 'ff' * 32}
        )
        lock = manifest.parse_lock_manifest(_encode(document))
        inputs = manifest.enumerate_inputs(lock)
        self.assertListEqual(
            [
                'src.commit',
                'src.tree',
                'lockfile',
                'dep.anyhow@1.0.0',
                'dep.serde@1.0.228',
                'tool.cc',
                'tool.ar',
            ],
            inputs.labels,
        )
        self.assertIsNone(inputs.merkle_root)
        self.assertEqual(
            b'src.commit\x00' + util.sha256(bytes.fromhex('ab' * 20)),
            inputs.ordered_leaves[0].leaf_bytes,
        )
        self.assertEqual(
            b'src.tree\x00' + bytes.fromhex('cd' * 32),
            inputs.ordered_leaves[1].leaf_bytes,
        )
        self.assertEqual(
            b'dep.anyhow@1.0.0\x00' + bytes.fromhex('ee' * 32),
            inputs.ordered_leaves[3].leaf_bytes,
        )

    def test_enumeration_is_deterministic(self) -> None:
        data = _encode(lock_document('cd' * 32))
        first = manifest.enumerate_inputs(manifest.parse_lock_manifest(data))
        second = manifest.enumerate_inputs(manifest.parse_lock_manifest(data))
        self.assertEqual(first.ordered_leaves, second.ordered_leaves)

    @hypothesis.given(
        strategies.permutations(
            ['serde', 'anyhow', 'Zed', 'zlib', 'tokio', 'a', 'aa']
        )
    )
    def test_dependency_order_does_not_matter(
        self, names: list[str]
    ) -> None:
        document = lock_document('cd' * 32)
        document['dependencies'] = [
            {
                'name': name,
                'version': '1.0.0',
                'purl': f'pkg:cargo/{name}@1.0.0',
                'sha256': util.sha256_hex(name.encode()),
            }
            for name in names
        ]
        inputs = manifest.enumerate_inputs(
            manifest.parse_lock_manifest(_encode(document))
        )
        self.assertListEqual(
            [
                'src.commit',
                'src.tree',
                'lockfile',
                'dep.Zed@1.0.0',
                'dep.a@1.0.0',
                'dep.aa@1.0.0',
                'dep.anyhow@1.0.0',
                'dep.serde@1.0.0',
                'dep.tokio@1.0.0',
                'dep.zlib@1.0.0',
                'tool.cc',
            ],
            inputs.labels,
        )

    def test_index_of(self) -> None:
        lock = manifest.parse_lock_manifest(_encode(lock_document('cd' * 32)))
        inputs = manifest.enumerate_inputs(lock)
        self.assertEqual(3, inputs.index_of('dep.serde@1.0.228'))
        with self.assertRaises(errors.UnknownLeafError):
            inputs.index_of('dep.missing@0.0.0')
