import dataclasses
import datetime
import json
import pathlib
import typing

from kettle import attestation, manifest, orchestrator, util

T = typing.TypeVar('T')

KEY_SEED = bytes(range(32))
BUILD_NONCE = bytes.fromhex('11' * 32)
STARTED_ON = datetime.datetime(2025, 1, 1, tzinfo=datetime.UTC)
REPOSITORY = 'https://github.com/org/repo'
REF = 'refs/heads/main'
COMMIT_ID = 'ab' * 20
BUILD_TYPE = 'https://kettle.confidential.ai/cargo-build/v1'

SOURCE_FILE = b'int main(void) { return 0; }\n'
DEPENDENCY_BLOB = b'vendored dependency archive\n'


def assert_is_not_none(value: T | None, *, msg: str | None = None) -> T:
    """Help mypy understand that assertIsNotNone is fatal if value is None"""
    if value is None:
        raise AssertionError('unexpectedly None' if msg is None else msg)
    return value


def frozen_clock() -> datetime.datetime:
    return STARTED_ON


def fixed_keys() -> attestation.PlatformKeys:
    return attestation.platform_keygen(KEY_SEED)


def lock_document(
    tree_digest: str, *, blob: bytes = DEPENDENCY_BLOB
) -> dict[str, object]:
    """A lock manifest with one dependency and one toolchain binary"""
    return {
        'source': {
            'repository': REPOSITORY,
            'ref': REF,
            'commit_id': COMMIT_ID,
            'tree_digest': tree_digest,
        },
        'lockfile_sha256': util.sha256_hex(b'Cargo.lock'),
        'dependencies': [
            {
                'name': 'serde',
                'version': '1.0.228',
                'purl': 'pkg:cargo/serde@1.0.228',
                'sha256': util.sha256_hex(blob),
                'path': 'vendor/serde.crate',
            }
        ],
        'toolchain': [{'tool': 'cc', 'sha256': util.sha256_hex(b'cc')}],
    }


@dataclasses.dataclass
class Project:
    """A buildable project laid out below `root`

    The source checkout lives in ``root/source`` so that the lock and
    build configuration files are not part of the source tree digest.

    """

    root: pathlib.Path
    source_dir: pathlib.Path
    lock_path: pathlib.Path
    config_path: pathlib.Path
    lock: manifest.LockManifest
    config: orchestrator.BuildConfig

    def request(
        self, nonce: bytes = BUILD_NONCE
    ) -> orchestrator.BuildRequest:
        return orchestrator.BuildRequest(
            source=self.lock.source,
            nonce=nonce,
            config_path=self.config_path,
            source_dir=self.source_dir,
        )


def make_project(
    root: pathlib.Path,
    *,
    commands: typing.Sequence[typing.Sequence[str]] = (
        (
            'sh',
            '-c',
            'mkdir -p out && cat main.c vendor/serde.crate > out/app',
        ),
        ('sh', '-c', 'printf built > out/notes.txt'),
    ),
    outputs: typing.Sequence[str] = ('out/*',),
) -> Project:
    source_dir = root / 'source'
    (source_dir / 'vendor').mkdir(parents=True)
    (source_dir / 'main.c').write_bytes(SOURCE_FILE)
    (source_dir / 'vendor' / 'serde.crate').write_bytes(DEPENDENCY_BLOB)

    lock_path = root / 'kettle.lock.json'
    lock_path.write_text(
        json.dumps(lock_document(manifest.digest_source_tree(source_dir)))
    )
    config_path = root / 'kettle-build.json'
    config_path.write_text(
        json.dumps(
            {
                'build_type': BUILD_TYPE,
                'commands': [list(argv) for argv in commands],
                'outputs': list(outputs),
                'env_allowlist': ['PATH'],
            }
        )
    )
    return Project(
        root=root,
        source_dir=source_dir,
        lock_path=lock_path,
        config_path=config_path,
        lock=manifest.parse_lock_manifest(lock_path.read_bytes()),
        config=orchestrator.load_build_config(config_path.read_bytes()),
    )
