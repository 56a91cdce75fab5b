"""The ``kettle`` command line

Every subcommand prints a human readable summary, or a JSON document
when ``--json`` is given.  Exit codes are shared by all commands:

* 0 -- success
* 1 -- the build or verification failed
* 2 -- usage error or malformed input

"""

import asyncio
import collections.abc
import contextlib
import json
import logging
import pathlib
import sys
import tempfile
import typing

import click
import pydantic

import kettle
from kettle import (
    attestation,
    channels,
    confidential,
    errors,
    manifest,
    merkle,
    orchestrator,
    provenance,
    util,
    verifier,
)

EXIT_FAILURE = 1
EXIT_MALFORMED = 2

_MALFORMED_INPUT: tuple[type[BaseException], ...] = (
    errors.ManifestError,
    errors.MalformedBuildConfigError,
    errors.BundleError,
    errors.AllowListError,
    errors.AttestationError,
    errors.ProvenanceError,
    errors.MerkleError,
    pydantic.ValidationError,
    OSError,
)

_PLATFORMS = [platform.label for platform in attestation.PlatformId]


class HexParamType(click.ParamType):
    """Lowercase or uppercase hex of an exact byte length"""

    name = 'hex'

    def __init__(self, size: int) -> None:
        self.size = size

    def convert(
        self,
        value: object,
        param: click.Parameter | None,
        ctx: click.Context | None,
    ) -> bytes:
        if isinstance(value, bytes):
            return value
        try:
            result = bytes.fromhex(str(value))
        except ValueError:
            self.fail(f'{value!r} is not hex', param, ctx)
        if len(result) != self.size:
            self.fail(
                f'expected {self.size} bytes, got {len(result)}', param, ctx
            )
        return result


class PlatformParamType(click.Choice):
    name = 'platform'

    def __init__(self) -> None:
        super().__init__(_PLATFORMS, case_sensitive=False)

    def convert(
        self,
        value: object,
        param: click.Parameter | None,
        ctx: click.Context | None,
    ) -> attestation.PlatformId:
        if isinstance(value, attestation.PlatformId):
            return value
        label = super().convert(value, param, ctx)
        return attestation.PlatformId.from_label(label)


NONCE = HexParamType(32)
MEASUREMENT = HexParamType(attestation.MEASUREMENT_SIZE)
PLATFORM = PlatformParamType()

_existing_file = click.Path(
    exists=True, dir_okay=False, path_type=pathlib.Path
)
_existing_dir = click.Path(
    exists=True, file_okay=False, path_type=pathlib.Path
)

_json_option = click.option(
    '--json',
    'as_json',
    is_flag=True,
    help='Write a machine-readable JSON document to stdout.',
)
_boot_fixture_option = click.option(
    '--boot-fixture',
    type=_existing_file,
    help='Boot chain JSON file. Defaults to the reference Kettle image.',
)
_platform_option = click.option(
    '--platform',
    type=PLATFORM,
    default='sim',
    show_default=True,
    help='TEE platform.',
)
_min_version_option = click.option(
    '--min-version',
    default='0.0.0',
    show_default=True,
    help='Oldest acceptable Kettle version.',
)


def _emit(document: object) -> None:
    click.echo(
        json.dumps(document, indent=2, default=util.json_serialize_hook)
    )


def _abort(message: str, code: int) -> typing.NoReturn:
    click.echo(f'Error: {message}', err=True)
    sys.exit(code)


@contextlib.contextmanager
def _reporting_errors() -> collections.abc.Iterator[None]:
    """Map library errors onto the exit code contract"""
    try:
        yield
    except _MALFORMED_INPUT as error:
        _abort(str(error), EXIT_MALFORMED)
    except errors.KettleError as error:
        _abort(str(error), EXIT_FAILURE)


def _boot_chain(
    path: pathlib.Path | None, kettle_version: str | None = None
) -> tuple[attestation.BootComponent, ...]:
    if path is None:
        return attestation.reference_boot_chain(kettle_version)
    return attestation.load_boot_fixture(path.read_bytes())


@click.group(context_settings={'help_option_names': ['-h', '--help']})
@click.version_option(kettle.version, '--version')
@click.option(
    '--log-level',
    type=click.Choice(
        ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
        case_sensitive=False,
    ),
    default='WARNING',
    show_default=True,
    metavar='LEVEL',
    help='Set the logging level.',
)
def main(log_level: str) -> None:
    """Attested builds on a simulated TEE platform."""
    logging.basicConfig(
        format='%(levelname)s %(name)s: %(message)s',
        level=getattr(logging, log_level.upper()),
    )


@main.command()
@click.option('--lock', 'lock_path', type=_existing_file, required=True)
@click.option('--config', 'config_path', type=_existing_file, required=True)
@click.option(
    '--out',
    'out_dir',
    type=click.Path(file_okay=False, path_type=pathlib.Path),
    required=True,
    help='Directory the evidence bundle is written to.',
)
@click.option(
    '--source',
    'source_dir',
    type=_existing_dir,
    help='Source checkout. Defaults to the directory holding --lock.',
)
@click.option('--nonce', type=NONCE, help='Build nonce, random if omitted.')
@_boot_fixture_option
@click.option(
    '--platform-keys', type=_existing_file, required=True, metavar='PATH'
)
@_json_option
def build(
    lock_path: pathlib.Path,
    config_path: pathlib.Path,
    out_dir: pathlib.Path,
    source_dir: pathlib.Path | None,
    nonce: bytes | None,
    boot_fixture: pathlib.Path | None,
    platform_keys: pathlib.Path,
    as_json: bool,
) -> None:
    """Run an attested build and write its evidence bundle."""
    with _reporting_errors():
        lock = manifest.parse_lock_manifest(lock_path.read_bytes())
        keys = attestation.PlatformKeys.load(platform_keys.read_bytes())
        request = orchestrator.BuildRequest(
            source=lock.source,
            nonce=nonce or orchestrator.fresh_nonce(),
            config_path=config_path,
            source_dir=source_dir or lock_path.parent,
        )
        bundle = orchestrator.run_attested_build(
            request,
            lock,
            keys.platform(),
            _boot_chain(boot_fixture),
            out_dir=out_dir,
        )

    subjects = [
        {'name': artifact.name, 'sha256': artifact.sha256}
        for artifact in bundle.artifacts
    ]
    if as_json:
        _emit(
            {
                'bundle': out_dir,
                'subjects': subjects,
                'measurement_hex': bundle.report.measurement,
                'nonce_hex': request.nonce,
                'statement_digest_hex': bundle.report.report_data[:32],
            }
        )
        return
    for subject in subjects:
        click.echo(f'{subject["sha256"]}  {subject["name"]}')
    click.echo(f'measurement: {bundle.report.measurement.hex()}')
    click.echo(f'nonce: {request.nonce.hex()}')
    click.echo(f'bundle written to {out_dir}')


@main.command()
@click.option('--bundle', 'bundle_dir', type=_existing_dir, required=True)
@click.option('--allowlist', type=_existing_file, required=True)
@click.option('--truststore', type=_existing_file, required=True)
@click.option('--expect-repo', required=True, help='Expected repository.')
@click.option('--expect-ref', required=True, help='Expected source ref.')
@click.option('--expect-nonce', type=NONCE, required=True)
@click.option(
    '--expect-builder',
    default=provenance.BUILDER_ID,
    show_default=True,
    help='Expected builder.id.',
)
@_min_version_option
@_platform_option
@_json_option
def verify(
    bundle_dir: pathlib.Path,
    allowlist: pathlib.Path,
    truststore: pathlib.Path,
    expect_repo: str,
    expect_ref: str,
    expect_nonce: bytes,
    expect_builder: str,
    min_version: str,
    platform: attestation.PlatformId,
    as_json: bool,
) -> None:
    """Verify an evidence bundle offline."""
    with _reporting_errors():
        policy = verifier.VerificationPolicy(
            allowlist=verifier.load_allowlist(allowlist.read_bytes()),
            min_version=min_version,
            required_platform=platform,
            expected_external_parameters=provenance.ExternalParameters(
                repository=expect_repo, ref=expect_ref
            ),
            expected_nonce=expect_nonce,
            expected_builder_id=expect_builder,
        )
        store = attestation.TrustStore.load(truststore.read_bytes())
        outcome = verifier.verify_bundle(
            orchestrator.read_bundle(bundle_dir), policy, store
        )

    if as_json:
        _emit(outcome.model_dump(mode='json'))
    else:
        for result in outcome.step_results:
            if result.passed is None:
                status = 'not evaluated'
            elif result.passed:
                status = 'passed'
            else:
                status = f'FAILED ({result.reason})'
            click.echo(f'{result.step}: {status}')
    if not outcome.passed:
        sys.exit(EXIT_FAILURE)


@main.group()
def allowlist() -> None:
    """Manage launch measurement allow-lists."""


def _measurement_from(
    measurement: bytes | None,
    boot_fixture: pathlib.Path | None,
    kettle_version: str | None,
) -> bytes:
    if measurement is not None:
        return measurement
    return attestation.measure_boot_chain(
        _boot_chain(boot_fixture, kettle_version)
    )


@allowlist.command('add')
@click.option(
    '--allowlist',
    'allowlist_path',
    type=click.Path(dir_okay=False, path_type=pathlib.Path),
    required=True,
    help='Allow-list file, created when missing.',
)
@click.option('--measurement', type=MEASUREMENT)
@_boot_fixture_option
@click.option('--kettle-version', required=True)
@_platform_option
@click.option('--min-firmware', type=click.IntRange(0), default=0)
@_json_option
def allowlist_add(
    allowlist_path: pathlib.Path,
    measurement: bytes | None,
    boot_fixture: pathlib.Path | None,
    kettle_version: str,
    platform: attestation.PlatformId,
    min_firmware: int,
    as_json: bool,
) -> None:
    """Add a measurement to an allow-list.

    Without --measurement the value is computed from --boot-fixture, or
    from the reference image for --kettle-version.
    """
    with _reporting_errors():
        entries: tuple[verifier.AllowListEntry, ...] = ()
        if allowlist_path.exists():
            entries = verifier.load_allowlist(allowlist_path.read_bytes())
        entry = verifier.AllowListEntry(
            measurement=_measurement_from(
                measurement, boot_fixture, kettle_version
            ),
            kettle_version=kettle_version,
            platform_id=platform,
            min_firmware=min_firmware,
        )
        entries = verifier.add_entry(entries, entry)
        allowlist_path.write_bytes(verifier.dump_allowlist(entries))

    if as_json:
        _emit({'entry': entry, 'entries': len(entries)})
    else:
        click.echo(f'added {entry.measurement.hex()} ({len(entries)} entries)')


@allowlist.command('check')
@click.option(
    '--allowlist', 'allowlist_path', type=_existing_file, required=True
)
@click.option('--measurement', type=MEASUREMENT)
@_boot_fixture_option
@click.option(
    '--kettle-version', help='Reference image version to measure.'
)
@click.option('--firmware', type=click.IntRange(0), default=0)
@_min_version_option
@_platform_option
@_json_option
def allowlist_check(
    allowlist_path: pathlib.Path,
    measurement: bytes | None,
    boot_fixture: pathlib.Path | None,
    kettle_version: str | None,
    firmware: int,
    min_version: str,
    platform: attestation.PlatformId,
    as_json: bool,
) -> None:
    """Check whether a measurement is accepted."""
    with _reporting_errors():
        policy = verifier.AllowListPolicy(
            allowlist=verifier.load_allowlist(allowlist_path.read_bytes()),
            min_version=min_version,
            required_platform=platform,
        )
        match = verifier.check_allowlist(
            _measurement_from(measurement, boot_fixture, kettle_version),
            firmware,
            policy,
        )

    if as_json:
        _emit(match)
    elif match.entry is not None:
        click.echo(f'accepted by {match.entry.kettle_version} entry')
    else:
        click.echo(f'rejected: {match.reason}')
    if not match:
        sys.exit(EXIT_FAILURE)


@main.group()
def inclusion() -> None:
    """Selective disclosure of individual inputs."""


@inclusion.command('prove')
@click.option('--lock', 'lock_path', type=_existing_file, required=True)
@click.option('--dependency', help='Dependency name to prove.')
@click.option('--label', help='Leaf label, for example src.commit.')
@click.option('--index', type=click.IntRange(0), help='Leaf index.')
@click.option(
    '--out',
    'out_path',
    type=click.Path(dir_okay=False, path_type=pathlib.Path),
    help='Write the proof to this file.',
)
@_json_option
def inclusion_prove(
    lock_path: pathlib.Path,
    dependency: str | None,
    label: str | None,
    index: int | None,
    out_path: pathlib.Path | None,
    as_json: bool,
) -> None:
    """Prove that one input is part of the input Merkle root."""
    if sum(x is not None for x in (dependency, label, index)) != 1:
        raise click.UsageError(
            'exactly one of --dependency, --label or --index is required'
        )
    with _reporting_errors():
        lock = manifest.parse_lock_manifest(lock_path.read_bytes())
        inputs = manifest.enumerate_inputs(lock)
        tree = merkle.build_tree(inputs)
        if dependency is not None:
            try:
                label = lock.dependency(dependency).label
            except KeyError:
                raise errors.UnknownLeafError(f'dep.{dependency}') from None
        if label is not None:
            index = inputs.index_of(label)
        proof = merkle.prove_inclusion(tree, typing.cast(int, index))
        if out_path is not None:
            out_path.write_text(
                proof.model_dump_json(by_alias=True, indent=2)
            )

    leaf = inputs.ordered_leaves[proof.leaf_index]
    if as_json:
        _emit(
            {
                'root_hex': tree.root,
                'label': leaf.label,
                'proof': proof.model_dump(by_alias=True, mode='json'),
            }
        )
    else:
        click.echo(f'root: {tree.root.hex()}')
        click.echo(f'leaf {proof.leaf_index}: {leaf.label}')
        click.echo(f'siblings: {len(proof.siblings)}')


@inclusion.command('verify')
@click.option('--proof', 'proof_path', type=_existing_file, required=True)
@click.option('--root', type=NONCE, help='Published input Merkle root.')
@click.option(
    '--bundle',
    'bundle_dir',
    type=_existing_dir,
    help='Take the root from this bundle instead of --root.',
)
@click.option('--label', help='Label of the disclosed leaf.')
@click.option('--digest', type=NONCE, help='Digest of the disclosed leaf.')
@_json_option
def inclusion_verify(
    proof_path: pathlib.Path,
    root: bytes | None,
    bundle_dir: pathlib.Path | None,
    label: str | None,
    digest: bytes | None,
    as_json: bool,
) -> None:
    """Check an inclusion proof against a root.

    With --label and --digest the proof must also be for exactly that
    leaf.
    """
    if (root is None) == (bundle_dir is None):
        raise click.UsageError('exactly one of --root or --bundle is required')
    if (label is None) != (digest is None):
        raise click.UsageError('--label and --digest go together')
    with _reporting_errors():
        proof = merkle.InclusionProof.model_validate_json(
            proof_path.read_bytes()
        )
        if bundle_dir is not None:
            bundle = orchestrator.read_bundle(bundle_dir)
            root = bundle.statement().input_merkle_root
        root = typing.cast(bytes, root)
        included = merkle.verify_inclusion(root, proof)
        leaf_matches = True
        if label is not None and digest is not None:
            leaf = manifest.make_leaf(label, digest)
            leaf_matches = (
                merkle.hash_leaf(leaf.leaf_bytes) == proof.leaf_digest
            )

    passed = included and leaf_matches
    if as_json:
        _emit(
            {
                'passed': passed,
                'included': included,
                'leaf_matches': leaf_matches,
                'root_hex': root,
            }
        )
    elif passed:
        click.echo(f'leaf {proof.leaf_index} is included in {root.hex()}')
    elif not included:
        click.echo(f'proof does not lead to {root.hex()}')
    else:
        click.echo('proof is for a different leaf')
    if not passed:
        sys.exit(EXIT_FAILURE)


@main.command()
@click.option(
    '--out',
    'out_path',
    type=click.Path(dir_okay=False, path_type=pathlib.Path),
    required=True,
    help='Platform key file to write.',
)
@click.option('--seed', type=NONCE, help='32-byte seed for reproducible keys.')
@_platform_option
@click.option(
    '--firmware-version', type=click.IntRange(0, 0xFFFF_FFFF), default=1
)
@click.option(
    '--truststore',
    type=click.Path(dir_okay=False, path_type=pathlib.Path),
    help='Also write a trust store holding the root key.',
)
@_json_option
def keygen(
    out_path: pathlib.Path,
    seed: bytes | None,
    platform: attestation.PlatformId,
    firmware_version: int,
    truststore: pathlib.Path | None,
    as_json: bool,
) -> None:
    """Provision simulated root and platform keys."""
    with _reporting_errors():
        keys = attestation.platform_keygen(
            seed, platform_id=platform, firmware_version=firmware_version
        )
        out_path.write_bytes(keys.dump())
        if truststore is not None:
            truststore.write_bytes(keys.trust_store().dump())

    chain = keys.chain
    if as_json:
        _emit({'key_file': out_path, 'chain': chain})
    else:
        click.echo(f'root key id: {chain.root_key_id.hex()}')
        click.echo(f'platform key: {chain.platform_public_key.hex()}')


@main.command()
@_boot_fixture_option
@click.option(
    '--kettle-version', help='Reference image version to measure.'
)
@_json_option
def measure(
    boot_fixture: pathlib.Path | None,
    kettle_version: str | None,
    as_json: bool,
) -> None:
    """Print the launch measurement of a boot chain."""
    with _reporting_errors():
        measurement = attestation.measure_boot_chain(
            _boot_chain(boot_fixture, kettle_version)
        )
    if as_json:
        _emit({'measurement_hex': measurement})
    else:
        click.echo(measurement.hex())


_DEMO_SOURCE = b'fn main() { println!("hello from kettle"); }\n'
_DEMO_BLOB = b'serde 1.0.228 (vendored)\n'


def _write_demo_project(
    root: pathlib.Path,
) -> tuple[manifest.LockManifest, orchestrator.BuildConfig]:
    """A tiny project whose build concatenates source and dependency"""
    (root / 'src').mkdir()
    (root / 'src' / 'main.rs').write_bytes(_DEMO_SOURCE)
    (root / 'vendor').mkdir()
    (root / 'vendor' / 'serde.crate').write_bytes(_DEMO_BLOB)
    lock = manifest.LockManifest.model_validate(
        {
            'source': {
                'repository': 'https://github.com/org/repo',
                'ref': 'refs/heads/main',
                'commit_id': util.sha256_hex(b'demo commit')[:40],
                'tree_digest': manifest.digest_source_tree(root),
            },
            'lockfile_sha256': util.sha256_hex(b'demo lockfile'),
            'dependencies': [
                {
                    'name': 'serde',
                    'version': '1.0.228',
                    'purl': 'pkg:cargo/serde@1.0.228',
                    'sha256': util.sha256_hex(_DEMO_BLOB),
                    'path': 'vendor/serde.crate',
                }
            ],
            'toolchain': [],
        }
    )
    config = orchestrator.BuildConfig(
        build_type='https://kettle.confidential.ai/cargo-build/v1',
        commands=(
            ('sh', '-c', 'cat src/main.rs vendor/serde.crate > my-app'),
        ),
        output_globs=('my-app',),
        env_allowlist=('PATH',),
    )
    return lock, config


_TRANSPORTS: dict[str, channels.TransportFactory] = {
    'in-process': channels.InProcessTransport,
    'socket': channels.SocketTransport,
}


@main.command('confidential-demo')
@click.option(
    '--tamper',
    type=click.Choice([t.value for t in confidential.Tamper]),
    help='Make the host misbehave in this way.',
)
@click.option(
    '--transport',
    type=click.Choice(list(_TRANSPORTS)),
    default='in-process',
    show_default=True,
)
@click.option('--seed', type=NONCE, help='Seed for the platform keys.')
@_json_option
def confidential_demo(
    tamper: str | None,
    transport: str,
    seed: bytes | None,
    as_json: bool,
) -> None:
    """Run a pre-attested confidential build between local actors."""
    keys = attestation.platform_keygen(seed)
    boot_chain = attestation.reference_boot_chain()
    policy = verifier.AllowListPolicy(
        allowlist=(
            verifier.AllowListEntry(
                measurement=attestation.measure_boot_chain(boot_chain),
                kettle_version=kettle.version,
                platform_id=keys.platform_id,
            ),
        ),
    )
    with tempfile.TemporaryDirectory(prefix='kettle-demo-') as tmp:
        lock, config = _write_demo_project(pathlib.Path(tmp))
        requester = confidential.Requester(
            lock,
            config,
            pathlib.Path(tmp),
            policy=policy,
            store=keys.trust_store(),
        )
        host = confidential.HostActor(
            keys.platform(),
            boot_chain,
            transport_factory=_TRANSPORTS[transport],
            tamper=confidential.Tamper(tamper) if tamper else None,
        )
        try:
            result = asyncio.run(
                confidential.confidential_build_session(requester, host)
            )
        except errors.AbortedBeforeDisclosureError as error:
            transcript = typing.cast(
                confidential.SessionTranscript, error.transcript
            )
            if as_json:
                _emit(
                    {
                        'aborted': error.reason,
                        'plaintext_source_bytes': (
                            transcript.plaintext_source_bytes()
                        ),
                        'transcript': transcript.model_dump(
                            mode='json', by_alias=True
                        ),
                    }
                )
            _abort(f'AbortedBeforeDisclosure: {error.reason}', EXIT_FAILURE)
        except errors.KettleError as error:
            _abort(str(error), EXIT_FAILURE)

    outcome = verifier.verify_bundle(
        result.bundle,
        verifier.VerificationPolicy(
            allowlist=policy.allowlist,
            expected_external_parameters=provenance.ExternalParameters(
                repository=lock.source.repository, ref=lock.source.ref
            ),
            expected_nonce=requester.build_nonce,
        ),
        keys.trust_store(),
    )
    transcript = result.transcript
    if as_json:
        _emit(
            {
                'transcript': transcript.model_dump(
                    mode='json', by_alias=True
                ),
                'measurements_match': transcript.measurements_match,
                'verification': outcome.model_dump(mode='json'),
            }
        )
    else:
        for observation in transcript.host_observed:
            opaque = ' (ciphertext)' if observation.opaque else ''
            click.echo(
                f'host saw {observation.direction} {observation.kind} '
                f'{observation.length} bytes{opaque}'
            )
        click.echo(f'measurements match: {transcript.measurements_match}')
        click.echo(f'bundle verified: {outcome.passed}')
    if not outcome.passed:
        sys.exit(EXIT_FAILURE)
