"""End-to-end attested build

[run_attested_build][kettle.orchestrator.run_attested_build] executes
the whole pipeline in a fixed order:

1. verify every pinned dependency and the source tree
2. enumerate the inputs and build the input Merkle tree
3. launch the simulated CVM (measure the boot chain)
4. copy source and dependency blobs into a throwaway workspace
5. run the build commands with a scrubbed environment
6. digest the outputs and assemble the provenance statement
7. request a report whose report_data is
   ``SHA-256(provenance.json) || nonce``

Nothing is executed when step 1 fails.

Bundle directory layout:

    artifacts/<name>
    provenance.json     canonical statement bytes
    evidence.json       report and cert chain
    build.log           build command output

"""

import collections.abc
import functools
import io
import os
import pathlib
import secrets
import shutil
import subprocess
import tempfile
import typing

import pydantic

import kettle
from kettle import attestation, errors, manifest, merkle, provenance, util

NONCE_SIZE = provenance.NONCE_SIZE
FIXED_ENVIRONMENT: typing.Mapping[str, str] = {'SOURCE_DATE_EPOCH': '0'}

PROVENANCE_FILE = 'provenance.json'
EVIDENCE_FILE = 'evidence.json'
BUILD_LOG_FILE = 'build.log'
ARTIFACTS_DIR = 'artifacts'

CvmLauncher = typing.Callable[[], attestation.LaunchedCvm]


def fresh_nonce() -> bytes:
    return secrets.token_bytes(NONCE_SIZE)


def _check_output_glob(pattern: str) -> str:
    if not util.safe_relative_path(pattern).parts:
        raise ValueError(f'{pattern!r} does not name anything')
    return pattern


OutputGlob = typing.Annotated[
    str, pydantic.AfterValidator(_check_output_glob)
]
"""A glob relative to the workspace that cannot reach outside it"""


class BuildConfig(pydantic.BaseModel):
    """The project's ``kettle-build.json``"""

    model_config = pydantic.ConfigDict(
        extra='forbid', frozen=True, populate_by_name=True
    )

    build_type: util.AbsoluteURI
    commands: tuple[
        typing.Annotated[tuple[str, ...], pydantic.Field(min_length=1)], ...
    ] = pydantic.Field(min_length=1)
    output_globs: tuple[OutputGlob, ...] = pydantic.Field(
        alias='outputs', min_length=1
    )
    env_allowlist: tuple[str, ...] = ()


def load_build_config(data: bytes) -> BuildConfig:
    try:
        return BuildConfig.model_validate_json(data)
    except pydantic.ValidationError as error:
        raise errors.MalformedBuildConfigError(str(error)) from None


class BuildRequest(pydantic.BaseModel):
    """One request to build `source` from the checkout in `source_dir`

    Dependency blobs are resolved relative to `blob_dir`, which
    defaults to `source_dir`.

    """

    model_config = pydantic.ConfigDict(frozen=True)

    source: manifest.SourceIdentity
    nonce: typing.Annotated[
        util.HexBytes, util.exact_size(NONCE_SIZE)
    ] = pydantic.Field(default_factory=fresh_nonce)
    config_path: pathlib.Path
    source_dir: pathlib.Path
    blob_dir: pathlib.Path | None = None
    invocation_id: str | None = None

    @property
    def effective_invocation_id(self) -> str:
        return self.invocation_id or f'build-{self.nonce.hex()[:16]}'


class Artifact(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    name: str
    content: bytes
    sha256: str

    @classmethod
    def of(cls, name: str, content: bytes) -> typing.Self:
        return cls(name=name, content=content, sha256=util.sha256_hex(content))


class EvidenceBundle(pydantic.BaseModel):
    """Everything a verifier needs, and nothing it has to trust"""

    model_config = pydantic.ConfigDict(frozen=True)

    artifacts: tuple[Artifact, ...]
    provenance_bytes: bytes
    report: attestation.AttestationReport
    chain: attestation.PlatformCertChain
    build_log: bytes = b''

    @property
    def evidence(self) -> attestation.EvidenceDocument:
        return attestation.EvidenceDocument.from_report(
            self.report, self.chain
        )

    def statement(self) -> provenance.ProvenanceStatement:
        return provenance.parse_statement(self.provenance_bytes)


def _scrubbed_environment(
    config: BuildConfig, workspace: pathlib.Path
) -> dict[str, str]:
    env = {
        name: os.environ[name]
        for name in config.env_allowlist
        if name in os.environ
    }
    env.update(FIXED_ENVIRONMENT)
    env['HOME'] = str(workspace)
    return env


def _resolve_command(
    command: str, workspace: pathlib.Path, env: typing.Mapping[str, str]
) -> str:
    if '/' in command:
        path = workspace / command
        if path.is_file() and os.access(path, os.X_OK):
            return str(path)
        raise errors.CommandNotFoundError(command)
    search_path = os.pathsep.join(os.get_exec_path(dict(env)))
    resolved = shutil.which(command, path=search_path)
    if resolved is None:
        raise errors.CommandNotFoundError(command)
    return resolved


def execute_build(
    config: BuildConfig,
    workspace: pathlib.Path,
    *,
    log: typing.BinaryIO | None = None,
) -> int:
    """Run each configured command in `workspace`

    Children see only the allow-listed environment variables plus
    ``SOURCE_DATE_EPOCH=0`` and ``HOME`` set to the workspace.  Output
    from both streams is appended to `log`.  Returns 0 or raises a
    [kettle.errors.BuildFailedError][] subclass.

    """
    logger = util.get_logger_for(execute_build)
    env = _scrubbed_environment(config, workspace)
    for argv in config.commands:
        executable = _resolve_command(argv[0], workspace, env)
        logger.debug('running %r in %s', argv, workspace)
        if log is not None:
            log.write(b'$ ' + ' '.join(argv).encode() + b'\n')
        result = subprocess.run(
            [executable, *argv[1:]],
            cwd=workspace,
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            check=False,
        )
        if log is not None:
            log.write(result.stdout)
        if result.returncode != 0:
            logger.error(
                'build command %r exited with status %d',
                argv,
                result.returncode,
            )
            raise errors.NonZeroExitError(argv, result.returncode)
    return 0


def _match_outputs(
    workspace: pathlib.Path, globs: collections.abc.Iterable[str]
) -> dict[str, pathlib.Path]:
    matched = {}
    for pattern in globs:
        for path in workspace.glob(pattern):
            if path.is_file():
                matched[path.relative_to(workspace).as_posix()] = path
    if not matched:
        raise errors.NoOutputsMatchedError(globs)
    return {name: matched[name] for name in sorted(matched)}


def collect_outputs(
    workspace: pathlib.Path, globs: collections.abc.Iterable[str]
) -> tuple[Artifact, ...]:
    """Every file matching `globs`, read once and ordered by name"""
    return tuple(
        Artifact.of(name, path.read_bytes())
        for name, path in _match_outputs(workspace, globs).items()
    )


def digest_outputs(
    workspace: pathlib.Path, globs: collections.abc.Iterable[str]
) -> list[tuple[str, str]]:
    """``(relative name, sha256 hex)`` for every matching file, by name"""
    return subjects_of(collect_outputs(workspace, globs))


def subjects_of(
    artifacts: collections.abc.Iterable[Artifact],
) -> list[tuple[str, str]]:
    return [(artifact.name, artifact.sha256) for artifact in artifacts]


def populate_workspace(
    workspace: pathlib.Path,
    source_dir: pathlib.Path,
    lock: manifest.LockManifest,
    blob_resolver: manifest.BlobResolver,
) -> None:
    """Copy the source tree and place dependency blobs at their paths"""
    shutil.copytree(
        source_dir,
        workspace,
        ignore=shutil.ignore_patterns('.git'),
        dirs_exist_ok=True,
    )
    for entry in lock.dependencies:
        if entry.local_path is None:
            continue
        blob = blob_resolver(entry.name)
        if blob is None:
            raise errors.MissingBlobError(entry.name)
        target = workspace / util.safe_relative_path(entry.local_path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(blob)


class Orchestrator:
    """Runs one attested build

    `launch_cvm` boots the CVM the build runs in.  The orchestrator is
    not reentrant; concurrent builds use separate instances.

    """

    def __init__(
        self,
        launch_cvm: CvmLauncher,
        *,
        clock: util.Clock = util.utc_now,
        blob_resolver: manifest.BlobResolver | None = None,
        kettle_version: str | None = None,
    ) -> None:
        self.launch_cvm = launch_cvm
        self.clock = clock
        self.blob_resolver = blob_resolver
        self.kettle_version = kettle_version or kettle.version
        self.logger = util.get_logger_for(self)

    def run(
        self, request: BuildRequest, lock: manifest.LockManifest
    ) -> EvidenceBundle:
        started_on = self.clock()
        if request.source.commit_id != lock.source.commit_id:
            raise errors.InputMismatchError(
                'src.commit', lock.source.commit_id, request.source.commit_id
            )
        config = load_build_config(request.config_path.read_bytes())
        resolver = self.blob_resolver or manifest.directory_resolver(
            request.blob_dir or request.source_dir, lock
        )
        manifest.verify_pinned_inputs(lock, resolver)
        manifest.verify_source_tree(lock.source, request.source_dir)

        inputs = manifest.enumerate_inputs(lock)
        merkle.build_tree(inputs)
        cvm = self.launch_cvm()
        self.logger.info(
            'building %s@%s in CVM %s',
            lock.source.repository,
            lock.source.commit_id,
            cvm.measurement.hex(),
        )

        log = io.BytesIO()
        with tempfile.TemporaryDirectory(prefix='kettle-build-') as tmp:
            workspace = pathlib.Path(tmp)
            populate_workspace(workspace, request.source_dir, lock, resolver)
            execute_build(config, workspace, log=log)
            artifacts = collect_outputs(workspace, config.output_globs)
        finished_on = self.clock()

        statement = provenance.assemble_statement(
            inputs,
            lock,
            subjects_of(artifacts),
            provenance.BuildMetadata(
                build_type=config.build_type,
                tee_platform=cvm.platform.tee_platform,
                kettle_version=self.kettle_version,
                invocation_id=request.effective_invocation_id,
                started_on=started_on,
                finished_on=finished_on,
            ),
            request.nonce,
        )
        provenance_bytes = provenance.canonical_encode(statement)
        report = cvm.attest(util.sha256(provenance_bytes) + request.nonce)
        self.logger.info(
            'attested %d artifact(s) with statement digest %s',
            len(artifacts),
            util.sha256_hex(provenance_bytes),
        )
        return EvidenceBundle(
            artifacts=artifacts,
            provenance_bytes=provenance_bytes,
            report=report,
            chain=cvm.chain,
            build_log=log.getvalue(),
        )


def run_attested_build(
    request: BuildRequest,
    lock: manifest.LockManifest,
    platform: attestation.SimulatedPlatform,
    boot_fixture: typing.Sequence[attestation.BootComponent],
    *,
    clock: util.Clock = util.utc_now,
    out_dir: pathlib.Path | None = None,
) -> EvidenceBundle:
    """Build `request` on a freshly launched CVM

    The bundle is also written to `out_dir` when one is given.

    """
    orchestrator = Orchestrator(
        functools.partial(platform.launch, boot_fixture), clock=clock
    )
    bundle = orchestrator.run(request, lock)
    if out_dir is not None:
        write_bundle(bundle, out_dir)
    return bundle


def write_bundle(bundle: EvidenceBundle, out_dir: pathlib.Path) -> None:
    artifacts_dir = out_dir / ARTIFACTS_DIR
    artifacts_dir.mkdir(parents=True, exist_ok=True)
    for artifact in bundle.artifacts:
        target = artifacts_dir / util.safe_relative_path(artifact.name)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(artifact.content)
    (out_dir / PROVENANCE_FILE).write_bytes(bundle.provenance_bytes)
    (out_dir / EVIDENCE_FILE).write_bytes(
        bundle.evidence.model_dump_json(by_alias=True, indent=2).encode()
    )
    (out_dir / BUILD_LOG_FILE).write_bytes(bundle.build_log)


def _read_required(path: pathlib.Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise errors.MissingFileError(path) from None


def read_bundle(bundle_dir: pathlib.Path) -> EvidenceBundle:
    """Load a bundle directory

    The provenance bytes are returned exactly as stored; whether they
    are canonical and match the report is for the verifier to decide.

    """
    provenance_bytes = _read_required(bundle_dir / PROVENANCE_FILE)
    evidence_bytes = _read_required(bundle_dir / EVIDENCE_FILE)
    artifacts_dir = bundle_dir / ARTIFACTS_DIR
    if not artifacts_dir.is_dir():
        raise errors.MissingFileError(artifacts_dir)

    try:
        evidence = attestation.EvidenceDocument.model_validate_json(
            evidence_bytes
        )
        report = evidence.report
    except pydantic.ValidationError as error:
        raise errors.CorruptBundleError(
            f'{EVIDENCE_FILE}: {error}'
        ) from None
    except errors.AttestationError as error:
        raise errors.CorruptBundleError(f'{EVIDENCE_FILE}: {error}') from None

    artifacts = tuple(
        Artifact.of(
            path.relative_to(artifacts_dir).as_posix(), path.read_bytes()
        )
        for path in sorted(artifacts_dir.rglob('*'))
        if path.is_file()
    )
    try:
        build_log = (bundle_dir / BUILD_LOG_FILE).read_bytes()
    except FileNotFoundError:
        build_log = b''
    return EvidenceBundle(
        artifacts=artifacts,
        provenance_bytes=provenance_bytes,
        report=report,
        chain=evidence.chain,
        build_log=build_log,
    )
