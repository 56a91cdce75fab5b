"""Pre-attested confidential builds

The requester only reveals its source to a CVM it has verified first.
A session runs in three stages:

1. The requester picks a fresh ``nonce_p``.  The host launches a CVM
   with ``host_data = nonce_p``; inside, the CVM creates an X25519
   channel key and obtains a report whose report_data is
   ``SHA-256(channel_public_key || nonce_p) || 0x00 * 32``.
2. The requester checks the report chain, the measurement against its
   allow-list, ``host_data`` against ``nonce_p`` and the channel key
   binding.  Nothing else is sent if any check fails.
3. The source is sealed to the channel key and sent through the host.
   The CVM unseals it and runs the standard attested build, which
   produces a second report over the provenance digest and a fresh
   build nonce.

The channel is a one-shot sealed payload (X25519, HKDF-SHA256 and
ChaCha20-Poly1305) rather than a TLS session.

The host sits between the requester and the CVM and records every
message it relays.  It can be told to misbehave to exercise stage 2.

"""

import enum
import os
import pathlib
import secrets
import tempfile
import typing

import pydantic
from cryptography import exceptions
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import x25519
from cryptography.hazmat.primitives.ciphers import aead
from cryptography.hazmat.primitives.kdf import hkdf
from tornado import ioloop

from kettle import (
    attestation,
    channels,
    errors,
    manifest,
    orchestrator,
    util,
    verifier,
)

NONCE_SIZE = 32
AEAD_NONCE_SIZE = 12
SEAL_CONTEXT = b'kettle-confidential-v1'
BUILD_CONFIG_FILE = 'kettle-build.json'

Bytes32 = typing.Annotated[util.HexBytes, util.exact_size(NONCE_SIZE)]


class _Message(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(
        extra='forbid', frozen=True, populate_by_name=True
    )


class PreAttestRequest(_Message):
    kind: typing.Literal['preattest-request'] = 'preattest-request'
    nonce_p: Bytes32 = pydantic.Field(alias='nonce_p_hex')


class PreAttestation(_Message):
    """The CVM's answer to stage 1"""

    kind: typing.Literal['preattestation'] = 'preattestation'
    nonce_p: Bytes32 = pydantic.Field(alias='nonce_p_hex')
    channel_public_key: Bytes32 = pydantic.Field(
        alias='channel_public_key_hex'
    )
    report_bytes: util.Base64Bytes = pydantic.Field(alias='report_b64')
    chain: attestation.PlatformCertChain

    @property
    def report(self) -> attestation.AttestationReport:
        return attestation.AttestationReport.decode(self.report_bytes)


class SealedSource(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(
        extra='forbid', frozen=True, populate_by_name=True
    )

    ephemeral_public_key: Bytes32 = pydantic.Field(
        alias='ephemeral_public_key_hex'
    )
    aead_nonce: typing.Annotated[
        util.HexBytes, util.exact_size(AEAD_NONCE_SIZE)
    ] = pydantic.Field(alias='aead_nonce_hex')
    ciphertext: util.Base64Bytes = pydantic.Field(alias='ciphertext_b64')
    aad: util.HexBytes = pydantic.Field(alias='aad_hex')


class SealedSourceMessage(_Message):
    kind: typing.Literal['sealed-source'] = 'sealed-source'
    sealed: SealedSource


class BundleDocument(pydantic.BaseModel):
    """Wire form of an evidence bundle"""

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    artifacts: dict[str, util.Base64Bytes]
    provenance: util.Base64Bytes
    evidence: attestation.EvidenceDocument
    build_log: util.Base64Bytes = b''

    @classmethod
    def from_bundle(cls, bundle: orchestrator.EvidenceBundle) -> typing.Self:
        return cls(
            artifacts={a.name: a.content for a in bundle.artifacts},
            provenance=bundle.provenance_bytes,
            evidence=bundle.evidence,
            build_log=bundle.build_log,
        )

    def to_bundle(self) -> orchestrator.EvidenceBundle:
        return orchestrator.EvidenceBundle(
            artifacts=tuple(
                orchestrator.Artifact.of(name, content)
                for name, content in sorted(self.artifacts.items())
            ),
            provenance_bytes=self.provenance,
            report=self.evidence.report,
            chain=self.evidence.chain,
            build_log=self.build_log,
        )


class BuildResult(_Message):
    kind: typing.Literal['build-result'] = 'build-result'
    bundle: BundleDocument


class Failure(_Message):
    kind: typing.Literal['failure'] = 'failure'
    message: str


Message = typing.Annotated[
    PreAttestRequest
    | PreAttestation
    | SealedSourceMessage
    | BuildResult
    | Failure,
    pydantic.Field(discriminator='kind'),
]
_MESSAGE_ADAPTER: pydantic.TypeAdapter[Message] = pydantic.TypeAdapter(
    Message
)


def encode_message(message: Message) -> bytes:
    return message.model_dump_json(by_alias=True).encode('utf-8')


def decode_message(payload: bytes) -> Message:
    try:
        return _MESSAGE_ADAPTER.validate_json(payload)
    except pydantic.ValidationError:
        raise errors.ProtocolError('kettle', 'malformed payload') from None


_T = typing.TypeVar('_T', bound=_Message)


def expect_message(payload: bytes, message_type: type[_T]) -> _T:
    message = decode_message(payload)
    if isinstance(message, Failure):
        raise errors.ConfidentialError(f'CVM reported: {message.message}')
    if not isinstance(message, message_type):
        expected = message_type.model_fields['kind'].default
        raise errors.ProtocolError(expected, message.kind)
    return message


class SourceDelivery(pydantic.BaseModel):
    """What the requester seals for the CVM

    `files` is the source tree by relative path and `blobs` holds the
    pre-fetched dependency bytes by dependency name.

    """

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    build_nonce: Bytes32
    lock: manifest.LockManifest
    config: orchestrator.BuildConfig
    files: dict[str, util.Base64Bytes]
    blobs: dict[str, util.Base64Bytes]

    def encode(self) -> bytes:
        return self.model_dump_json(by_alias=True).encode('utf-8')


def client_begin() -> bytes:
    """A fresh launch nonce"""
    return secrets.token_bytes(NONCE_SIZE)


def channel_binding(channel_public_key: bytes, nonce_p: bytes) -> bytes:
    """The report_data a genuine pre-attestation carries"""
    return util.sha256(channel_public_key + nonce_p) + bytes(32)


class PreAttestationFailure(enum.StrEnum):
    MALFORMED_REPORT = 'MalformedReport'
    UNKNOWN_ROOT = 'UnknownRoot'
    BAD_ROOT_SIGNATURE = 'BadRootSignature'
    CHAIN_MISMATCH = 'ChainMismatch'
    BAD_REPORT_SIGNATURE = 'BadReportSignature'
    MEASUREMENT_NOT_ALLOWED = 'MeasurementNotAllowed'
    STALE_OR_SHARED_CVM = 'StaleOrSharedCvm'
    CHANNEL_BINDING_MISMATCH = 'ChannelBindingMismatch'


class PreAttestationCheck(pydantic.BaseModel):
    """Stage 2 outcome; truthy when the CVM may receive source"""

    model_config = pydantic.ConfigDict(frozen=True)

    passed: bool
    reason: PreAttestationFailure | None = None
    detail: str = ''
    nonce_p: bytes
    channel_public_key: bytes

    def __bool__(self) -> bool:
        return self.passed


def client_verify_preattestation(
    pa: PreAttestation,
    nonce_p: bytes,
    policy: verifier.AllowListPolicy,
    store: attestation.TrustStore,
) -> PreAttestationCheck:
    """Decide whether the pre-attested CVM can be trusted with source

    Checks code identity (report chain and allow-listed measurement),
    CVM uniqueness (``host_data``) and freshness with channel binding
    (report_data), in that order.

    """

    def failed(
        reason: PreAttestationFailure, detail: str = ''
    ) -> PreAttestationCheck:
        util.get_logger_for(client_verify_preattestation).warning(
            'pre-attestation rejected: %s %s', reason, detail
        )
        return PreAttestationCheck(
            passed=False,
            reason=reason,
            detail=detail,
            nonce_p=nonce_p,
            channel_public_key=pa.channel_public_key,
        )

    try:
        report = pa.report
    except errors.AttestationError as error:
        return failed(PreAttestationFailure.MALFORMED_REPORT, str(error))
    check = attestation.verify_report(report, pa.chain, store)
    if not check:
        return failed(PreAttestationFailure(str(check.reason)))
    if report.platform_id != policy.required_platform:
        return failed(
            PreAttestationFailure.MEASUREMENT_NOT_ALLOWED,
            f'platform {report.platform_id} is not allowed',
        )
    match = verifier.check_allowlist(
        report.measurement, pa.chain.firmware_version, policy
    )
    if not match:
        return failed(
            PreAttestationFailure.MEASUREMENT_NOT_ALLOWED, match.reason
        )
    if report.host_data != nonce_p:
        return failed(PreAttestationFailure.STALE_OR_SHARED_CVM)
    if report.report_data != channel_binding(pa.channel_public_key, nonce_p):
        return failed(PreAttestationFailure.CHANNEL_BINDING_MISMATCH)
    return PreAttestationCheck(
        passed=True, nonce_p=nonce_p, channel_public_key=pa.channel_public_key
    )


def _derive_key(shared_secret: bytes, aad: bytes) -> bytes:
    return hkdf.HKDF(
        algorithm=hashes.SHA256(), length=32, salt=None, info=aad
    ).derive(shared_secret)


def seal_source(
    source_archive: bytes,
    pa: PreAttestation,
    nonce_p: bytes,
    *,
    check: PreAttestationCheck | None = None,
) -> SealedSource:
    """Encrypt `source_archive` to the CVM's channel key

    `check` must be the passing result of verifying `pa` for
    `nonce_p`; anything else raises
    [kettle.errors.PreAttestationNotVerifiedError][].

    """
    if (
        check is None
        or not check.passed
        or check.nonce_p != nonce_p
        or check.channel_public_key != pa.channel_public_key
    ):
        raise errors.PreAttestationNotVerifiedError
    aad = SEAL_CONTEXT + nonce_p
    ephemeral = x25519.X25519PrivateKey.generate()
    shared = ephemeral.exchange(
        x25519.X25519PublicKey.from_public_bytes(pa.channel_public_key)
    )
    aead_nonce = os.urandom(AEAD_NONCE_SIZE)
    ciphertext = aead.ChaCha20Poly1305(_derive_key(shared, aad)).encrypt(
        aead_nonce, source_archive, aad
    )
    return SealedSource(
        ephemeral_public_key=ephemeral.public_key().public_bytes_raw(),
        aead_nonce=aead_nonce,
        ciphertext=ciphertext,
        aad=aad,
    )


def unseal(
    sealed: SealedSource, channel_key: x25519.X25519PrivateKey
) -> bytes:
    """Inverse of [seal_source][]; raises [kettle.errors.UnsealError][]"""
    try:
        shared = channel_key.exchange(
            x25519.X25519PublicKey.from_public_bytes(
                sealed.ephemeral_public_key
            )
        )
        return aead.ChaCha20Poly1305(
            _derive_key(shared, sealed.aad)
        ).decrypt(sealed.aead_nonce, sealed.ciphertext, sealed.aad)
    except (exceptions.InvalidTag, ValueError):
        raise errors.UnsealError from None


class CvmActor:
    """Kettle running inside one launched CVM

    The channel private key never leaves this object.

    """

    def __init__(
        self, cvm: attestation.LaunchedCvm, *, clock: util.Clock = util.utc_now
    ) -> None:
        self.cvm = cvm
        self.clock = clock
        self._channel_key: x25519.X25519PrivateKey | None = None
        self.logger = util.get_logger_for(self)

    def preattest(self, nonce_p: bytes) -> PreAttestation:
        self._channel_key = x25519.X25519PrivateKey.generate()
        public_key = self._channel_key.public_key().public_bytes_raw()
        report = self.cvm.attest(channel_binding(public_key, nonce_p))
        return PreAttestation(
            nonce_p=nonce_p,
            channel_public_key=public_key,
            report_bytes=report.encode(),
            chain=self.cvm.chain,
        )

    async def handle(self, payload: bytes) -> bytes:
        """Transport endpoint"""
        response: Message
        try:
            message = decode_message(payload)
            if isinstance(message, PreAttestRequest):
                response = self.preattest(message.nonce_p)
            elif isinstance(message, SealedSourceMessage):
                response = await self._build(message.sealed)
            else:
                raise errors.ProtocolError('request', message.kind)
        except errors.KettleError as error:
            self.logger.warning('request failed: %s', error)
            response = Failure(message=str(error))
        return encode_message(response)

    async def _build(self, sealed: SealedSource) -> BuildResult:
        if self._channel_key is None:
            raise errors.ProtocolError('preattest-request', 'sealed-source')
        archive = unseal(sealed, self._channel_key)
        try:
            delivery = SourceDelivery.model_validate_json(archive)
        except pydantic.ValidationError as error:
            raise errors.ProtocolError(
                'source delivery',
                f'invalid payload ({error.error_count()} errors)',
            ) from None
        bundle = await ioloop.IOLoop.current().run_in_executor(
            None, self._run_build, delivery
        )
        return BuildResult(bundle=BundleDocument.from_bundle(bundle))

    def _run_build(
        self, delivery: SourceDelivery
    ) -> orchestrator.EvidenceBundle:
        with (
            tempfile.TemporaryDirectory(prefix='kettle-src-') as src,
            tempfile.TemporaryDirectory(prefix='kettle-cfg-') as cfg,
        ):
            source_dir = pathlib.Path(src)
            for name, content in delivery.files.items():
                target = source_dir / util.safe_relative_path(name)
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(content)
            config_path = pathlib.Path(cfg) / BUILD_CONFIG_FILE
            config_path.write_bytes(
                delivery.config.model_dump_json(by_alias=True).encode()
            )
            builder = orchestrator.Orchestrator(
                lambda: self.cvm,
                clock=self.clock,
                blob_resolver=delivery.blobs.get,
            )
            return builder.run(
                orchestrator.BuildRequest(
                    source=delivery.lock.source,
                    nonce=delivery.build_nonce,
                    config_path=config_path,
                    source_dir=source_dir,
                ),
                delivery.lock,
            )


def cvm_preattest(
    platform: attestation.SimulatedPlatform,
    boot_fixture: typing.Sequence[attestation.BootComponent],
    nonce_p: bytes,
    *,
    clock: util.Clock = util.utc_now,
) -> tuple[CvmActor, PreAttestation]:
    """Launch a CVM bound to `nonce_p` and pre-attest its channel key

    The actor is returned alongside the pre-attestation since it is the
    only holder of the channel private key.

    """
    cvm = platform.launch(boot_fixture, host_data=nonce_p)
    actor = CvmActor(cvm, clock=clock)
    return actor, actor.preattest(nonce_p)


class Direction(enum.StrEnum):
    TO_CVM = 'requester->cvm'
    TO_REQUESTER = 'cvm->requester'


class Observation(pydantic.BaseModel):
    """One message as seen by the host

    `opaque` is set when the host only saw ciphertext.

    """

    model_config = pydantic.ConfigDict(frozen=True)

    direction: Direction
    kind: str
    length: int
    opaque: bool
    plaintext_source_bytes: int = 0


def _readable_source_bytes(message: Message) -> int:
    """How much source the host recovers by reading `message` as-is"""
    if not isinstance(message, SealedSourceMessage):
        return 0
    try:
        delivery = SourceDelivery.model_validate_json(
            message.sealed.ciphertext
        )
    except pydantic.ValidationError:
        return 0
    return sum(len(content) for content in delivery.files.values())


class Tamper(enum.StrEnum):
    """Ways a malicious host can try to obtain the source"""

    MODIFIED_KETTLE = 'modified-kettle'
    REPLAYED_CVM = 'replayed-cvm'
    SUBSTITUTED_KEY = 'substituted-key'
    UNKNOWN_ROOT = 'unknown-root'


class HostActor:
    """The untrusted host: launches CVMs and relays every message

    With a `tamper` scenario the host launches or answers dishonestly.

    """

    def __init__(
        self,
        platform: attestation.SimulatedPlatform,
        boot_fixture: typing.Sequence[attestation.BootComponent],
        *,
        transport_factory: channels.TransportFactory = (
            channels.InProcessTransport
        ),
        tamper: Tamper | None = None,
        clock: util.Clock = util.utc_now,
    ) -> None:
        self.platform = platform
        self.boot_fixture = tuple(boot_fixture)
        self.transport_factory = transport_factory
        self.tamper = tamper
        self.clock = clock
        self.observations: list[Observation] = []
        self._transport: channels.Transport | None = None
        self.logger = util.get_logger_for(self)

    async def relay(self, payload: bytes) -> bytes:
        """Forward one requester message and return the CVM's answer"""
        request = decode_message(payload)
        self._observe(Direction.TO_CVM, request, payload)
        if isinstance(request, PreAttestRequest):
            response = await self._preattest(request.nonce_p)
        elif self._transport is None:
            raise errors.ProtocolError('preattest-request', request.kind)
        else:
            response = await self._transport.exchange(payload)
        self._observe(
            Direction.TO_REQUESTER, decode_message(response), response
        )
        return response

    async def close(self) -> None:
        if self._transport is not None:
            await self._transport.close()
            self._transport = None

    def _observe(
        self, direction: Direction, message: Message, payload: bytes
    ) -> None:
        visible = _readable_source_bytes(message)
        self.observations.append(
            Observation(
                direction=direction,
                kind=message.kind,
                length=len(payload),
                opaque=(
                    isinstance(message, SealedSourceMessage) and not visible
                ),
                plaintext_source_bytes=visible,
            )
        )

    def _launch(self, host_data: bytes) -> channels.Transport:
        platform = self.platform
        fixture = self.boot_fixture
        if self.tamper is Tamper.UNKNOWN_ROOT:
            platform = attestation.platform_keygen(
                platform_id=self.platform.platform_id,
                firmware_version=self.platform.chain.firmware_version,
            ).platform()
        elif self.tamper is Tamper.MODIFIED_KETTLE:
            fixture = tuple(
                attestation.BootComponent(
                    kind=c.kind, content=c.content + b' (patched)'
                )
                if c.kind is attestation.BootComponentKind.KETTLE
                else c
                for c in fixture
            )
        cvm = platform.launch(fixture, host_data=host_data)
        actor = CvmActor(cvm, clock=self.clock)
        return self.transport_factory(actor.handle)

    async def _preattest(self, nonce_p: bytes) -> bytes:
        if self._transport is not None:
            await self._transport.close()
        if self.tamper is Tamper.REPLAYED_CVM:
            # answer with the pre-attestation of an earlier launch
            stale = client_begin()
            self._transport = self._launch(stale)
            return await self._transport.exchange(
                encode_message(PreAttestRequest(nonce_p=stale))
            )
        self._transport = self._launch(nonce_p)
        response = await self._transport.exchange(
            encode_message(PreAttestRequest(nonce_p=nonce_p))
        )
        if self.tamper is Tamper.SUBSTITUTED_KEY:
            genuine = expect_message(response, PreAttestation)
            own_key = x25519.X25519PrivateKey.generate().public_key()
            response = encode_message(
                genuine.model_copy(
                    update={'channel_public_key': own_key.public_bytes_raw()}
                )
            )
        return response


class SessionTranscript(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    pre_attestation: PreAttestation | None
    build_report: attestation.AttestationReport | None = None
    host_observed: tuple[Observation, ...]

    def plaintext_source_bytes(self) -> int:
        """Source bytes the host saw in the clear"""
        return sum(
            o.plaintext_source_bytes
            for o in self.host_observed
            if o.direction is Direction.TO_CVM
        )

    @property
    def measurements_match(self) -> bool:
        if self.pre_attestation is None or self.build_report is None:
            return False
        return (
            self.pre_attestation.report.measurement
            == self.build_report.measurement
        )


class SessionResult(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    transcript: SessionTranscript
    bundle: orchestrator.EvidenceBundle


class Requester:
    """The party that owns the source and the verification policy"""

    def __init__(
        self,
        lock: manifest.LockManifest,
        config: orchestrator.BuildConfig,
        source_dir: pathlib.Path,
        *,
        policy: verifier.AllowListPolicy,
        store: attestation.TrustStore,
        blob_resolver: manifest.BlobResolver | None = None,
        build_nonce: bytes | None = None,
    ) -> None:
        self.lock = lock
        self.config = config
        self.source_dir = source_dir
        self.policy = policy
        self.store = store
        self.blob_resolver = blob_resolver or manifest.directory_resolver(
            source_dir, lock
        )
        self.build_nonce = build_nonce or orchestrator.fresh_nonce()

    def source_archive(self) -> bytes:
        files = {
            path.relative_to(self.source_dir).as_posix(): path.read_bytes()
            for path in sorted(self.source_dir.rglob('*'))
            if path.is_file()
            and '.git' not in path.relative_to(self.source_dir).parts
        }
        blobs = {}
        for entry in self.lock.dependencies:
            blob = self.blob_resolver(entry.name)
            if blob is None:
                raise errors.MissingBlobError(entry.name)
            blobs[entry.name] = blob
        return SourceDelivery(
            build_nonce=self.build_nonce,
            lock=self.lock,
            config=self.config,
            files=files,
            blobs=blobs,
        ).encode()


async def confidential_build_session(
    requester: Requester, host: HostActor
) -> SessionResult:
    """Run all three stages through `host`

    Raises [kettle.errors.AbortedBeforeDisclosureError][] carrying the
    transcript when stage 2 rejects the CVM.

    """
    logger = util.get_logger_for(confidential_build_session)
    try:
        nonce_p = client_begin()
        pa = expect_message(
            await host.relay(
                encode_message(PreAttestRequest(nonce_p=nonce_p))
            ),
            PreAttestation,
        )
        check = client_verify_preattestation(
            pa, nonce_p, requester.policy, requester.store
        )
        if not check:
            transcript = SessionTranscript(
                pre_attestation=pa, host_observed=tuple(host.observations)
            )
            raise errors.AbortedBeforeDisclosureError(
                str(check.reason), transcript
            )
        logger.info('pre-attestation verified, sending sealed source')

        sealed = seal_source(
            requester.source_archive(), pa, nonce_p, check=check
        )
        result = expect_message(
            await host.relay(
                encode_message(SealedSourceMessage(sealed=sealed))
            ),
            BuildResult,
        )
        bundle = result.bundle.to_bundle()
        return SessionResult(
            transcript=SessionTranscript(
                pre_attestation=pa,
                build_report=bundle.report,
                host_observed=tuple(host.observations),
            ),
            bundle=bundle,
        )
    finally:
        await host.close()
