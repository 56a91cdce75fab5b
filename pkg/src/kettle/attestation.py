"""Simulated TEE attestation platform

A software stand-in for SEV-SNP/TDX.  It reproduces the properties the
evidence chain depends on and nothing else:

* measured boot -- six boot components are folded into a SHA-384
  register in a fixed order, and the result is the launch measurement
* attestation reports -- a fixed 219-byte big-endian layout signed
  with the platform's Ed25519 key
* a vendor key chain -- the platform key is endorsed by a root key
  that verifiers hold in a [TrustStore][kettle.attestation.TrustStore]

Report layout (all integers big-endian):

| Offset | Size | Field            |
| ------ | ---- | ---------------- |
| 0      | 4    | magic ``KTLR``   |
| 4      | 2    | version (1)      |
| 6      | 1    | platform_id      |
| 7      | 4    | firmware_version |
| 11     | 48   | measurement      |
| 59     | 32   | host_data        |
| 91     | 64   | report_data      |
| 155    | 64   | signature        |

The signature covers the first 155 bytes.

"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
import threading
import typing

import pydantic
from cryptography import exceptions
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ed25519
from cryptography.hazmat.primitives.kdf import hkdf

import kettle
from kettle import errors, util

MEASUREMENT_SIZE = 48
HOST_DATA_SIZE = 32
REPORT_DATA_SIZE = 64
KEY_SIZE = 32
SIGNATURE_SIZE = 64
REPORT_MAGIC = b'KTLR'
REPORT_VERSION = 1

_SIGNED_LAYOUT = struct.Struct('>4sHBI48s32s64s')
REPORT_SIZE = _SIGNED_LAYOUT.size + SIGNATURE_SIZE

_KEYGEN_INFO = b'kettle-platform-keygen-v1'

UInt8 = typing.Annotated[int, pydantic.Field(ge=0, le=0xFF)]
UInt32 = typing.Annotated[int, pydantic.Field(ge=0, le=0xFFFF_FFFF)]
Key = typing.Annotated[util.HexBytes, util.exact_size(KEY_SIZE)]
Signature = typing.Annotated[util.HexBytes, util.exact_size(SIGNATURE_SIZE)]


class BootComponentKind(enum.IntEnum):
    """Boot components in load order; the value is the extension tag"""

    FIRMWARE = 0
    KERNEL = 1
    CMDLINE = 2
    INITRD = 3
    VM_IMAGE = 4
    KETTLE = 5

    def __str__(self) -> str:
        return self.name.lower()


def _kind_from_name(value: object) -> object:
    if isinstance(value, str):
        try:
            return BootComponentKind[value.upper()]
        except KeyError:
            raise ValueError(f'unknown boot component {value!r}') from None
    return value


ComponentKindField = typing.Annotated[
    BootComponentKind,
    pydantic.BeforeValidator(_kind_from_name),
    pydantic.PlainSerializer(str, return_type=str),
]


class BootComponent(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(
        extra='forbid', frozen=True, populate_by_name=True
    )

    kind: ComponentKindField
    content: util.Base64Bytes = pydantic.Field(alias='content_b64')


class MeasurementRegister(pydantic.BaseModel):
    """A SHA-384 register that can only be extended"""

    model_config = pydantic.ConfigDict(frozen=True)

    value: typing.Annotated[
        util.HexBytes, util.exact_size(MEASUREMENT_SIZE)
    ] = bytes(MEASUREMENT_SIZE)


def component_digest(component: BootComponent) -> bytes:
    return hashlib.sha384(bytes([component.kind]) + component.content).digest()


def extend(
    register: MeasurementRegister, component: BootComponent
) -> MeasurementRegister:
    """new = SHA-384(old || SHA-384(kind_tag || content))"""
    return MeasurementRegister(
        value=hashlib.sha384(
            register.value + component_digest(component)
        ).digest()
    )


def measure_boot_chain(components: typing.Sequence[BootComponent]) -> bytes:
    """Fold `components` into a fresh register and return the value

    All six component kinds must be present exactly once and in load
    order.

    """
    present = {component.kind for component in components}
    missing = [kind for kind in BootComponentKind if kind not in present]
    if missing:
        raise errors.MissingComponentError(missing)
    for expected, component in zip(
        BootComponentKind, components, strict=False
    ):
        if component.kind is not expected:
            raise errors.WrongOrderError(expected, component.kind)
    if len(components) > len(BootComponentKind):
        raise errors.WrongOrderError(
            'end of chain', components[len(BootComponentKind)].kind
        )

    register = MeasurementRegister()
    for component in components:
        register = extend(register, component)
    util.get_logger_for(measure_boot_chain).debug(
        'launch measurement %s', register.value.hex()
    )
    return register.value


class BootFixture(pydantic.BaseModel):
    """JSON form of a boot chain: ``{"components": [...]}``"""

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    components: tuple[BootComponent, ...]


def load_boot_fixture(data: bytes) -> tuple[BootComponent, ...]:
    try:
        return BootFixture.model_validate_json(data).components
    except pydantic.ValidationError as error:
        raise errors.AttestationError(
            f'Malformed boot fixture: {error}'
        ) from None


def dump_boot_fixture(components: typing.Iterable[BootComponent]) -> bytes:
    fixture = BootFixture(components=tuple(components))
    return fixture.model_dump_json(by_alias=True, indent=2).encode('utf-8')


def reference_boot_chain(
    kettle_version: str | None = None,
    *,
    cmdline: bytes = b'console=ttyS0 ro kettle.mode=build',
    kettle_payload: bytes | None = None,
) -> tuple[BootComponent, ...]:
    """The deterministic boot chain of the simulated Kettle CVM image

    Each component is a short byte string standing in for the real
    image part.  The ``kettle`` component embeds `kettle_version`
    unless `kettle_payload` replaces it outright.

    """
    if kettle_version is None:
        kettle_version = kettle.version
    if kettle_payload is None:
        kettle_payload = f'kettle {kettle_version}'.encode()
    contents = {
        BootComponentKind.FIRMWARE: b'kettle-sim firmware 1',
        BootComponentKind.KERNEL: b'kettle-sim kernel 6.12',
        BootComponentKind.CMDLINE: cmdline,
        BootComponentKind.INITRD: b'kettle-sim initrd',
        BootComponentKind.VM_IMAGE: b'kettle-sim vm image',
        BootComponentKind.KETTLE: kettle_payload,
    }
    return tuple(
        BootComponent(kind=kind, content=content)
        for kind, content in contents.items()
    )


class PlatformId(enum.IntEnum):
    SIM = 0
    SEV_SNP = 1
    TDX = 2

    @property
    def label(self) -> str:
        """Name used for ``tee_platform`` in provenance"""
        return self.name.lower().replace('_', '-')

    @classmethod
    def from_label(cls, label: str) -> PlatformId:
        try:
            return cls[label.upper().replace('-', '_')]
        except KeyError:
            raise ValueError(f'unknown platform {label!r}') from None


class AttestationReport(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    magic: bytes = REPORT_MAGIC
    version: int = REPORT_VERSION
    platform_id: UInt8
    firmware_version: UInt32
    measurement: typing.Annotated[
        util.HexBytes, util.exact_size(MEASUREMENT_SIZE)
    ]
    host_data: typing.Annotated[util.HexBytes, util.exact_size(HOST_DATA_SIZE)]
    report_data: typing.Annotated[
        util.HexBytes, util.exact_size(REPORT_DATA_SIZE)
    ]
    signature: Signature = bytes(SIGNATURE_SIZE)

    def signed_bytes(self) -> bytes:
        return _SIGNED_LAYOUT.pack(
            self.magic,
            self.version,
            self.platform_id,
            self.firmware_version,
            self.measurement,
            self.host_data,
            self.report_data,
        )

    def encode(self) -> bytes:
        return self.signed_bytes() + self.signature

    @classmethod
    def decode(cls, data: bytes) -> AttestationReport:
        """Parse the wire form, rejecting wrong length, magic or version"""
        if len(data) != REPORT_SIZE:
            raise errors.BadLengthError(REPORT_SIZE, len(data))
        fields = _SIGNED_LAYOUT.unpack_from(data)
        magic, version = fields[0], fields[1]
        if magic != REPORT_MAGIC:
            raise errors.BadMagicError(magic)
        if version != REPORT_VERSION:
            raise errors.UnsupportedVersionError(version)
        return cls(
            magic=magic,
            version=version,
            platform_id=fields[2],
            firmware_version=fields[3],
            measurement=fields[4],
            host_data=fields[5],
            report_data=fields[6],
            signature=data[_SIGNED_LAYOUT.size :],
        )


def encode_report(report: AttestationReport) -> bytes:
    return report.encode()


def decode_report(data: bytes) -> AttestationReport:
    return AttestationReport.decode(data)


class PlatformCertChain(pydantic.BaseModel):
    """The root key's endorsement of one platform key"""

    model_config = pydantic.ConfigDict(
        extra='forbid', frozen=True, populate_by_name=True
    )

    platform_public_key: Key = pydantic.Field(alias='platform_public_key_hex')
    platform_id: UInt8
    firmware_version: UInt32
    root_signature: Signature = pydantic.Field(alias='root_signature_hex')
    root_key_id: Key = pydantic.Field(alias='root_key_id_hex')

    def signed_bytes(self) -> bytes:
        return (
            self.platform_public_key
            + bytes([self.platform_id])
            + self.firmware_version.to_bytes(4, 'big')
        )


def root_key_id(root_public_key: bytes) -> bytes:
    return util.sha256(root_public_key)


def endorse_platform_key(
    root_key: ed25519.Ed25519PrivateKey,
    platform_public_key: bytes,
    platform_id: int,
    firmware_version: int,
) -> PlatformCertChain:
    """Sign `platform_public_key` with `root_key`"""
    unsigned = PlatformCertChain(
        platform_public_key=platform_public_key,
        platform_id=platform_id,
        firmware_version=firmware_version,
        root_signature=bytes(SIGNATURE_SIZE),
        root_key_id=root_key_id(root_key.public_key().public_bytes_raw()),
    )
    return unsigned.model_copy(
        update={'root_signature': root_key.sign(unsigned.signed_bytes())}
    )


class TrustStore:
    """Trusted root public keys indexed by key id

    The file form is a JSON object mapping ``root_key_id_hex`` to
    ``root_public_key_hex``.

    """

    def __init__(self, roots: typing.Mapping[bytes, bytes]) -> None:
        if not roots:
            raise errors.EmptyTrustStoreError
        for key_id, public_key in roots.items():
            if len(public_key) != KEY_SIZE:
                raise errors.MalformedTrustStoreError(
                    f'root key {key_id.hex()} is not {KEY_SIZE} bytes'
                )
            if root_key_id(public_key) != key_id:
                raise errors.MalformedTrustStoreError(
                    f'key id {key_id.hex()} does not match its key'
                )
        self._roots = dict(roots)

    @classmethod
    def from_public_keys(cls, *public_keys: bytes) -> TrustStore:
        return cls({root_key_id(key): key for key in public_keys})

    @classmethod
    def load(cls, data: bytes) -> TrustStore:
        try:
            raw = _TRUST_STORE_ADAPTER.validate_json(data)
        except pydantic.ValidationError as error:
            raise errors.MalformedTrustStoreError(str(error)) from None
        roots = {}
        for key_id, public_key in raw.items():
            if not (
                util.is_lower_hex(key_id, 2 * KEY_SIZE)
                and util.is_lower_hex(public_key, 2 * KEY_SIZE)
            ):
                raise errors.MalformedTrustStoreError(
                    f'entry {key_id!r} is not a pair of 32-byte hex values'
                )
            roots[bytes.fromhex(key_id)] = bytes.fromhex(public_key)
        return cls(roots)

    def dump(self) -> bytes:
        document = {k.hex(): v.hex() for k, v in sorted(self._roots.items())}
        return json.dumps(document, indent=2).encode('utf-8')

    def get(self, key_id: bytes) -> bytes | None:
        return self._roots.get(key_id)

    def __contains__(self, key_id: object) -> bool:
        return key_id in self._roots

    def __len__(self) -> int:
        return len(self._roots)


_TRUST_STORE_ADAPTER = pydantic.TypeAdapter(dict[str, str])


class ReportFailure(enum.StrEnum):
    UNKNOWN_ROOT = 'UnknownRoot'
    BAD_ROOT_SIGNATURE = 'BadRootSignature'
    CHAIN_MISMATCH = 'ChainMismatch'
    BAD_REPORT_SIGNATURE = 'BadReportSignature'


class ReportCheck(pydantic.BaseModel):
    """Outcome of [verify_report][kettle.attestation.verify_report]

    Truthy when the report verified.

    """

    model_config = pydantic.ConfigDict(frozen=True)

    passed: bool
    reason: ReportFailure | None = None

    def __bool__(self) -> bool:
        return self.passed


def _signature_valid(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(public_key).verify(
            signature, data
        )
    except (exceptions.InvalidSignature, ValueError):
        return False
    return True


def verify_report(
    report: AttestationReport, chain: PlatformCertChain, store: TrustStore
) -> ReportCheck:
    """Check the report against its chain and the trusted roots

    The chain must be rooted in `store`, carry a valid root signature
    and describe the same platform and firmware as the report; the
    report signature must verify under the endorsed platform key.

    """
    logger = util.get_logger_for(verify_report)
    root_key = store.get(chain.root_key_id)
    if root_key is None:
        logger.debug('root %s is not trusted', chain.root_key_id.hex())
        return ReportCheck(passed=False, reason=ReportFailure.UNKNOWN_ROOT)
    if not _signature_valid(
        root_key, chain.root_signature, chain.signed_bytes()
    ):
        return ReportCheck(
            passed=False, reason=ReportFailure.BAD_ROOT_SIGNATURE
        )
    if (report.platform_id, report.firmware_version) != (
        chain.platform_id,
        chain.firmware_version,
    ):
        logger.debug(
            'report platform %d/%d does not match chain %d/%d',
            report.platform_id,
            report.firmware_version,
            chain.platform_id,
            chain.firmware_version,
        )
        return ReportCheck(passed=False, reason=ReportFailure.CHAIN_MISMATCH)
    if not _signature_valid(
        chain.platform_public_key, report.signature, report.signed_bytes()
    ):
        return ReportCheck(
            passed=False, reason=ReportFailure.BAD_REPORT_SIGNATURE
        )
    return ReportCheck(passed=True)


def _check_size(field: str, value: bytes, size: int) -> None:
    if len(value) != size:
        raise errors.SizeMismatchError(field, size, len(value))


class SimulatedPlatform:
    """Holds the platform private key and issues signed reports

    Reports are signed one at a time per instance.

    """

    def __init__(
        self, platform_key: ed25519.Ed25519PrivateKey, chain: PlatformCertChain
    ) -> None:
        self._key = platform_key
        self._lock = threading.Lock()
        self.chain = chain
        self.logger = util.get_logger_for(self)

    @property
    def platform_id(self) -> int:
        return self.chain.platform_id

    @property
    def tee_platform(self) -> str:
        try:
            return PlatformId(self.chain.platform_id).label
        except ValueError:
            return f'platform-{self.chain.platform_id}'

    def issue_report(
        self, measurement: bytes, host_data: bytes, report_data: bytes
    ) -> AttestationReport:
        _check_size('measurement', measurement, MEASUREMENT_SIZE)
        _check_size('host_data', host_data, HOST_DATA_SIZE)
        _check_size('report_data', report_data, REPORT_DATA_SIZE)
        unsigned = AttestationReport(
            platform_id=self.chain.platform_id,
            firmware_version=self.chain.firmware_version,
            measurement=measurement,
            host_data=host_data,
            report_data=report_data,
        )
        with self._lock:
            signature = self._key.sign(unsigned.signed_bytes())
        self.logger.debug(
            'issued report for measurement %s', measurement.hex()
        )
        return unsigned.model_copy(update={'signature': signature})

    def launch(
        self,
        components: typing.Sequence[BootComponent],
        host_data: bytes = bytes(HOST_DATA_SIZE),
    ) -> LaunchedCvm:
        """Measure the boot chain and commit `host_data` for the CVM's life"""
        _check_size('host_data', host_data, HOST_DATA_SIZE)
        return LaunchedCvm(self, measure_boot_chain(components), host_data)


class LaunchedCvm:
    """A booted simulated CVM; every report carries its measurement"""

    __slots__ = ('host_data', 'measurement', 'platform')

    def __init__(
        self, platform: SimulatedPlatform, measurement: bytes, host_data: bytes
    ) -> None:
        self.platform = platform
        self.measurement = measurement
        self.host_data = host_data

    @property
    def chain(self) -> PlatformCertChain:
        return self.platform.chain

    def attest(self, report_data: bytes) -> AttestationReport:
        return self.platform.issue_report(
            self.measurement, self.host_data, report_data
        )


class PlatformKeys(pydantic.BaseModel):
    """Simulated vendor provisioning: the root and platform private keys

    This is also the ``--platform-keys`` file format.

    """

    model_config = pydantic.ConfigDict(
        extra='forbid', frozen=True, populate_by_name=True
    )

    root_private_key: Key = pydantic.Field(alias='root_private_key_hex')
    platform_private_key: Key = pydantic.Field(
        alias='platform_private_key_hex'
    )
    platform_id: UInt8 = PlatformId.SIM
    firmware_version: UInt32 = 1

    @property
    def root_key(self) -> ed25519.Ed25519PrivateKey:
        return ed25519.Ed25519PrivateKey.from_private_bytes(
            self.root_private_key
        )

    @property
    def platform_key(self) -> ed25519.Ed25519PrivateKey:
        return ed25519.Ed25519PrivateKey.from_private_bytes(
            self.platform_private_key
        )

    @property
    def root_public_key(self) -> bytes:
        return self.root_key.public_key().public_bytes_raw()

    @property
    def chain(self) -> PlatformCertChain:
        return endorse_platform_key(
            self.root_key,
            self.platform_key.public_key().public_bytes_raw(),
            self.platform_id,
            self.firmware_version,
        )

    def trust_store(self) -> TrustStore:
        return TrustStore.from_public_keys(self.root_public_key)

    def platform(self) -> SimulatedPlatform:
        return SimulatedPlatform(self.platform_key, self.chain)

    def dump(self) -> bytes:
        return self.model_dump_json(by_alias=True, indent=2).encode('utf-8')

    @classmethod
    def load(cls, data: bytes) -> PlatformKeys:
        try:
            return cls.model_validate_json(data)
        except pydantic.ValidationError as error:
            raise errors.AttestationError(
                f'Malformed platform key file: {error}'
            ) from None


def platform_keygen(
    seed: bytes | None = None,
    *,
    platform_id: int = PlatformId.SIM,
    firmware_version: int = 1,
) -> PlatformKeys:
    """Provision a root key and an endorsed platform key

    With a 32-byte `seed` both keys are derived deterministically
    (HKDF-SHA256); without one they come from the system CSPRNG.

    """
    if seed is None:
        material = os.urandom(2 * KEY_SIZE)
    else:
        _check_size('seed', seed, KEY_SIZE)
        material = hkdf.HKDF(
            algorithm=hashes.SHA256(),
            length=2 * KEY_SIZE,
            salt=None,
            info=_KEYGEN_INFO,
        ).derive(seed)
    return PlatformKeys(
        root_private_key=material[:KEY_SIZE],
        platform_private_key=material[KEY_SIZE:],
        platform_id=platform_id,
        firmware_version=firmware_version,
    )


class EvidenceDocument(pydantic.BaseModel):
    """The ``evidence.json`` file: the raw report plus its cert chain"""

    model_config = pydantic.ConfigDict(
        extra='forbid', frozen=True, populate_by_name=True
    )

    report_bytes: util.Base64Bytes = pydantic.Field(alias='report_b64')
    chain: PlatformCertChain

    @classmethod
    def from_report(
        cls, report: AttestationReport, chain: PlatformCertChain
    ) -> EvidenceDocument:
        return cls(report_bytes=report.encode(), chain=chain)

    @property
    def report(self) -> AttestationReport:
        return AttestationReport.decode(self.report_bytes)
