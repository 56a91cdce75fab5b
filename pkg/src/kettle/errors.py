import pathlib
import typing


class KettleError(Exception):
    """Root of all errors raised by this library"""


class NotSerializableError(KettleError, TypeError):
    """Value is not a serializable type"""

    def __init__(self, value: object) -> None:
        super().__init__(
            f'Object of type {value.__class__.__name__} '
            f'is not serializable'
        )
        self.value = value


class ManifestError(KettleError):
    """Root of lock manifest errors

    Errors in this category are raised from inside pydantic validators
    so they intentionally do not inherit from [ValueError][]. Pydantic
    folds `ValueError`s into a `ValidationError` which would hide the
    specific failure.

    """


class MalformedManifestError(ManifestError):
    """The lock manifest is not valid JSON or is missing fields"""

    def __init__(self, reason: str) -> None:
        super().__init__(f'Malformed lock manifest: {reason}')
        self.reason = reason


class DuplicateDependencyError(ManifestError):
    """Two dependency entries share a name"""

    def __init__(self, name: str) -> None:
        super().__init__(f'Dependency {name!r} is declared more than once')
        self.name = name


class BadDigestError(ManifestError):
    """A digest is not lowercase hex of the expected length"""

    def __init__(self, field: str, value: object, *lengths: int) -> None:
        expected = ' or '.join(str(n) for n in lengths)
        super().__init__(
            f'{field} must be {expected} lowercase hex characters, '
            f'got {value!r}'
        )
        self.field = field
        self.value = value


class InputVerificationError(KettleError):
    """Root of pre-build input verification failures"""


class InputMismatchError(InputVerificationError):
    """An input's recomputed digest differs from the pinned digest

    This signals a substituted input and aborts the pipeline before
    any build command runs.

    """

    def __init__(self, name: str, expected: str, actual: str) -> None:
        super().__init__(
            f'Input {name!r} does not match its pinned digest: '
            f'expected {expected}, got {actual}'
        )
        self.name = name
        self.expected = expected
        self.actual = actual


class SourceTreeMismatchError(InputMismatchError):
    """The source directory does not hash to the declared tree digest"""

    def __init__(self, expected: str, actual: str) -> None:
        super().__init__('src.tree', expected, actual)


class MissingBlobError(InputVerificationError):
    """The bytes for a pinned dependency could not be resolved"""

    def __init__(self, name: str) -> None:
        super().__init__(f'No bytes available for dependency {name!r}')
        self.name = name


class MerkleError(KettleError):
    """Root of Merkle tree errors"""


class EmptyManifestError(MerkleError, ValueError):
    """A Merkle tree requires at least one leaf"""

    def __init__(self) -> None:
        super().__init__('Cannot build a Merkle tree without leaves')


class IndexOutOfRangeError(MerkleError, IndexError):
    def __init__(self, index: int, leaf_count: int) -> None:
        super().__init__(
            f'Leaf index {index} is outside of [0, {leaf_count})'
        )
        self.index = index
        self.leaf_count = leaf_count


class UnknownLeafError(MerkleError, KeyError):
    def __init__(self, label: str) -> None:
        super().__init__(f'No leaf is labelled {label!r}')
        self.label = label


class ProvenanceError(KettleError):
    """Root of provenance assembly and parsing errors"""


class NoOutputsError(ProvenanceError, ValueError):
    """A statement needs at least one subject"""

    def __init__(self) -> None:
        super().__init__('Provenance requires at least one output artifact')


class NonCanonicalizableError(ProvenanceError, TypeError):
    """A value outside of the canonical JSON schema reached the encoder"""

    def __init__(self, value: object) -> None:
        super().__init__(
            f'Value {value!r} of type {type(value).__name__} '
            f'has no canonical encoding'
        )
        self.value = value


class MalformedStatementError(ProvenanceError, ValueError):
    def __init__(self, reason: str) -> None:
        super().__init__(f'Malformed provenance statement: {reason}')
        self.reason = reason


class UnknownFieldError(MalformedStatementError):
    def __init__(self, location: str) -> None:
        super().__init__(f'unknown field {location!r}')
        self.location = location


class WrongStatementTypeError(MalformedStatementError):
    def __init__(self, field: str, value: object) -> None:
        super().__init__(f'unsupported {field} {value!r}')
        self.field = field
        self.value = value


class AttestationError(KettleError):
    """Root of attestation platform and report encoding errors"""


class WrongOrderError(AttestationError, ValueError):
    """Boot components were not supplied in load order"""

    def __init__(self, expected: object, actual: object) -> None:
        super().__init__(
            f'Boot component {actual} was supplied where {expected} '
            f'was expected'
        )
        self.expected = expected
        self.actual = actual


class MissingComponentError(AttestationError, ValueError):
    def __init__(self, missing: typing.Iterable[object]) -> None:
        names = ', '.join(str(m) for m in missing)
        super().__init__(f'Boot chain is missing components: {names}')


class SizeMismatchError(AttestationError, ValueError):
    def __init__(self, field: str, expected: int, actual: int) -> None:
        super().__init__(
            f'{field} must be exactly {expected} bytes, got {actual}'
        )
        self.field = field
        self.expected = expected
        self.actual = actual


class BadMagicError(AttestationError, ValueError):
    def __init__(self, magic: bytes) -> None:
        super().__init__(f'Unexpected report magic {magic!r}')
        self.magic = magic


class BadLengthError(AttestationError, ValueError):
    def __init__(self, expected: int, actual: int) -> None:
        super().__init__(
            f'Attestation report must be {expected} bytes, got {actual}'
        )
        self.expected = expected
        self.actual = actual


class UnsupportedVersionError(AttestationError, ValueError):
    def __init__(self, version: int) -> None:
        super().__init__(f'Unsupported report version {version}')
        self.version = version


class EmptyTrustStoreError(AttestationError, ValueError):
    def __init__(self) -> None:
        super().__init__('Trust store does not contain any root keys')


class MalformedTrustStoreError(AttestationError, ValueError):
    def __init__(self, reason: str) -> None:
        super().__init__(f'Malformed trust store: {reason}')
        self.reason = reason


class BuildError(KettleError):
    """Root of build execution errors"""


class MalformedBuildConfigError(BuildError, ValueError):
    def __init__(self, reason: str) -> None:
        super().__init__(f'Malformed build configuration: {reason}')
        self.reason = reason


class BuildFailedError(BuildError):
    """A build command did not complete successfully"""

    def __init__(self, exit_status: int, message: str | None = None) -> None:
        super().__init__(
            message or f'Build failed with exit status {exit_status}'
        )
        self.exit_status = exit_status


class CommandNotFoundError(BuildFailedError):
    def __init__(self, command: str) -> None:
        super().__init__(127, f'Build command {command!r} was not found')
        self.command = command


class NonZeroExitError(BuildFailedError):
    def __init__(self, argv: typing.Sequence[str], exit_status: int) -> None:
        super().__init__(
            exit_status,
            f'Build command {list(argv)!r} exited with status {exit_status}',
        )
        self.argv = list(argv)


class NoOutputsMatchedError(BuildError):
    def __init__(self, globs: typing.Iterable[str]) -> None:
        patterns = list(globs)
        super().__init__(f'No build outputs matched {patterns!r}')
        self.globs = patterns


class BundleError(KettleError):
    """Root of evidence bundle storage errors"""


class MissingFileError(BundleError, FileNotFoundError):
    def __init__(self, path: pathlib.Path) -> None:
        super().__init__(f'Evidence bundle file {str(path)!r} is missing')
        self.path = path


class CorruptBundleError(BundleError, ValueError):
    def __init__(self, reason: str) -> None:
        super().__init__(f'Corrupt evidence bundle: {reason}')
        self.reason = reason


class AllowListError(KettleError):
    """Root of measurement allow-list errors"""


class MalformedAllowListError(AllowListError, ValueError):
    def __init__(self, reason: str) -> None:
        super().__init__(f'Malformed allow-list: {reason}')
        self.reason = reason


class DuplicateEntryError(AllowListError, ValueError):
    def __init__(self, measurement: str, platform_id: int) -> None:
        super().__init__(
            f'Allow-list already contains measurement {measurement} '
            f'for platform {platform_id}'
        )
        self.measurement = measurement
        self.platform_id = platform_id


class InvalidVersionError(AllowListError, ValueError):
    """Kettle versions are plain MAJOR.MINOR.PATCH triples"""

    def __init__(self, value: str) -> None:
        super().__init__(f'{value!r} is not a MAJOR.MINOR.PATCH version')
        self.value = value


class ConfidentialError(KettleError):
    """Root of confidential build flow errors"""


class PreAttestationNotVerifiedError(ConfidentialError):
    """Source sealing was attempted before the CVM was verified"""

    def __init__(self) -> None:
        super().__init__(
            'Refusing to seal source for an unverified pre-attestation'
        )


class UnsealError(ConfidentialError):
    """The sealed payload failed authentication"""

    def __init__(self) -> None:
        super().__init__('Sealed payload could not be authenticated')


class AbortedBeforeDisclosureError(ConfidentialError):
    """A pre-attestation check failed so no source was sent

    The `transcript` attribute holds the session transcript up to the
    point of failure.

    """

    def __init__(self, reason: str, transcript: object) -> None:
        super().__init__(
            f'Confidential build aborted before disclosure: {reason}'
        )
        self.reason = reason
        self.transcript = transcript


class ProtocolError(ConfidentialError):
    """An actor received a message it did not expect"""

    def __init__(self, expected: str, actual: str) -> None:
        super().__init__(f'Expected a {expected} message, got {actual}')
        self.expected = expected
        self.actual = actual
