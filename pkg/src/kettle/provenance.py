"""in-toto Statement carrying the SLSA build provenance predicate

The statement is serialized with [kettle.canonical.encode][] and the
SHA-256 of those bytes is what the attestation report commits to, so
the canonical bytes *are* the document.  Parsing is strict -- unknown
fields are rejected -- because any byte that the parser ignored would
still be covered by the digest without being checked by anyone.

The Merkle root of the input manifest and the build-request nonce
travel in ``buildDefinition.internalParameters`` as
``input_merkle_root`` and ``build_nonce``.

"""

import collections.abc
import typing

import pydantic

from kettle import canonical, errors, manifest, util

STATEMENT_TYPE = 'https://in-toto.io/Statement/v1'
PREDICATE_TYPE = 'https://slsa.dev/provenance/v1'
BUILDER_ID = 'https://kettle.confidential.ai/tee-builder/v1'
NONCE_SIZE = 32

DIGEST_HEX_LENGTHS: typing.Mapping[str, tuple[int, ...]] = {
    'sha256': (64,),
    'gitCommit': (40, 64),
}
"""Digest algorithms a ResourceDescriptor may use"""


def _check_digest_set(value: dict[str, str]) -> dict[str, str]:
    if not value:
        raise ValueError('at least one digest is required')
    for algorithm, digest in value.items():
        lengths = DIGEST_HEX_LENGTHS.get(algorithm)
        if lengths is None:
            raise ValueError(f'unknown digest algorithm {algorithm!r}')
        if not util.is_lower_hex(digest, *lengths):
            raise ValueError(f'{algorithm} digest {digest!r} is not valid')
    return value


DigestSet = typing.Annotated[
    dict[str, str], pydantic.AfterValidator(_check_digest_set)
]
Sha256Hex = typing.Annotated[
    str, pydantic.StringConstraints(pattern=r'^[0-9a-f]{64}$')
]


class _StatementModel(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)


class Subject(_StatementModel):
    """An artifact identified by content digest"""

    name: str = pydantic.Field(min_length=1)
    digest: DigestSet

    @pydantic.field_validator('digest')
    @classmethod
    def _require_sha256(cls, value: dict[str, str]) -> dict[str, str]:
        if 'sha256' not in value:
            raise ValueError('subjects are identified by their sha256')
        return value

    @property
    def digest_sha256(self) -> str:
        return self.digest['sha256']


class ResourceDescriptor(util.FieldOmittingMixin, _StatementModel):
    OMIT_IF_NONE = ('name',)

    uri: util.AbsoluteURI
    digest: DigestSet
    name: str | None = None


class ExternalParameters(_StatementModel):
    """Requested by the caller -- verifiers must police these"""

    repository: str
    ref: str


class InternalParameters(_StatementModel):
    """Set by Kettle inside the CVM"""

    tee_platform: str
    kettle_version: str
    input_merkle_root: Sha256Hex
    build_nonce: Sha256Hex


class BuildDefinition(_StatementModel):
    buildType: util.AbsoluteURI  # noqa: N815 -- camelCase ok here
    externalParameters: ExternalParameters  # noqa: N815
    internalParameters: InternalParameters  # noqa: N815
    resolvedDependencies: tuple[ResourceDescriptor, ...]  # noqa: N815


class Builder(_StatementModel):
    id: util.AbsoluteURI


class RunMetadata(_StatementModel):
    invocationId: str  # noqa: N815 -- camelCase ok here
    startedOn: util.Timestamp  # noqa: N815
    finishedOn: util.Timestamp  # noqa: N815

    @pydantic.model_validator(mode='after')
    def _check_ordering(self) -> typing.Self:
        if self.startedOn > self.finishedOn:
            raise ValueError('startedOn must not be after finishedOn')
        return self


class RunDetails(_StatementModel):
    builder: Builder
    metadata: RunMetadata


class SlsaPredicate(_StatementModel):
    buildDefinition: BuildDefinition  # noqa: N815 -- camelCase ok here
    runDetails: RunDetails  # noqa: N815


class ProvenanceStatement(_StatementModel):
    """in-toto Statement v1 with an SLSA provenance predicate"""

    type_: typing.Literal['https://in-toto.io/Statement/v1'] = pydantic.Field(
        default=STATEMENT_TYPE, alias='_type'
    )
    subject: tuple[Subject, ...] = pydantic.Field(min_length=1)
    predicateType: typing.Literal[  # noqa: N815 -- camelCase ok here
        'https://slsa.dev/provenance/v1'
    ] = PREDICATE_TYPE
    predicate: SlsaPredicate

    @property
    def subjects(self) -> tuple[Subject, ...]:
        return self.subject

    @property
    def input_merkle_root(self) -> bytes:
        internal = self.predicate.buildDefinition.internalParameters
        return bytes.fromhex(internal.input_merkle_root)

    @property
    def build_nonce(self) -> bytes:
        internal = self.predicate.buildDefinition.internalParameters
        return bytes.fromhex(internal.build_nonce)

    @property
    def external_parameters(self) -> ExternalParameters:
        return self.predicate.buildDefinition.externalParameters

    @property
    def builder_id(self) -> str:
        return self.predicate.runDetails.builder.id


class BuildMetadata(pydantic.BaseModel):
    """Build facts that do not come from the lock manifest"""

    model_config = pydantic.ConfigDict(frozen=True)

    build_type: util.AbsoluteURI
    tee_platform: str
    kettle_version: str
    invocation_id: str
    started_on: util.Timestamp
    finished_on: util.Timestamp
    builder_id: util.AbsoluteURI = BUILDER_ID


def source_descriptor(source: manifest.SourceIdentity) -> ResourceDescriptor:
    """The git descriptor that records what the requested ref resolved to"""
    return ResourceDescriptor(
        uri=f'git+{source.repository}@{source.ref}',
        digest={'gitCommit': source.commit_id},
    )


def assemble_statement(
    inputs: manifest.InputManifest,
    lock: manifest.LockManifest,
    outputs: collections.abc.Sequence[tuple[str, str]],
    meta: BuildMetadata,
    nonce: bytes,
) -> ProvenanceStatement:
    """Build the provenance statement for one build

    `outputs` are ``(name, sha256 hex)`` pairs and become the subjects
    in the order given. `inputs` must already carry its Merkle root.

    """
    if not outputs:
        raise errors.NoOutputsError
    if inputs.merkle_root is None:
        raise errors.ProvenanceError(
            'Input manifest has no Merkle root, build the tree first'
        )
    if len(nonce) != NONCE_SIZE:
        raise errors.SizeMismatchError('build nonce', NONCE_SIZE, len(nonce))

    dependencies = [source_descriptor(lock.source)]
    dependencies.extend(
        ResourceDescriptor(uri=entry.purl, digest={'sha256': entry.digest})
        for entry in lock.dependencies
    )
    return ProvenanceStatement(
        subject=tuple(
            Subject(name=name, digest={'sha256': digest})
            for name, digest in outputs
        ),
        predicate=SlsaPredicate(
            buildDefinition=BuildDefinition(
                buildType=meta.build_type,
                externalParameters=ExternalParameters(
                    repository=lock.source.repository, ref=lock.source.ref
                ),
                internalParameters=InternalParameters(
                    tee_platform=meta.tee_platform,
                    kettle_version=meta.kettle_version,
                    input_merkle_root=inputs.merkle_root.hex(),
                    build_nonce=nonce.hex(),
                ),
                resolvedDependencies=tuple(dependencies),
            ),
            runDetails=RunDetails(
                builder=Builder(id=meta.builder_id),
                metadata=RunMetadata(
                    invocationId=meta.invocation_id,
                    startedOn=meta.started_on,
                    finishedOn=meta.finished_on,
                ),
            ),
        ),
    )


def canonical_encode(statement: ProvenanceStatement) -> bytes:
    """The bytes that are written to ``provenance.json`` and digested"""
    return canonical.encode(statement.model_dump(mode='json', by_alias=True))


def statement_digest(statement: ProvenanceStatement) -> bytes:
    return util.sha256(canonical_encode(statement))


def parse_statement(data: bytes) -> ProvenanceStatement:
    """Strictly parse statement bytes

    Raises [kettle.errors.WrongStatementTypeError][] for a foreign
    statement or predicate type, [kettle.errors.UnknownFieldError][]
    for any field this schema does not define, and
    [kettle.errors.MalformedStatementError][] for everything else,
    including a missing type field.

    """
    raw = canonical.decode(data)
    if not isinstance(raw, dict):
        raise errors.MalformedStatementError('statement is not an object')
    for field, expected in (
        ('_type', STATEMENT_TYPE),
        ('predicateType', PREDICATE_TYPE),
    ):
        if field not in raw:
            raise errors.MalformedStatementError(f'{field}: field required')
        if raw[field] != expected:
            raise errors.WrongStatementTypeError(field, raw[field])
    try:
        return ProvenanceStatement.model_validate(raw)
    except pydantic.ValidationError as error:
        details = error.errors()
        for detail in details:
            if detail['type'] == 'extra_forbidden':
                raise errors.UnknownFieldError(
                    '.'.join(str(p) for p in detail['loc'])
                ) from None
        raise errors.MalformedStatementError(
            '; '.join(
                '{}: {}'.format(
                    '.'.join(str(p) for p in d['loc']), d['msg']
                )
                for d in details
            )
        ) from None
