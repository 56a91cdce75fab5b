"""Offline verification of evidence bundles

Verification runs four steps in order and stops at the first failure:

attestation
:   the report chains to a trusted root, its launch measurement is on
    the allow-list and its report_data carries the expected nonce

binding
:   SHA-256 of ``provenance.json`` equals the first half of
    report_data

artifact
:   every artifact hashes to its subject digest in the statement

policy
:   the requested repository, ref and builder are the expected ones

After the binding step parses the statement, its ``build_nonce`` is
cross-checked against report_data.  A mismatch there is recorded as a
failure of the *attestation* step since it is a freshness failure.

Nothing in this module touches the file system or the network.

"""

import enum
import hmac
import re
import typing

import pydantic

from kettle import attestation, errors, orchestrator, provenance, util

_VERSION_PATTERN = re.compile(
    r'v?(0|[1-9][0-9]*)\.(0|[1-9][0-9]*)\.(0|[1-9][0-9]*)'
)

Measurement = typing.Annotated[
    util.HexBytes, util.exact_size(attestation.MEASUREMENT_SIZE)
]


def parse_version(value: str) -> tuple[int, int, int]:
    """Parse ``MAJOR.MINOR.PATCH`` (optionally prefixed with ``v``)

    Pre-release and build suffixes have no defined ordering here and
    are rejected with [kettle.errors.InvalidVersionError][].

    """
    match = _VERSION_PATTERN.fullmatch(value)
    if match is None:
        raise errors.InvalidVersionError(value)
    major, minor, patch = (int(part) for part in match.groups())
    return major, minor, patch


def _check_version(value: str) -> str:
    parse_version(value)
    return value


Version = typing.Annotated[str, pydantic.AfterValidator(_check_version)]


class AllowListEntry(pydantic.BaseModel):
    """One acceptable launch measurement"""

    model_config = pydantic.ConfigDict(
        extra='forbid', frozen=True, populate_by_name=True
    )

    measurement: Measurement = pydantic.Field(alias='measurement_hex')
    kettle_version: Version
    platform_id: attestation.UInt8
    min_firmware: attestation.UInt32 = 0


_ALLOWLIST_ADAPTER = pydantic.TypeAdapter(tuple[AllowListEntry, ...])


def _reject_duplicates(entries: typing.Iterable[AllowListEntry]) -> None:
    seen: set[tuple[bytes, int]] = set()
    for entry in entries:
        key = (entry.measurement, entry.platform_id)
        if key in seen:
            raise errors.DuplicateEntryError(
                entry.measurement.hex(), entry.platform_id
            )
        seen.add(key)


def load_allowlist(data: bytes) -> tuple[AllowListEntry, ...]:
    """Parse ``allowlist.json``

    Raises [kettle.errors.MalformedAllowListError][] for invalid
    entries and [kettle.errors.DuplicateEntryError][] when a
    measurement appears twice for the same platform.

    """
    try:
        entries = _ALLOWLIST_ADAPTER.validate_json(data)
    except pydantic.ValidationError as error:
        raise errors.MalformedAllowListError(str(error)) from None
    _reject_duplicates(entries)
    return entries


def dump_allowlist(entries: typing.Iterable[AllowListEntry]) -> bytes:
    return _ALLOWLIST_ADAPTER.dump_json(
        tuple(entries), by_alias=True, indent=2
    )


def add_entry(
    entries: typing.Sequence[AllowListEntry], entry: AllowListEntry
) -> tuple[AllowListEntry, ...]:
    updated = (*entries, entry)
    _reject_duplicates(updated)
    return updated


class AllowListPolicy(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    allowlist: tuple[AllowListEntry, ...] = pydantic.Field(min_length=1)
    min_version: Version = '0.0.0'
    required_platform: attestation.UInt8 = attestation.PlatformId.SIM


class VerificationPolicy(AllowListPolicy):
    """What the verifier is willing to accept for one bundle"""

    expected_external_parameters: provenance.ExternalParameters
    expected_nonce: typing.Annotated[
        util.HexBytes, util.exact_size(provenance.NONCE_SIZE)
    ]
    expected_builder_id: util.AbsoluteURI = provenance.BUILDER_ID


class AllowListMatch(pydantic.BaseModel):
    """Result of [check_allowlist][kettle.verifier.check_allowlist]"""

    model_config = pydantic.ConfigDict(frozen=True)

    passed: bool
    entry: AllowListEntry | None = None
    reason: str = ''

    def __bool__(self) -> bool:
        return self.passed


def check_allowlist(
    measurement: bytes, chain_firmware: int, policy: AllowListPolicy
) -> AllowListMatch:
    """Find an entry that accepts `measurement`

    An entry accepts when the measurement matches exactly, its Kettle
    version is at least ``policy.min_version``, it is for the
    required platform and `chain_firmware` meets its firmware floor.

    """
    minimum = parse_version(policy.min_version)
    candidates = [
        entry
        for entry in policy.allowlist
        if hmac.compare_digest(entry.measurement, measurement)
    ]
    if not candidates:
        return AllowListMatch(
            passed=False,
            reason=f'measurement {measurement.hex()} is not allow-listed',
        )
    reasons = []
    for entry in candidates:
        if parse_version(entry.kettle_version) < minimum:
            reasons.append(
                f'kettle {entry.kettle_version} is older than '
                f'{policy.min_version}'
            )
        elif entry.platform_id != policy.required_platform:
            reasons.append(
                f'entry is for platform {entry.platform_id}, '
                f'policy requires {policy.required_platform}'
            )
        elif chain_firmware < entry.min_firmware:
            reasons.append(
                f'firmware {chain_firmware} is below {entry.min_firmware}'
            )
        else:
            return AllowListMatch(passed=True, entry=entry)
    return AllowListMatch(passed=False, reason='; '.join(reasons))


class Step(enum.StrEnum):
    ATTESTATION = 'attestation'
    BINDING = 'binding'
    ARTIFACT = 'artifact'
    POLICY = 'policy'


class StepResult(pydantic.BaseModel):
    """`passed` is `None` for steps that were not evaluated"""

    model_config = pydantic.ConfigDict(frozen=True)

    step: Step
    passed: bool | None
    reason: str = ''

    @property
    def evaluated(self) -> bool:
        return self.passed is not None


class VerificationOutcome(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    passed: bool
    step_results: tuple[StepResult, ...]

    @property
    def failed_step(self) -> Step | None:
        for result in self.step_results:
            if result.passed is False:
                return result.step
        return None

    def __bool__(self) -> bool:
        return self.passed


def _outcome(
    failed: Step | None, reason: str = '', *, evaluated: int | None = None
) -> VerificationOutcome:
    """Build an outcome where `failed` failed and later steps were skipped

    `evaluated` overrides how many steps are reported as evaluated.

    """
    steps = list(Step)
    failed_index = len(steps) if failed is None else steps.index(failed)
    last = failed_index + 1 if evaluated is None else evaluated
    results = []
    for index, step in enumerate(steps):
        if step is failed:
            results.append(StepResult(step=step, passed=False, reason=reason))
        elif index < last:
            results.append(StepResult(step=step, passed=True))
        else:
            results.append(
                StepResult(step=step, passed=None, reason='not evaluated')
            )
    return VerificationOutcome(
        passed=failed is None, step_results=tuple(results)
    )


def _attestation_failure(
    bundle: orchestrator.EvidenceBundle,
    policy: VerificationPolicy,
    store: attestation.TrustStore,
) -> str | None:
    report, chain = bundle.report, bundle.chain
    check = attestation.verify_report(report, chain, store)
    if not check:
        return f'report verification failed: {check.reason}'
    if report.platform_id != policy.required_platform:
        return (
            f'report is from platform {report.platform_id}, '
            f'policy requires {policy.required_platform}'
        )
    match = check_allowlist(report.measurement, chain.firmware_version, policy)
    if not match:
        return match.reason
    if not hmac.compare_digest(report.report_data[32:], policy.expected_nonce):
        return 'report_data does not carry the expected nonce'
    return None


def _artifact_failure(
    bundle: orchestrator.EvidenceBundle,
    statement: provenance.ProvenanceStatement,
) -> str | None:
    subjects = {s.name: s.digest_sha256 for s in statement.subjects}
    artifacts = {a.name: a for a in bundle.artifacts}
    for name, artifact in artifacts.items():
        expected = subjects.get(name)
        if expected is None:
            return f'artifact {name!r} is not a subject of the statement'
        actual = util.sha256_hex(artifact.content)
        if not hmac.compare_digest(actual, expected):
            return (
                f'artifact {name!r} hashes to {actual}, '
                f'statement records {expected}'
            )
    missing = sorted(set(subjects) - set(artifacts))
    if missing:
        return f'subjects without artifacts: {", ".join(missing)}'
    return None


def _policy_failure(
    statement: provenance.ProvenanceStatement, policy: VerificationPolicy
) -> str | None:
    if statement.external_parameters != policy.expected_external_parameters:
        actual = statement.external_parameters
        expected = policy.expected_external_parameters
        return (
            f'built {actual.repository}@{actual.ref}, '
            f'expected {expected.repository}@{expected.ref}'
        )
    if statement.builder_id != policy.expected_builder_id:
        return f'unexpected builder {statement.builder_id}'
    return None


def verify_bundle(
    bundle: orchestrator.EvidenceBundle,
    policy: VerificationPolicy,
    store: attestation.TrustStore,
) -> VerificationOutcome:
    """Run the verification steps over `bundle`

    Failures are reported in the returned outcome.  A statement that
    is bound by the report but does not parse raises
    [kettle.errors.CorruptBundleError][].

    """
    logger = util.get_logger_for(verify_bundle)

    reason = _attestation_failure(bundle, policy, store)
    if reason is not None:
        logger.warning('attestation step failed: %s', reason)
        return _outcome(Step.ATTESTATION, reason)

    digest = util.sha256(bundle.provenance_bytes)
    if not hmac.compare_digest(digest, bundle.report.report_data[:32]):
        reason = (
            f'provenance digest {digest.hex()} is not the one committed '
            f'to by the report'
        )
        logger.warning('binding step failed: %s', reason)
        return _outcome(Step.BINDING, reason)

    try:
        statement = bundle.statement()
    except errors.ProvenanceError as error:
        raise errors.CorruptBundleError(str(error)) from None
    if not hmac.compare_digest(
        statement.build_nonce, bundle.report.report_data[32:]
    ):
        reason = 'provenance build_nonce does not match report_data'
        logger.warning('attestation step failed: %s', reason)
        return _outcome(Step.ATTESTATION, reason, evaluated=2)

    reason = _artifact_failure(bundle, statement)
    if reason is not None:
        logger.warning('artifact step failed: %s', reason)
        return _outcome(Step.ARTIFACT, reason)

    reason = _policy_failure(statement, policy)
    if reason is not None:
        logger.warning('policy step failed: %s', reason)
        return _outcome(Step.POLICY, reason)

    logger.debug('bundle verified')
    return _outcome(None)
