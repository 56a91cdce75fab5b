"""Pinned build inputs and their canonical enumeration

The project's ``kettle.lock.json`` pins the source identity, the raw
lockfile digest, every dependency and every toolchain binary.  This
module parses that file, checks pre-fetched dependency bytes against
their pins, and turns the manifest into the ordered list of labelled
leaves that seeds the input Merkle tree.

Leaf order is fixed by convention so that anyone holding the same
manifest reconstructs the same tree:

1. ``src.commit`` -- SHA-256 of the raw commit id bytes
2. ``src.tree`` -- the source tree digest
3. ``lockfile`` -- the lockfile digest
4. ``dep.<name>@<version>`` -- dependencies, byte-wise by name
5. ``tool.<tool_name>`` -- toolchain binaries in declared order

Each leaf is ``UTF-8(label) || 0x00 || digest``.

"""

import hashlib
import hmac
import pathlib
import typing

import pydantic

from kettle import errors, util

SHA256_HEX_LENGTH = 64
GIT_COMMIT_HEX_LENGTHS = (40, 64)
LEAF_SEPARATOR = b'\x00'

BlobResolver = typing.Callable[[str], bytes | None]
"""Maps a dependency name to its pre-fetched bytes (`None` if unknown)"""


class _LockModel(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)


class SourceIdentity(_LockModel):
    """Where the source came from and what it hashed to"""

    repository: str = pydantic.Field(min_length=1)
    ref: str = pydantic.Field(min_length=1)
    commit_id: str
    tree_digest: str
    signed: bool = False

    @pydantic.field_validator('commit_id')
    @classmethod
    def _check_commit_id(cls, value: str) -> str:
        return util.check_hex('commit_id', value, *GIT_COMMIT_HEX_LENGTHS)

    @pydantic.field_validator('tree_digest')
    @classmethod
    def _check_tree_digest(cls, value: str) -> str:
        return util.check_hex('tree_digest', value, SHA256_HEX_LENGTH)


class DependencyEntry(_LockModel):
    name: str = pydantic.Field(min_length=1)
    version: str = pydantic.Field(min_length=1)
    purl: str
    digest: str = pydantic.Field(alias='sha256')
    local_path: str | None = pydantic.Field(default=None, alias='path')

    @pydantic.field_validator('purl')
    @classmethod
    def _check_purl(cls, value: str) -> str:
        if not value.startswith('pkg:'):
            raise ValueError(f'{value!r} is not a package URL')
        return value

    @pydantic.field_validator('digest')
    @classmethod
    def _check_digest(cls, value: str) -> str:
        return util.check_hex('sha256', value, SHA256_HEX_LENGTH)

    @pydantic.field_validator('local_path')
    @classmethod
    def _check_local_path(cls, value: str | None) -> str | None:
        if value is not None:
            util.safe_relative_path(value)
        return value

    @property
    def label(self) -> str:
        return f'dep.{self.name}@{self.version}'


class ToolchainEntry(_LockModel):
    tool_name: str = pydantic.Field(alias='tool', min_length=1)
    digest: str = pydantic.Field(alias='sha256')

    @pydantic.field_validator('digest')
    @classmethod
    def _check_digest(cls, value: str) -> str:
        return util.check_hex('sha256', value, SHA256_HEX_LENGTH)

    @property
    def label(self) -> str:
        return f'tool.{self.tool_name}'


def dependency_sort_key(entry: DependencyEntry) -> bytes:
    """Byte-wise ordering of dependency names (uppercase sorts first)"""
    return entry.name.encode('utf-8')


class LockManifest(_LockModel):
    """The parsed ``kettle.lock.json``

    `dependencies` is always held in canonical order regardless of
    the order in the file.

    """

    source: SourceIdentity
    lockfile_digest: str = pydantic.Field(alias='lockfile_sha256')
    dependencies: tuple[DependencyEntry, ...]
    toolchain: tuple[ToolchainEntry, ...]

    @pydantic.field_validator('lockfile_digest')
    @classmethod
    def _check_lockfile_digest(cls, value: str) -> str:
        return util.check_hex('lockfile_sha256', value, SHA256_HEX_LENGTH)

    @pydantic.field_validator('dependencies')
    @classmethod
    def _canonicalize_dependencies(
        cls, value: tuple[DependencyEntry, ...]
    ) -> tuple[DependencyEntry, ...]:
        seen: set[str] = set()
        for entry in value:
            if entry.name in seen:
                raise errors.DuplicateDependencyError(entry.name)
            seen.add(entry.name)
        return tuple(sorted(value, key=dependency_sort_key))

    @pydantic.field_validator('toolchain')
    @classmethod
    def _check_toolchain(
        cls, value: tuple[ToolchainEntry, ...]
    ) -> tuple[ToolchainEntry, ...]:
        names = [entry.tool_name for entry in value]
        if len(set(names)) != len(names):
            raise ValueError('toolchain entries must have unique names')
        return value

    def dependency(self, name: str) -> DependencyEntry:
        for entry in self.dependencies:
            if entry.name == name:
                return entry
        raise KeyError(name)


def parse_lock_manifest(raw_bytes: bytes) -> LockManifest:
    """Parse the contents of a ``kettle.lock.json`` file

    Raises [kettle.errors.MalformedManifestError][] for syntax errors,
    missing or unknown fields, [kettle.errors.BadDigestError][] for
    digests that are not lowercase hex of the right length, and
    [kettle.errors.DuplicateDependencyError][] when a dependency
    name appears twice.

    """
    try:
        return LockManifest.model_validate_json(raw_bytes)
    except pydantic.ValidationError as error:
        raise errors.MalformedManifestError(
            '; '.join(
                '{}: {}'.format(
                    '.'.join(str(p) for p in detail['loc']) or '<root>',
                    detail['msg'],
                )
                for detail in error.errors()
            )
        ) from None


class InputCheck(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    name: str
    digest: str


class InputVerificationReport(pydantic.BaseModel):
    """Every dependency that was checked, in manifest order"""

    model_config = pydantic.ConfigDict(frozen=True)

    checks: tuple[InputCheck, ...]


def verify_pinned_inputs(
    manifest: LockManifest, blob_resolver: BlobResolver
) -> InputVerificationReport:
    """Check every dependency blob against its pinned digest

    This must run before any build step. The first mismatch raises
    [kettle.errors.InputMismatchError][]; a dependency whose bytes
    cannot be resolved raises [kettle.errors.MissingBlobError][].

    """
    logger = util.get_logger_for(verify_pinned_inputs)
    checks = []
    for entry in manifest.dependencies:
        try:
            blob = blob_resolver(entry.name)
        except (KeyError, FileNotFoundError):
            blob = None
        if blob is None:
            raise errors.MissingBlobError(entry.name)
        actual = util.sha256_hex(blob)
        if not hmac.compare_digest(actual, entry.digest):
            logger.warning(
                'dependency %s@%s does not match its pin: %s != %s',
                entry.name,
                entry.version,
                actual,
                entry.digest,
            )
            raise errors.InputMismatchError(entry.name, entry.digest, actual)
        logger.debug('dependency %s verified as %s', entry.label, actual)
        checks.append(InputCheck(name=entry.name, digest=actual))
    return InputVerificationReport(checks=tuple(checks))


def directory_resolver(
    root: pathlib.Path, manifest: LockManifest
) -> BlobResolver:
    """Resolve dependencies to the files named by their `path` field

    Paths are interpreted relative to `root`.

    """
    paths = {
        entry.name: pathlib.PurePosixPath(entry.local_path)
        for entry in manifest.dependencies
        if entry.local_path is not None
    }

    def resolve(name: str) -> bytes | None:
        try:
            return (root / paths[name]).read_bytes()
        except (KeyError, FileNotFoundError):
            return None

    return resolve


def digest_source_tree(
    root: pathlib.Path, *, exclude: typing.Collection[str] = ('.git',)
) -> str:
    """Content digest of every regular file below `root`

    Files are visited in byte-wise order of their relative POSIX path
    and each contributes ``len64(path) || path || len64(d) || d`` where
    ``d`` is the SHA-256 of its contents. Any path with a component
    in `exclude` is skipped.

    """
    entries = sorted(
        (path.relative_to(root).as_posix().encode('utf-8'), path)
        for path in root.rglob('*')
        if path.is_file()
        and not _excluded(path.relative_to(root), exclude)
    )
    hasher = hashlib.sha256()
    for relative, path in entries:
        hasher.update(
            util.length_prefixed(relative, util.sha256(path.read_bytes()))
        )
    return hasher.hexdigest()


def _excluded(
    relative: pathlib.PurePath, exclude: typing.Collection[str]
) -> bool:
    return any(part in exclude for part in relative.parts)


def verify_source_tree(source: SourceIdentity, root: pathlib.Path) -> None:
    """Raise [kettle.errors.SourceTreeMismatchError][] on modified source"""
    actual = digest_source_tree(root)
    if not hmac.compare_digest(actual, source.tree_digest):
        raise errors.SourceTreeMismatchError(source.tree_digest, actual)


class Leaf(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    label: str
    leaf_bytes: bytes


class InputManifest(pydantic.BaseModel):
    """Labelled leaves in canonical order

    `merkle_root` is filled in by [kettle.merkle.build_tree][].

    """

    ordered_leaves: tuple[Leaf, ...]
    merkle_root: bytes | None = None

    @property
    def labels(self) -> list[str]:
        return [leaf.label for leaf in self.ordered_leaves]

    def index_of(self, label: str) -> int:
        for index, leaf in enumerate(self.ordered_leaves):
            if leaf.label == label:
                return index
        raise errors.UnknownLeafError(label)


def make_leaf(label: str, digest: bytes) -> Leaf:
    return Leaf(
        label=label,
        leaf_bytes=label.encode('utf-8') + LEAF_SEPARATOR + digest,
    )


def enumerate_inputs(manifest: LockManifest) -> InputManifest:
    """Produce the canonical leaf list for `manifest`

    The caller is expected to have run [verify_pinned_inputs][] first.
    Commit ids are re-digested with SHA-256 so that SHA-1 and SHA-256
    repositories produce equally sized leaves.

    """
    source = manifest.source
    leaves = [
        make_leaf('src.commit', util.sha256(bytes.fromhex(source.commit_id))),
        make_leaf('src.tree', bytes.fromhex(source.tree_digest)),
        make_leaf('lockfile', bytes.fromhex(manifest.lockfile_digest)),
    ]
    leaves.extend(
        make_leaf(entry.label, bytes.fromhex(entry.digest))
        for entry in manifest.dependencies
    )
    leaves.extend(
        make_leaf(entry.label, bytes.fromhex(entry.digest))
        for entry in manifest.toolchain
    )
    util.get_logger_for(enumerate_inputs).debug(
        'enumerated %d input leaves', len(leaves)
    )
    return InputManifest(ordered_leaves=tuple(leaves))
