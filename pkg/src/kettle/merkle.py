"""SHA-256 Merkle tree over the input manifest

Leaves and nodes are domain separated and every hashed value is
length prefixed with its 8-byte big-endian length:

    leaf = SHA-256(0x00 || len64(leaf_bytes) || leaf_bytes)
    node = SHA-256(0x01 || len64(left) || left || len64(right) || right)

An unpaired node at the end of a level is promoted unchanged to the
next level instead of being paired with itself.  This means that an
inclusion proof for a leaf whose path crosses a promotion has fewer
siblings than the tree has levels.

"""

import enum
import hmac
import typing

import pydantic

from kettle import errors, manifest, util

LEAF_PREFIX = b'\x00'
NODE_PREFIX = b'\x01'
DIGEST_SIZE = 32

Digest = typing.Annotated[util.HexBytes, util.exact_size(DIGEST_SIZE)]


def hash_leaf(leaf_bytes: bytes) -> bytes:
    return util.sha256(LEAF_PREFIX + util.length_prefixed(leaf_bytes))


def hash_node(left: bytes, right: bytes) -> bytes:
    return util.sha256(NODE_PREFIX + util.length_prefixed(left, right))


class MerkleTree:
    """Every level of the tree, leaves first

    `levels[0]` holds the leaf digests and `levels[-1]` holds only
    the root. Instances are immutable after construction.

    """

    __slots__ = ('_levels',)

    def __init__(self, leaves: typing.Sequence[bytes]) -> None:
        if not leaves:
            raise errors.EmptyManifestError
        level = tuple(hash_leaf(leaf) for leaf in leaves)
        levels = [level]
        while len(level) > 1:
            paired = [
                hash_node(level[i], level[i + 1])
                for i in range(0, len(level) - 1, 2)
            ]
            if len(level) % 2:
                paired.append(level[-1])
            level = tuple(paired)
            levels.append(level)
        self._levels = tuple(levels)

    @property
    def levels(self) -> tuple[tuple[bytes, ...], ...]:
        return self._levels

    @property
    def leaf_count(self) -> int:
        return len(self._levels[0])

    @property
    def height(self) -> int:
        """Number of levels above the leaves"""
        return len(self._levels) - 1

    @property
    def root(self) -> bytes:
        return self._levels[-1][0]


def build_tree(inputs: manifest.InputManifest) -> MerkleTree:
    """Build the tree for `inputs` and record its root on `inputs`"""
    tree = MerkleTree([leaf.leaf_bytes for leaf in inputs.ordered_leaves])
    inputs.merkle_root = tree.root
    util.get_logger_for(build_tree).debug(
        'built %d-leaf tree with root %s', tree.leaf_count, tree.root.hex()
    )
    return tree


class Side(enum.StrEnum):
    """Which side of the running digest a sibling is hashed on"""

    LEFT = 'left'
    RIGHT = 'right'


class Sibling(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra='forbid')

    digest: Digest = pydantic.Field(alias='digest_hex')
    side: Side


class InclusionProof(pydantic.BaseModel):
    """Path from one leaf to the root

    The JSON form is what the ``kettle inclusion`` commands emit and
    consume.

    """

    model_config = pydantic.ConfigDict(frozen=True, extra='forbid')

    leaf_index: int = pydantic.Field(ge=0)
    leaf_digest: Digest = pydantic.Field(alias='leaf_digest_hex')
    siblings: tuple[Sibling, ...] = ()


def prove_inclusion(tree: MerkleTree, leaf_index: int) -> InclusionProof:
    if not 0 <= leaf_index < tree.leaf_count:
        raise errors.IndexOutOfRangeError(leaf_index, tree.leaf_count)
    siblings = []
    index = leaf_index
    for level in tree.levels[:-1]:
        partner = index ^ 1
        if partner < len(level):
            side = Side.RIGHT if index % 2 == 0 else Side.LEFT
            siblings.append(Sibling(digest_hex=level[partner], side=side))
        index //= 2
    return InclusionProof(
        leaf_index=leaf_index,
        leaf_digest_hex=tree.levels[0][leaf_index],
        siblings=tuple(siblings),
    )


def verify_inclusion(root: bytes, proof: InclusionProof) -> bool:
    """Does folding the proof's leaf digest through its path yield `root`?"""
    running = proof.leaf_digest
    for sibling in proof.siblings:
        if sibling.side is Side.RIGHT:
            running = hash_node(running, sibling.digest)
        else:
            running = hash_node(sibling.digest, running)
    return hmac.compare_digest(running, root)
