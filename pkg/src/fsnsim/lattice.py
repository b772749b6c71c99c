"""Bethe-lattice folksodriven structure networks.

Builds the tree lattice shell by shell: an origin tag bonded to ``z``
neighbours (generation 1), every later tag to ``z - 1`` children, so
generation ``k > 0`` holds ``z * (z - 1)**(k - 1)`` nodes. Nodes carry 3-D
coordinates in the (context, exposition, resource) embedding space plus an
optional FD-tag id; bonds carry a stiffness and an ``intact`` flag that the
loading simulation may clear.

Layout: coordinates are synthetic but deterministic in the spec seed.
Children fan out on a cone around the incoming bond direction with azimuths
spaced to keep every interior node's bond offsets non-coplanar, which is
what the field solver's least-squares gradient stencils need. Branch
lengths shrink geometrically with generation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, ValidationError
from .ingest import FdTag, FormalContext, derive

DEFAULT_MAX_NODES = 1_000_000

_CONE_HALF_ANGLE = math.radians(65.0)
_BRANCH_DECAY = 0.6
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class BetheLatticeSpec:
    """Coordination number, maximum generation and layout/assignment seed."""

    z: int
    k_max: int
    seed: int = 0

    def __post_init__(self):
        if self.z < 2:
            raise ValidationError(f"coordination number must be >= 2, got {self.z}")
        if self.k_max < 0:
            raise ValidationError(f"k_max must be >= 0, got {self.k_max}")
        if not 0 <= self.seed <= _MASK64:
            raise ValidationError("seed must fit in 64 unsigned bits")

    def node_count(self) -> int:
        """1 + sum of all shell populations up to k_max."""
        return 1 + sum(shell_count(self.z, k) for k in range(1, self.k_max + 1))


@dataclass
class Node:
    id: int
    gen: int
    tag: str | None
    xyz: np.ndarray

    def copy(self) -> "Node":
        return Node(self.id, self.gen, self.tag, self.xyz.copy())


@dataclass
class Bond:
    a: int
    b: int
    stiffness: float = 1.0
    intact: bool = True

    def __post_init__(self):
        if self.stiffness <= 0:
            raise ValidationError(f"bond stiffness must be > 0, got {self.stiffness}")

    def copy(self) -> "Bond":
        return Bond(self.a, self.b, self.stiffness, self.intact)


@dataclass
class FsnLattice:
    """Tree lattice of FD-tag nodes. Treat built instances as immutable."""

    spec: BetheLatticeSpec
    nodes: list[Node] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)

    def copy(self) -> "FsnLattice":
        return FsnLattice(
            spec=self.spec,
            nodes=[n.copy() for n in self.nodes],
            bonds=[b.copy() for b in self.bonds],
        )

    def coords(self) -> np.ndarray:
        return np.array([n.xyz for n in self.nodes], dtype=float)

    def generations(self) -> np.ndarray:
        return np.array([n.gen for n in self.nodes], dtype=int)

    def node(self, node_id: int) -> Node:
        if not 0 <= node_id < len(self.nodes):
            raise ValidationError(f"unknown node id {node_id}")
        return self.nodes[node_id]

    def boundary_ids(self) -> np.ndarray:
        """Ids of the outermost shell (the Dirichlet boundary of a run)."""
        gens = self.generations()
        return np.flatnonzero(gens == self.spec.k_max)

    def to_json(self) -> dict:
        return {
            "spec": {"z": self.spec.z, "k_max": self.spec.k_max, "seed": self.spec.seed},
            "nodes": [
                {"id": n.id, "gen": n.gen, "tag": n.tag, "xyz": [float(x) for x in n.xyz]}
                for n in self.nodes
            ],
            "bonds": [
                {"a": b.a, "b": b.b, "stiffness": b.stiffness, "intact": b.intact}
                for b in self.bonds
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "FsnLattice":
        spec = BetheLatticeSpec(**data["spec"])
        nodes = [
            Node(n["id"], n["gen"], n["tag"], np.asarray(n["xyz"], dtype=float))
            for n in data["nodes"]
        ]
        bonds = [Bond(b["a"], b["b"], b["stiffness"], b["intact"]) for b in data["bonds"]]
        return cls(spec=spec, nodes=nodes, bonds=bonds)


def shell_count(z: int, k: int) -> int:
    """Population of the kth shell: z * (z - 1)**(k - 1), defined for k >= 1."""
    if z < 2:
        raise ValidationError(f"coordination number must be >= 2, got {z}")
    if k < 1:
        raise ValidationError(f"shell index must be >= 1, got {k}")
    return z * (z - 1) ** (k - 1)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _sphere_directions(n: int) -> np.ndarray:
    """n reasonably spread unit vectors (golden-spiral points on the sphere)."""
    golden = math.pi * (3.0 - math.sqrt(5.0))
    dirs = np.empty((n, 3))
    for i in range(n):
        # offset by 1/2 keeps the poles free for any n
        zc = 1.0 - 2.0 * (i + 0.5) / n
        r = math.sqrt(max(0.0, 1.0 - zc * zc))
        th = golden * i
        dirs[i] = (r * math.cos(th), r * math.sin(th), zc)
    return dirs


def _child_directions(parent_dir: np.ndarray, count: int, phase: float) -> np.ndarray:
    """Unit directions on a cone around ``parent_dir``.

    Azimuths are spaced by 2*pi / max(count, 3) so that two children are
    never antipodal in the transverse plane; together with the parent offset
    this keeps the node's bond-offset set non-coplanar.
    """
    p = _unit(parent_dir)
    helper = np.array([1.0, 0.0, 0.0]) if abs(p[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = _unit(np.cross(p, helper))
    t2 = np.cross(p, t1)
    spacing = 2.0 * math.pi / max(count, 3)
    cos_t, sin_t = math.cos(_CONE_HALF_ANGLE), math.sin(_CONE_HALF_ANGLE)
    dirs = np.empty((count, 3))
    for m in range(count):
        phi = phase + m * spacing
        dirs[m] = cos_t * p + sin_t * (math.cos(phi) * t1 + math.sin(phi) * t2)
    return dirs


def build_bethe(spec: BetheLatticeSpec, max_nodes: int = DEFAULT_MAX_NODES) -> FsnLattice:
    """Generate the tree lattice for ``spec``.

    Refuses when the projected node count exceeds ``max_nodes``. Node ids
    follow breadth-first order, so ids within a generation are contiguous.
    """
    projected = spec.node_count()
    if projected > max_nodes:
        raise CapacityError(
            f"lattice would have {projected} nodes, above the bound of {max_nodes}",
            measured=projected,
            bound=max_nodes,
        )
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    lattice = FsnLattice(spec=spec)
    lattice.nodes.append(Node(0, 0, None, np.zeros(3)))
    if spec.k_max == 0:
        return lattice

    rot = _random_rotation(rng)
    root_dirs = _sphere_directions(spec.z) @ rot.T
    length = 1.0
    # (node id, unit direction of the bond that reached it)
    frontier: list[tuple[int, np.ndarray]] = []
    for d in root_dirs:
        nid = len(lattice.nodes)
        lattice.nodes.append(Node(nid, 1, None, length * d))
        lattice.bonds.append(Bond(0, nid))
        frontier.append((nid, d))

    for gen in range(2, spec.k_max + 1):
        length *= _BRANCH_DECAY
        nxt: list[tuple[int, np.ndarray]] = []
        for parent_id, parent_dir in frontier:
            phase = rng.uniform(0.0, 2.0 * math.pi)
            for d in _child_directions(parent_dir, spec.z - 1, phase):
                nid = len(lattice.nodes)
                xyz = lattice.nodes[parent_id].xyz + length * d
                lattice.nodes.append(Node(nid, gen, None, xyz))
                lattice.bonds.append(Bond(parent_id, nid))
                nxt.append((nid, d))
        frontier = nxt
    return lattice


def generation_distance(
    lattice: FsnLattice, a: int, b: int, method: str = "sqrt_diff"
) -> float:
    """Distance between two nodes from their generation indices.

    The default is the square root of the absolute generation difference;
    ``method="abs_diff"`` selects the plain difference variant.
    """
    ka = lattice.node(a).gen
    kb = lattice.node(b).gen
    if method == "sqrt_diff":
        return math.sqrt(abs(ka - kb))
    if method == "abs_diff":
        return float(abs(ka - kb))
    raise ValidationError(f"method must be 'sqrt_diff' or 'abs_diff', got {method!r}")


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def uri_unit_hash(uri: str) -> float:
    """Stable hash of a URI into [0, 1): FNV-1a fold, splitmix finalizer."""
    h = 0xCBF29CE484222325
    for byte in uri.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return _splitmix64(h) / 2.0**64


def embedding_components(resource: str, exposition: float, context: FormalContext) -> np.ndarray:
    """The (c, e, r) coordinates of a tag on ``resource`` with given exposition.

    c is the resource's intent size normalized by the attribute count (0 for
    an attribute-free context), e the exposition, r a stable unit-interval
    hash of the URI.
    """
    if len(context.attributes) == 0:
        c = 0.0
    else:
        c = len(derive(context, [resource], "objects")) / len(context.attributes)
    return np.array([c, exposition, uri_unit_hash(resource)])


def embed(fd: FdTag, context: FormalContext) -> np.ndarray:
    """Embedding vector of an FD tag; requires its resource in the context."""
    if len(context.attributes) > 0 or len(context.objects) > 0:
        context.object_index(fd.resource)
    return embedding_components(fd.resource, fd.exposition, context)


def embedding_distance(
    x: np.ndarray, y: np.ndarray, signature: str = "euclidean"
) -> float:
    """Distance in embedding space: Euclidean, or the (+,+,-) signature form.

    The signed form returns sqrt(|dx^2 + dy^2 - dz^2|); the interval sign is
    dropped.
    """
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    if signature == "euclidean":
        return float(np.linalg.norm(d))
    if signature == "minkowski":
        q = d[0] ** 2 + d[1] ** 2 - d[2] ** 2
        return math.sqrt(abs(q))
    raise ValidationError(f"signature must be 'euclidean' or 'minkowski', got {signature!r}")


def assign_tags(
    lattice: FsnLattice, tags: Sequence[FdTag], strategy: str = "bfs"
) -> FsnLattice:
    """Return a copy of the lattice with tags attached to nodes, injectively.

    ``"bfs"`` fills nodes in generation (id) order; ``"random"`` permutes
    node slots with the lattice spec seed, so the same seed always yields
    the same assignment. Nodes beyond ``len(tags)`` carry no tag.
    """
    n = len(lattice.nodes)
    if len(tags) > n:
        raise ValidationError(f"{len(tags)} tags exceed the {n} lattice nodes")
    out = lattice.copy()
    for node in out.nodes:
        node.tag = None
    if strategy == "bfs":
        slots = range(len(tags))
    elif strategy == "random":
        rng = np.random.default_rng(np.random.PCG64(lattice.spec.seed))
        slots = rng.permutation(n)[: len(tags)]
    else:
        raise ValidationError(f"strategy must be 'bfs' or 'random', got {strategy!r}")
    for tag, slot in zip(tags, slots):
        out.nodes[int(slot)].tag = tag.id
    return out


def ontology_match(a: FdTag, b: FdTag, context: FormalContext) -> float:
    """Jaccard overlap of the closed intents of the two tags' resources.

    Symmetric, in [0, 1]; two tags on resources with equal non-empty intents
    score 1, and the score is 0 when both intents are empty.
    """
    ia = derive(context, [a.resource], "objects")
    ib = derive(context, [b.resource], "objects")
    union = ia | ib
    if not union:
        return 0.0
    return len(ia & ib) / len(union)


def save_lattice(lattice: FsnLattice, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(lattice.to_json(), fh)


def load_lattice(path) -> FsnLattice:
    with open(path, "r", encoding="utf-8") as fh:
        return FsnLattice.from_json(json.load(fh))
