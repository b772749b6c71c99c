"""Tag-event ingestion and formal concept analysis.

Turns raw folksonomy tag events (JSONL: one click/impression record per line)
into the building blocks of a folksodriven tag: a formal context over
resources and tag tokens, a time-exposition value (clickthrough rate) per
(tag, resource) pair, and the FD-tag tuples that the lattice module embeds.

Conventions chosen here (the event data itself does not dictate them):

* Tokenization is a plain whitespace/punctuation splitter: ASCII-fold,
  lowercase, keep alphanumeric runs of length >= 2, drop a fixed English
  stopword list, deduplicate preserving first occurrence.
* Context objects are resource URIs and attributes are tag tokens by
  default; ``object_role="tags"`` swaps the two readings.
* Exposition pools all events of a (tag, uri) group into a single ratio;
  groups with zero total impressions are excluded (the ratio is undefined).

All functions are pure; none mutate their inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Callable, IO, Iterable, Iterator, Union

import numpy as np

from .errors import CapacityError, ValidationError

logger = logging.getLogger(__name__)

STOPWORDS = frozenset(
    """a an and are as at be but by for from has have if in into is it its of on
    or that the their then there these this those to was were will with you
    your we our i he she they them""".split()
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Default refusal bound for concept enumeration, in incidence cells |T|*|D|.
DEFAULT_MAX_CELLS = 1_000_000


@dataclass(frozen=True)
class TagEvent:
    """One tagging record: a tag applied to a resource plus its CTR counts."""

    tag_label: str
    resource_uri: str
    timestamp: int
    impressions: int
    clicks: int


@dataclass(frozen=True)
class ParseResult:
    events: list[TagEvent]
    skipped: int


@dataclass(frozen=True)
class Concept:
    """A closed (extent, intent) pair of a formal context."""

    extent: frozenset[str]
    intent: frozenset[str]


class FormalContext:
    """A formal context (T, D, I): objects, attributes and their incidence.

    ``objects`` and ``attributes`` are ordered, duplicate-free label tuples;
    ``incidence`` is a read-only boolean matrix of shape (|T|, |D|).
    """

    def __init__(
        self,
        objects: Iterable[str],
        attributes: Iterable[str],
        incidence: np.ndarray,
    ):
        self.objects = tuple(objects)
        self.attributes = tuple(attributes)
        if len(set(self.objects)) != len(self.objects):
            raise ValidationError("duplicate object ids in context")
        if len(set(self.attributes)) != len(self.attributes):
            raise ValidationError("duplicate attributes in context")
        incidence = np.asarray(incidence, dtype=bool)
        if incidence.shape != (len(self.objects), len(self.attributes)):
            raise ValidationError(
                f"incidence shape {incidence.shape} does not match "
                f"({len(self.objects)}, {len(self.attributes)})"
            )
        incidence = incidence.copy()
        incidence.setflags(write=False)
        self.incidence = incidence
        self._obj_index = {o: i for i, o in enumerate(self.objects)}
        self._attr_index = {a: j for j, a in enumerate(self.attributes)}

    @classmethod
    def from_pairs(
        cls,
        objects: Iterable[str],
        attributes: Iterable[str],
        pairs: Iterable[tuple[str, str]],
    ) -> "FormalContext":
        objects = tuple(objects)
        attributes = tuple(attributes)
        oi = {o: i for i, o in enumerate(objects)}
        ai = {a: j for j, a in enumerate(attributes)}
        inc = np.zeros((len(objects), len(attributes)), dtype=bool)
        for o, a in pairs:
            if o not in oi:
                raise ValidationError(f"incidence pair references unknown object {o!r}")
            if a not in ai:
                raise ValidationError(f"incidence pair references unknown attribute {a!r}")
            inc[oi[o], ai[a]] = True
        return cls(objects, attributes, inc)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FormalContext)
            and self.objects == other.objects
            and self.attributes == other.attributes
            and bool(np.array_equal(self.incidence, other.incidence))
        )

    def __repr__(self) -> str:
        return (
            f"FormalContext(|T|={len(self.objects)}, |D|={len(self.attributes)}, "
            f"|I|={int(self.incidence.sum())})"
        )

    def object_index(self, obj: str) -> int:
        try:
            return self._obj_index[obj]
        except KeyError:
            raise ValidationError(f"unknown object {obj!r}") from None

    def attribute_index(self, attr: str) -> int:
        try:
            return self._attr_index[attr]
        except KeyError:
            raise ValidationError(f"unknown attribute {attr!r}") from None

    def has_object(self, obj: str) -> bool:
        return obj in self._obj_index

    def digest(self) -> str:
        """Stable content hash, used as the context reference of FD tags."""
        payload = {
            "objects": list(self.objects),
            "attributes": list(self.attributes),
            "incidence": [[int(i), int(j)] for i, j in np.argwhere(self.incidence)],
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_json(self) -> dict:
        return {
            "objects": list(self.objects),
            "attributes": list(self.attributes),
            "incidence": [[int(i), int(j)] for i, j in np.argwhere(self.incidence)],
        }

    @classmethod
    def from_json(cls, data: dict) -> "FormalContext":
        inc = np.zeros((len(data["objects"]), len(data["attributes"])), dtype=bool)
        for i, j in data["incidence"]:
            inc[i, j] = True
        return cls(data["objects"], data["attributes"], inc)


@dataclass
class FdTag:
    """A folksodriven tag: context reference, exposition, resource, embedding."""

    id: str
    context_ref: str
    exposition: float
    resource: str
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not 0.0 <= self.exposition <= 1.0:
            raise ValidationError(
                f"exposition {self.exposition} outside [0, 1] for tag {self.id!r}"
            )
        self.embedding = np.asarray(self.embedding, dtype=float)
        if self.embedding.shape != (3,) or not np.all(np.isfinite(self.embedding)):
            raise ValidationError(f"embedding of tag {self.id!r} must be a finite 3-vector")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "context_ref": self.context_ref,
            "exposition": self.exposition,
            "resource": self.resource,
            "embedding": [float(x) for x in self.embedding],
        }

    @classmethod
    def from_json(cls, data: dict) -> "FdTag":
        return cls(
            id=data["id"],
            context_ref=data["context_ref"],
            exposition=data["exposition"],
            resource=data["resource"],
            embedding=np.asarray(data["embedding"], dtype=float),
        )


def _event_problem(rec: dict) -> str | None:
    """Return a reason string if the decoded record is invalid, else None."""
    for key, typ in (("tag", str), ("uri", str), ("ts", int), ("imp", int), ("clk", int)):
        if key not in rec:
            return f"missing field {key!r}"
        if not isinstance(rec[key], typ) or isinstance(rec[key], bool):
            return f"field {key!r} has wrong type"
    if not rec["tag"].strip():
        return "empty tag label"
    if not rec["uri"].strip():
        return "empty resource uri"
    if rec["imp"] < 0 or rec["clk"] < 0:
        return "negative count"
    if rec["clk"] > rec["imp"]:
        return "clicks exceed impressions"
    return None


def parse_events(stream: Union[IO[bytes], IO[str], Iterable[Union[bytes, str]]]) -> ParseResult:
    """Parse line-delimited JSON tag events.

    Valid events are returned in input order; malformed lines (bad JSON,
    missing/ill-typed fields, violated count invariants) are logged and
    counted in ``skipped``. Blank lines are ignored. Stream read errors
    propagate as I/O errors.
    """
    events: list[TagEvent] = []
    skipped = 0
    for lineno, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError:
                logger.warning("line %d: undecodable bytes, skipped", lineno)
                skipped += 1
                continue
        else:
            line = raw
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            logger.warning("line %d: invalid JSON, skipped", lineno)
            skipped += 1
            continue
        if not isinstance(rec, dict):
            logger.warning("line %d: record is not an object, skipped", lineno)
            skipped += 1
            continue
        problem = _event_problem(rec)
        if problem is not None:
            logger.warning("line %d: %s, skipped", lineno, problem)
            skipped += 1
            continue
        events.append(
            TagEvent(
                tag_label=rec["tag"].strip(),
                resource_uri=rec["uri"].strip(),
                timestamp=rec["ts"],
                impressions=rec["imp"],
                clicks=rec["clk"],
            )
        )
    return ParseResult(events=events, skipped=skipped)


def serialize_events(events: Iterable[TagEvent]) -> Iterator[str]:
    """Yield canonical JSONL lines (the inverse of :func:`parse_events`)."""
    for ev in events:
        yield json.dumps(
            {
                "tag": ev.tag_label,
                "uri": ev.resource_uri,
                "ts": ev.timestamp,
                "imp": ev.impressions,
                "clk": ev.clicks,
            },
            separators=(",", ":"),
            ensure_ascii=False,
        )


def compute_exposition(
    events: Iterable[TagEvent],
) -> tuple[dict[tuple[str, str], float], list[tuple[str, str]]]:
    """Pooled clickthrough rate per (tag, uri) group.

    Returns ``(exposition, excluded)`` where exposition maps each group to
    sum(clicks)/sum(impressions) and ``excluded`` lists groups whose total
    impressions are zero (ratio undefined, so no value is assigned).
    """
    totals: dict[tuple[str, str], list[int]] = {}
    for ev in events:
        key = (ev.tag_label, ev.resource_uri)
        tot = totals.setdefault(key, [0, 0])
        tot[0] += ev.clicks
        tot[1] += ev.impressions
    exposition: dict[tuple[str, str], float] = {}
    excluded: list[tuple[str, str]] = []
    for key, (clk, imp) in totals.items():
        if imp == 0:
            excluded.append(key)
            logger.warning("group %r has zero impressions; exposition undefined", key)
        else:
            exposition[key] = clk / imp
    return exposition, excluded


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric tokens, ASCII-folded, len >= 2, stopword-free.

    Order of first occurrence is preserved and duplicates are dropped.
    """
    folded = unicodedata.normalize("NFKD", text)
    folded = "".join(ch for ch in folded if not unicodedata.combining(ch))
    seen: dict[str, None] = {}
    for token in _TOKEN_RE.findall(folded.lower()):
        if len(token) >= 2 and token not in STOPWORDS:
            seen.setdefault(token, None)
    return list(seen)


def build_formal_context(
    events: Iterable[TagEvent], object_role: str = "resources"
) -> FormalContext:
    """Build the context relating resources to the tag tokens applied to them.

    With the default ``object_role="resources"`` the objects are distinct
    resource URIs and the attributes are the tokens of all tag labels used
    on each resource; ``object_role="tags"`` transposes the two readings.
    Both orders follow first appearance in the event stream.
    """
    if object_role not in ("resources", "tags"):
        raise ValidationError(f"object_role must be 'resources' or 'tags', got {object_role!r}")
    uris: dict[str, None] = {}
    tokens: dict[str, None] = {}
    pairs: set[tuple[str, str]] = set()
    for ev in events:
        uris.setdefault(ev.resource_uri, None)
        for tok in tokenize(ev.tag_label):
            tokens.setdefault(tok, None)
            pairs.add((ev.resource_uri, tok))
    if object_role == "resources":
        return FormalContext.from_pairs(list(uris), list(tokens), pairs)
    return FormalContext.from_pairs(list(tokens), list(uris), [(t, u) for u, t in pairs])


def derive(context: FormalContext, items: Iterable[str], side: str = "objects") -> frozenset[str]:
    """The prime operator: attributes common to all given objects (or dually).

    ``derive(ctx, [], "objects")`` returns all attributes (universal
    quantification over the empty set), and dually for the attribute side.
    """
    items = list(items)
    if side == "objects":
        rows = [context.object_index(o) for o in items]
        if not rows:
            return frozenset(context.attributes)
        mask = np.logical_and.reduce(context.incidence[rows, :])
        return frozenset(a for a, hit in zip(context.attributes, mask) if hit)
    if side == "attributes":
        cols = [context.attribute_index(a) for a in items]
        if not cols:
            return frozenset(context.objects)
        mask = np.logical_and.reduce(context.incidence[:, cols], axis=1)
        return frozenset(o for o, hit in zip(context.objects, mask) if hit)
    raise ValidationError(f"side must be 'objects' or 'attributes', got {side!r}")


def closure(context: FormalContext, objects: Iterable[str]) -> frozenset[str]:
    """Double derivation of an object set (its closure)."""
    return derive(context, derive(context, objects, "objects"), "attributes")


def enumerate_concepts(
    context: FormalContext, max_cells: int = DEFAULT_MAX_CELLS
) -> list[Concept]:
    """All formal concepts, sorted by extent size then lexicographic extent.

    Intents are generated as the intersection closure of the object rows
    (every concept intent is an intersection of a subset of rows, the empty
    subset contributing the full attribute set), which equals the closure of
    every object subset but dedupes by memoized intent. Refuses contexts
    whose incidence exceeds ``max_cells`` cells.
    """
    n_obj, n_attr = context.incidence.shape
    cells = n_obj * n_attr
    if cells > max_cells:
        raise CapacityError(
            f"context has {cells} incidence cells, above the bound of {max_cells}",
            measured=cells,
            bound=max_cells,
        )
    full = (1 << n_attr) - 1
    rows = []
    for i in range(n_obj):
        mask = 0
        for j in np.flatnonzero(context.incidence[i]):
            mask |= 1 << int(j)
        rows.append(mask)

    intents = {full}
    frontier = [full]
    while frontier:
        nxt = []
        for intent in frontier:
            for row in rows:
                meet = intent & row
                if meet not in intents:
                    intents.add(meet)
                    nxt.append(meet)
        frontier = nxt

    concepts = []
    for intent in intents:
        extent = frozenset(
            context.objects[i] for i, row in enumerate(rows) if row & intent == intent
        )
        intent_set = frozenset(
            context.attributes[j] for j in range(n_attr) if intent >> j & 1
        )
        concepts.append(Concept(extent=extent, intent=intent_set))
    concepts.sort(key=lambda c: (len(c.extent), tuple(sorted(c.extent))))
    return concepts


def build_fd_tags(
    context: FormalContext,
    pairs: Iterable[tuple[str, str]],
    exposition: dict[tuple[str, str], float],
    embedding: Callable[[str, float, FormalContext], np.ndarray] | None = None,
) -> list[FdTag]:
    """One FD tag per (tag, uri) pair, embedded in (context, exposition, uri) space.

    ``embedding(resource, exposition, context)`` computes the 3-vector; by
    default the lattice module's embedding is used. Tag ids are
    ``"<tag>::<uri>"``. Raises if any pair lacks an exposition value.
    """
    pairs = list(dict.fromkeys(pairs))
    missing = [p for p in pairs if p not in exposition]
    if missing:
        raise ValidationError(f"pairs without exposition values: {missing}")
    if embedding is None:
        from .lattice import embedding_components

        embedding = embedding_components
    ref = context.digest()
    tags = []
    for tag_label, uri in pairs:
        e = exposition[(tag_label, uri)]
        vec = embedding(uri, e, context)
        tags.append(
            FdTag(
                id=f"{tag_label}::{uri}",
                context_ref=ref,
                exposition=e,
                resource=uri,
                embedding=vec,
            )
        )
    return tags
