"""Record types and file formats for episodes, embeddings, and scene metadata.

Three line-oriented JSON formats plus one binary container:

* Episodes (JSONL): one task episode per line with keys ``episode_id``,
  ``taxonomy``, ``subtask``, ``shots``, ``query``, ``gold``.
* Embeddings (JSONL): one vector per line with keys ``id``, ``modality``,
  ``dim``, ``values``.
* Metadata (JSONL): one scene per line with keys ``scene_id``, ``instances``,
  ``scene_attributes``, ``scores``.
* Embeddings (binary): magic ``UIEB``, version u32 LE, count u32, dim u32,
  then per record a u16 id length, the UTF-8 id bytes, and ``dim`` float32
  values (little-endian).  Detected on load by the magic bytes.

All records are immutable after construction and safe to share across
threads.  Loaders report parse errors with line numbers and invariant
violations with field paths; they never return partially valid data.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Iterable, Iterator, Sequence

from .errors import ValidationError

# Capability taxonomy, in canonical report order.
TAXONOMY_ORDER = (
    "Perception",
    "Imitation",
    "Conception",
    "Deduction",
    "Analogy",
    "Discernment",
)
TAXONOMIES = frozenset(TAXONOMY_ORDER)

# Canonical subtask -> owning taxonomy level.  Unknown subtask names are
# tolerated with a warning; a known name paired with the wrong level is an
# error.
SUBTASK_TO_TAXONOMY = {
    "Visual Grounding": "Perception",
    "Attribute Recognition": "Perception",
    "Image Manipulation": "Perception",
    "Style-Aware Caption": "Imitation",
    "Scene Reasoning": "Imitation",
    "Instructional Generation": "Imitation",
    "Fast Concept Mapping": "Conception",
    "Fast Concept Generation": "Conception",
    "World-Aware Planning": "Deduction",
    "Chain-of-Editing": "Deduction",
    "Analogical Inference": "Analogy",
    "Analogical Editing": "Analogy",
    "Aesthetic Assessment": "Discernment",
    "Forgery Detection": "Discernment",
    "Visual Refinement": "Discernment",
}

EMBEDDING_MODALITIES = ("visual", "text")

DEFAULT_MAX_SHOTS = 8

CONTAINER_MAGIC = b"UIEB"
CONTAINER_VERSION = 1


class UnknownSubtaskWarning(UserWarning):
    """A subtask name outside the canonical table was encountered."""


def _check_finite(values: Sequence[float], path: str) -> None:
    for i, v in enumerate(values):
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            raise ValidationError(f"{path}[{i}]: non-finite or non-numeric value {v!r}")


# ---------------------------------------------------------------------------
# record types


@dataclass(frozen=True)
class DemoOutput:
    """One-of output payload: generated text or a reference to an image."""

    text: str | None = None
    image_ref: str | None = None

    def __post_init__(self) -> None:
        if (self.text is None) == (self.image_ref is None):
            raise ValidationError("output: exactly one of text/image_ref must be set")

    def to_json(self) -> dict[str, str]:
        if self.text is not None:
            return {"text": self.text}
        return {"image_ref": self.image_ref}  # type: ignore[dict-item]

    @staticmethod
    def from_json(obj: Any, path: str = "output") -> "DemoOutput":
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: expected an object")
        unknown = set(obj) - {"text", "image_ref"}
        if unknown:
            raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
        text = obj.get("text")
        image_ref = obj.get("image_ref")
        for key, val in (("text", text), ("image_ref", image_ref)):
            if val is not None and not isinstance(val, str):
                raise ValidationError(f"{path}.{key}: expected a string")
        try:
            return DemoOutput(text=text, image_ref=image_ref)
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class Demonstration:
    """A single demonstration: optional image, instruction, optional output."""

    id: str
    instruction: str = ""
    image_ref: str | None = None
    output: DemoOutput | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("id: must be a non-empty string")
        if self.image_ref is None and not self.instruction:
            raise ValidationError(
                f"demonstration {self.id!r}: at least one of image_ref/instruction required"
            )

    def to_json(self) -> dict[str, Any]:
        obj: dict[str, Any] = {"id": self.id}
        if self.image_ref is not None:
            obj["image_ref"] = self.image_ref
        obj["instruction"] = self.instruction
        if self.output is not None:
            obj["output"] = self.output.to_json()
        return obj

    @staticmethod
    def from_json(obj: Any, path: str = "demonstration") -> "Demonstration":
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: expected an object")
        rid = obj.get("id")
        if not isinstance(rid, str) or not rid:
            raise ValidationError(f"{path}.id: must be a non-empty string")
        instruction = obj.get("instruction", "")
        if not isinstance(instruction, str):
            raise ValidationError(f"{path}.instruction: expected a string")
        image_ref = obj.get("image_ref")
        if image_ref is not None and not isinstance(image_ref, str):
            raise ValidationError(f"{path}.image_ref: expected a string")
        output = None
        if obj.get("output") is not None:
            output = DemoOutput.from_json(obj["output"], f"{path}.output")
        try:
            return Demonstration(id=rid, instruction=instruction, image_ref=image_ref, output=output)
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class Episode:
    """A task episode: shots (support demonstrations), a query, optional gold."""

    episode_id: str
    taxonomy: str
    subtask: str
    shots: tuple[Demonstration, ...]
    query: Demonstration
    gold: DemoOutput | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.episode_id, str) or not self.episode_id:
            raise ValidationError("episode_id: must be a non-empty string")
        if self.taxonomy not in TAXONOMIES:
            raise ValidationError(
                f"taxonomy: {self.taxonomy!r} is not one of {sorted(TAXONOMIES)}"
            )
        expected = SUBTASK_TO_TAXONOMY.get(self.subtask)
        if expected is None:
            warnings.warn(
                f"episode {self.episode_id!r}: unknown subtask {self.subtask!r}",
                UnknownSubtaskWarning,
                stacklevel=2,
            )
        elif expected != self.taxonomy:
            raise ValidationError(
                f"subtask: {self.subtask!r} belongs to taxonomy {expected!r}, got {self.taxonomy!r}"
            )
        seen: set[str] = set()
        for i, shot in enumerate(self.shots):
            if shot.id in seen:
                raise ValidationError(f"shots[{i}].id: duplicate id {shot.id!r}")
            seen.add(shot.id)
        if self.query.output is not None:
            raise ValidationError("query.output: must be absent on the query demonstration")

    def to_json(self) -> dict[str, Any]:
        obj: dict[str, Any] = {
            "episode_id": self.episode_id,
            "taxonomy": self.taxonomy,
            "subtask": self.subtask,
            "shots": [s.to_json() for s in self.shots],
            "query": self.query.to_json(),
        }
        if self.gold is not None:
            obj["gold"] = self.gold.to_json()
        return obj

    @staticmethod
    def from_json(obj: Any, path: str = "episode") -> "Episode":
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: expected an object")
        episode_id = obj.get("episode_id")
        if not isinstance(episode_id, str) or not episode_id:
            raise ValidationError(f"{path}.episode_id: must be a non-empty string")
        taxonomy = obj.get("taxonomy")
        if not isinstance(taxonomy, str):
            raise ValidationError(f"{path}.taxonomy: expected a string")
        subtask = obj.get("subtask")
        if not isinstance(subtask, str):
            raise ValidationError(f"{path}.subtask: expected a string")
        shots_obj = obj.get("shots")
        if not isinstance(shots_obj, list):
            raise ValidationError(f"{path}.shots: expected a list")
        shots = tuple(
            Demonstration.from_json(s, f"{path}.shots[{i}]") for i, s in enumerate(shots_obj)
        )
        if "query" not in obj:
            raise ValidationError(f"{path}.query: missing")
        query = Demonstration.from_json(obj["query"], f"{path}.query")
        gold = None
        if obj.get("gold") is not None:
            gold = DemoOutput.from_json(obj["gold"], f"{path}.gold")
        try:
            return Episode(
                episode_id=episode_id,
                taxonomy=taxonomy,
                subtask=subtask,
                shots=shots,
                query=query,
                gold=gold,
            )
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class EmbeddingRecord:
    """A dense feature vector for one item in one modality."""

    id: str
    modality: str
    dim: int
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("id: must be a non-empty string")
        if self.modality not in EMBEDDING_MODALITIES:
            raise ValidationError(
                f"modality: {self.modality!r} is not one of {EMBEDDING_MODALITIES}"
            )
        if not isinstance(self.dim, int) or self.dim < 1:
            raise ValidationError(f"dim: must be a positive integer, got {self.dim!r}")
        if len(self.values) != self.dim:
            raise ValidationError(
                f"values: length {len(self.values)} does not match dim {self.dim}"
            )
        _check_finite(self.values, "values")

    def norm(self) -> float:
        return math.sqrt(math.fsum(v * v for v in self.values))

    def normalized(self) -> "EmbeddingRecord":
        """Return a unit-norm copy; idempotent to within 1e-12."""
        n = self.norm()
        if n == 0.0:
            raise ValidationError(f"embedding {self.id!r}: zero-norm vector cannot be normalized")
        return EmbeddingRecord(
            id=self.id,
            modality=self.modality,
            dim=self.dim,
            values=tuple(v / n for v in self.values),
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "modality": self.modality,
            "dim": self.dim,
            "values": list(self.values),
        }

    @staticmethod
    def from_json(obj: Any, path: str = "embedding") -> "EmbeddingRecord":
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: expected an object")
        rid = obj.get("id")
        if not isinstance(rid, str) or not rid:
            raise ValidationError(f"{path}.id: must be a non-empty string")
        modality = obj.get("modality")
        if not isinstance(modality, str):
            raise ValidationError(f"{path}.modality: expected a string")
        dim = obj.get("dim")
        if not isinstance(dim, int) or isinstance(dim, bool):
            raise ValidationError(f"{path}.dim: expected an integer")
        values = obj.get("values")
        if not isinstance(values, list):
            raise ValidationError(f"{path}.values: expected a list")
        try:
            return EmbeddingRecord(
                id=rid, modality=modality, dim=dim, values=tuple(float(v) for v in values)
            )
        except (TypeError, ValueError):
            raise ValidationError(f"{path}.values: expected numbers") from None
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class Instance:
    """One detected object in a scene."""

    category: str
    attributes: dict[str, str] = field(default_factory=dict)
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if not isinstance(self.category, str) or not self.category:
            raise ValidationError("category: must be a non-empty string")
        if len(self.bbox) != 4:
            raise ValidationError("bbox: expected [x0, y0, x1, y1]")
        x0, y0, x1, y1 = self.bbox
        for name, v in zip(("x0", "y0", "x1", "y1"), self.bbox):
            if not isinstance(v, (int, float)) or not math.isfinite(v) or not 0.0 <= v <= 1.0:
                raise ValidationError(f"bbox.{name}: must be a number in [0, 1], got {v!r}")
        if x0 > x1 or y0 > y1:
            raise ValidationError(f"bbox: corners out of order {self.bbox}")

    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0

    def to_json(self) -> dict[str, Any]:
        return {
            "category": self.category,
            "attributes": dict(self.attributes),
            "bbox": list(self.bbox),
        }

    @staticmethod
    def from_json(obj: Any, path: str = "instance") -> "Instance":
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: expected an object")
        category = obj.get("category")
        attributes = obj.get("attributes", {})
        if not isinstance(attributes, dict):
            raise ValidationError(f"{path}.attributes: expected an object")
        for k, v in attributes.items():
            if not isinstance(v, str):
                raise ValidationError(f"{path}.attributes.{k}: expected a string")
        bbox = obj.get("bbox")
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise ValidationError(f"{path}.bbox: expected [x0, y0, x1, y1]")
        try:
            return Instance(
                category=category,  # type: ignore[arg-type]
                attributes=dict(attributes),
                bbox=tuple(float(v) for v in bbox),  # type: ignore[arg-type]
            )
        except (TypeError, ValueError):
            raise ValidationError(f"{path}.bbox: expected numbers") from None
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class MetadataRecord:
    """Structured description of one candidate scene."""

    scene_id: str
    instances: tuple[Instance, ...] = ()
    scene_attributes: dict[str, str] = field(default_factory=dict)
    scores: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.scene_id, str) or not self.scene_id:
            raise ValidationError("scene_id: must be a non-empty string")
        for k, v in self.scores.items():
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise ValidationError(f"scores.{k}: must be a finite number, got {v!r}")

    def to_json(self) -> dict[str, Any]:
        return {
            "scene_id": self.scene_id,
            "instances": [i.to_json() for i in self.instances],
            "scene_attributes": dict(self.scene_attributes),
            "scores": dict(self.scores),
        }

    @staticmethod
    def from_json(obj: Any, path: str = "metadata") -> "MetadataRecord":
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: expected an object")
        scene_id = obj.get("scene_id")
        if not isinstance(scene_id, str) or not scene_id:
            raise ValidationError(f"{path}.scene_id: must be a non-empty string")
        inst_obj = obj.get("instances", [])
        if not isinstance(inst_obj, list):
            raise ValidationError(f"{path}.instances: expected a list")
        instances = tuple(
            Instance.from_json(o, f"{path}.instances[{i}]") for i, o in enumerate(inst_obj)
        )
        scene_attributes = obj.get("scene_attributes", {})
        if not isinstance(scene_attributes, dict):
            raise ValidationError(f"{path}.scene_attributes: expected an object")
        for k, v in scene_attributes.items():
            if not isinstance(v, str):
                raise ValidationError(f"{path}.scene_attributes.{k}: expected a string")
        scores = obj.get("scores", {})
        if not isinstance(scores, dict):
            raise ValidationError(f"{path}.scores: expected an object")
        try:
            return MetadataRecord(
                scene_id=scene_id,
                instances=instances,
                scene_attributes=dict(scene_attributes),
                scores={k: float(v) for k, v in scores.items()},
            )
        except (TypeError, ValueError):
            raise ValidationError(f"{path}.scores: expected numbers") from None
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class ShotCurve:
    """Performance sampled over a shot grid (values on a 0-100 scale)."""

    shots: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.shots) != len(self.values):
            raise ValidationError(
                f"curve: {len(self.shots)} shots vs {len(self.values)} values"
            )
        for i, s in enumerate(self.shots):
            if not isinstance(s, int) or isinstance(s, bool) or s < 0:
                raise ValidationError(f"shots[{i}]: must be a non-negative integer, got {s!r}")
            if i > 0 and s <= self.shots[i - 1]:
                raise ValidationError(f"shots[{i}]: grid must be strictly increasing")
        _check_finite(self.values, "values")

    def value_at(self, shot: int) -> float:
        try:
            return self.values[self.shots.index(shot)]
        except ValueError:
            raise ValidationError(f"curve: shot {shot} not on grid {self.shots}") from None


# ---------------------------------------------------------------------------
# JSONL plumbing


def _iter_jsonl(path: str) -> Iterator[tuple[int, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: line {lineno}: parse error: {exc.msg}") from None


def _write_jsonl(path: str, objs: Iterable[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False))
            fh.write("\n")


def load_episodes(path: str, max_shots: int = DEFAULT_MAX_SHOTS) -> list[Episode]:
    """Load and validate an episode JSONL file.

    ``max_shots`` is the explicit override for the default shot-count ceiling
    of 8.  Duplicate ``episode_id`` values are rejected.
    """
    episodes: list[Episode] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        try:
            ep = Episode.from_json(obj)
        except ValidationError as exc:
            raise ValidationError(f"{path}: line {lineno}: {exc}") from None
        if len(ep.shots) > max_shots:
            raise ValidationError(
                f"{path}: line {lineno}: episode.shots: shot count out of range "
                f"(got {len(ep.shots)}, max {max_shots})"
            )
        if ep.episode_id in seen:
            raise ValidationError(
                f"{path}: line {lineno}: duplicate episode_id {ep.episode_id!r}"
            )
        seen.add(ep.episode_id)
        episodes.append(ep)
    return episodes


def save_episodes(episodes: Iterable[Episode], path: str) -> None:
    _write_jsonl(path, (ep.to_json() for ep in episodes))


def load_metadata(path: str) -> list[MetadataRecord]:
    """Load a metadata JSONL file; duplicate scene ids are rejected."""
    records: list[MetadataRecord] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        try:
            rec = MetadataRecord.from_json(obj)
        except ValidationError as exc:
            raise ValidationError(f"{path}: line {lineno}: {exc}") from None
        if rec.scene_id in seen:
            raise ValidationError(f"{path}: line {lineno}: duplicate scene_id {rec.scene_id!r}")
        seen.add(rec.scene_id)
        records.append(rec)
    return records


def save_metadata(records: Iterable[MetadataRecord], path: str) -> None:
    _write_jsonl(path, (r.to_json() for r in records))


# ---------------------------------------------------------------------------
# embedding store


class EmbeddingStore:
    """Embeddings keyed by (modality, id), with per-modality dim consistency."""

    def __init__(self) -> None:
        self._by_modality: dict[str, dict[str, EmbeddingRecord]] = {
            m: {} for m in EMBEDDING_MODALITIES
        }

    def add(self, record: EmbeddingRecord) -> None:
        bucket = self._by_modality[record.modality]
        if record.id in bucket:
            raise ValidationError(
                f"duplicate id {record.id!r} for modality {record.modality!r}"
            )
        if bucket:
            expect = next(iter(bucket.values())).dim
            if record.dim != expect:
                raise ValidationError(
                    f"embedding {record.id!r}: dim {record.dim} inconsistent with "
                    f"{record.modality} dim {expect}"
                )
        bucket[record.id] = record

    def get(self, item_id: str, modality: str) -> EmbeddingRecord | None:
        return self._by_modality[modality].get(item_id)

    def require(self, item_id: str, modality: str) -> EmbeddingRecord:
        rec = self.get(item_id, modality)
        if rec is None:
            raise ValidationError(f"missing embedding for id {item_id!r} ({modality})")
        return rec

    def ids(self, modality: str) -> list[str]:
        return list(self._by_modality[modality])

    def dim(self, modality: str) -> int | None:
        bucket = self._by_modality[modality]
        if not bucket:
            return None
        return next(iter(bucket.values())).dim

    def __len__(self) -> int:
        return sum(len(b) for b in self._by_modality.values())

    def __iter__(self) -> Iterator[EmbeddingRecord]:
        for modality in EMBEDDING_MODALITIES:
            yield from self._by_modality[modality].values()


def load_embeddings(
    path: str, normalize: bool = False, binary_modality: str = "visual"
) -> EmbeddingStore:
    """Load embeddings from JSONL or the binary container (auto-detected).

    The binary container stores no modality; records from it are tagged with
    ``binary_modality``.  With ``normalize=True`` every vector is scaled to
    unit norm; zero vectors are rejected.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
    store = EmbeddingStore()
    if magic == CONTAINER_MAGIC:
        with open(path, "rb") as fh:
            dim, entries = read_vector_block(fh)
            trailing = fh.read(1)
        if trailing:
            raise ValidationError(f"{path}: trailing bytes after container block")
        for rid, values in entries:
            rec = EmbeddingRecord(
                id=rid, modality=binary_modality, dim=dim, values=tuple(float(v) for v in values)
            )
            store.add(rec.normalized() if normalize else rec)
        return store
    for lineno, obj in _iter_jsonl(path):
        try:
            rec = EmbeddingRecord.from_json(obj)
            if normalize:
                rec = rec.normalized()
            store.add(rec)
        except ValidationError as exc:
            raise ValidationError(f"{path}: line {lineno}: {exc}") from None
    return store


def save_embeddings_jsonl(records: Iterable[EmbeddingRecord], path: str) -> None:
    _write_jsonl(path, (r.to_json() for r in records))


def save_embeddings_binary(records: Sequence[EmbeddingRecord], path: str) -> None:
    """Write records into one binary container block (single shared dim)."""
    if not records:
        raise ValidationError("binary container: at least one record required")
    dim = records[0].dim
    for r in records:
        if r.dim != dim:
            raise ValidationError(
                f"binary container: mixed dims ({r.dim} vs {dim}); split by modality first"
            )
    with open(path, "wb") as fh:
        write_vector_block(fh, [(r.id, r.values) for r in records], dim)


# ---------------------------------------------------------------------------
# binary container primitives (shared with parameter serialization)


def write_vector_block(
    fh: BinaryIO, entries: Sequence[tuple[str, Sequence[float]]], dim: int
) -> None:
    """Write one container block: header plus ``len(entries)`` records."""
    fh.write(CONTAINER_MAGIC)
    fh.write(struct.pack("<III", CONTAINER_VERSION, len(entries), dim))
    for rid, values in entries:
        ident = rid.encode("utf-8")
        if len(ident) > 0xFFFF:
            raise ValidationError(f"id too long for container: {rid!r}")
        if len(values) != dim:
            raise ValidationError(f"record {rid!r}: {len(values)} values, expected {dim}")
        fh.write(struct.pack("<H", len(ident)))
        fh.write(ident)
        fh.write(struct.pack(f"<{dim}f", *values))


def read_vector_block(fh: BinaryIO) -> tuple[int, list[tuple[str, tuple[float, ...]]]]:
    """Read one container block; raises on bad magic/version or truncation."""
    magic = fh.read(4)
    if magic != CONTAINER_MAGIC:
        raise ValidationError(f"bad container magic {magic!r}")
    header = fh.read(12)
    if len(header) != 12:
        raise ValidationError("truncated container header")
    version, count, dim = struct.unpack("<III", header)
    if version != CONTAINER_VERSION:
        raise ValidationError(f"unsupported container version {version}")
    if dim < 1:
        raise ValidationError(f"container dim must be positive, got {dim}")
    entries: list[tuple[str, tuple[float, ...]]] = []
    for i in range(count):
        raw = fh.read(2)
        if len(raw) != 2:
            raise ValidationError(f"truncated container at record {i}")
        (id_len,) = struct.unpack("<H", raw)
        ident = fh.read(id_len)
        if len(ident) != id_len:
            raise ValidationError(f"truncated id at record {i}")
        payload = fh.read(4 * dim)
        if len(payload) != 4 * dim:
            raise ValidationError(f"truncated values at record {i}")
        values = struct.unpack(f"<{dim}f", payload)
        entries.append((ident.decode("utf-8"), values))
    return dim, entries
