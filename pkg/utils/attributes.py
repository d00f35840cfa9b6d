import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from utils.errors import IndexOutOfRange, ParseError, SchemaMismatch

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA_PATH = Path(__file__).with_name("default_schema.txt")
DEFAULT_ATTRIBUTE_COUNT = 15
DEFAULT_BINARY_DIMS = 88


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered soft-biometric labels and their binary expansion.

    Categorical labels (cardinality >= 2) expand one-hot; cardinality-1 labels
    are already binary and take raw values 0 or 1.
    """
    attributes: Tuple[Tuple[str, int], ...]
    total_binary_dims: Optional[int] = None
    offsets: Tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        attributes = tuple((str(name), int(card)) for name, card in self.attributes)
        if not attributes:
            raise SchemaMismatch("schema has no attributes")
        names = [name for name, _ in attributes]
        if len(set(names)) != len(names):
            raise SchemaMismatch(f"duplicate attribute names in schema: {names}")
        for name, card in attributes:
            if card < 1:
                raise SchemaMismatch(f"attribute {name} has cardinality {card}")
        total = sum(card for _, card in attributes)
        if self.total_binary_dims is not None and self.total_binary_dims != total:
            raise SchemaMismatch(f"cardinalities sum to {total}, schema declares {self.total_binary_dims}")
        object.__setattr__(self, "attributes", attributes)
        object.__setattr__(self, "total_binary_dims", total)
        object.__setattr__(self, "offsets", tuple(int(o) for o in np.cumsum([0] + [c for _, c in attributes])[:-1]))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "AttributeSchema":
        """Parse `name,cardinality` lines; '#' starts a comment"""
        entries = []
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = [p.strip() for p in line.split(",")]
                if len(parts) != 2 or not parts[0]:
                    raise ParseError(f"expected 'name,cardinality', got {raw.strip()!r}", line=lineno)
                try:
                    entries.append((parts[0], int(parts[1])))
                except ValueError:
                    raise ParseError(f"cardinality {parts[1]!r} is not an integer", line=lineno)
        return cls(tuple(entries))

    @classmethod
    def default(cls) -> "AttributeSchema":
        return cls.from_file(DEFAULT_SCHEMA_PATH)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.attributes]

    def __len__(self) -> int:
        return len(self.attributes)

    def dimension_names(self) -> List[str]:
        """One label per binary dimension, e.g. 'upper_color:3'"""
        labels = []
        for name, card in self.attributes:
            labels.extend([name] if card == 1 else [f"{name}:{c}" for c in range(card)])
        return labels

    def slice_of(self, name: str) -> slice:
        idx = self.names.index(name)
        start = self.offsets[idx]
        return slice(start, start + self.attributes[idx][1])

    def encode(self, raw: Sequence[int]) -> "AttributeVector":
        """Expand per-attribute category indices into the binary vector"""
        if len(raw) != len(self.attributes):
            raise SchemaMismatch(f"expected {len(self.attributes)} attribute values, got {len(raw)}")
        bits = np.zeros(self.total_binary_dims, dtype=np.uint8)
        for (name, card), offset, value in zip(self.attributes, self.offsets, raw):
            value = int(value)
            limit = 2 if card == 1 else card
            if not 0 <= value < limit:
                raise IndexOutOfRange(f"{name}={value} outside [0, {limit})")
            if card == 1:
                bits[offset] = value
            else:
                bits[offset + value] = 1
        return AttributeVector(bits)

    def decode(self, vector: "AttributeVector") -> Tuple[int, ...]:
        if len(vector.bits) != self.total_binary_dims:
            raise SchemaMismatch(f"vector has {len(vector.bits)} bits, schema has {self.total_binary_dims}")
        raw = []
        for name, card in self.attributes:
            chunk = vector.bits[self.slice_of(name)]
            raw.append(int(chunk[0]) if card == 1 else int(np.argmax(chunk)))
        return tuple(raw)


@dataclass(frozen=True)
class AttributeVector:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=np.uint8).reshape(-1)
        if np.any(bits > 1):
            raise SchemaMismatch("attribute bits must be 0 or 1")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return len(self.bits)

    def __eq__(self, other) -> bool:
        return isinstance(other, AttributeVector) and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash(self.bits.tobytes())


@dataclass(frozen=True)
class PairwiseAttributeVector:
    bits: np.ndarray
    exclusive_count: int
    exclusive_indices: np.ndarray
    common_indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.bits)

    @property
    def is_degenerate(self) -> bool:
        return self.exclusive_count in (0, len(self.bits))


def pairwise_xor(a: AttributeVector, b: AttributeVector) -> PairwiseAttributeVector:
    """Exclusive attributes are the set bits of a XOR b; the rest are common"""
    if len(a) != len(b):
        raise SchemaMismatch(f"attribute vectors differ in length: {len(a)} vs {len(b)}")
    bits = np.bitwise_xor(a.bits, b.bits)
    bits.flags.writeable = False
    exclusive = np.flatnonzero(bits)
    common = np.flatnonzero(bits == 0)
    return PairwiseAttributeVector(bits, int(len(exclusive)), exclusive, common)


def load_attribute_table(path: Union[str, Path], schema: AttributeSchema) -> Dict[str, Tuple[int, ...]]:
    """Read `person_id,<attr1>,...` into person_id -> raw category indices"""
    try:
        frame = pd.read_csv(path, dtype={"person_id": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"attribute table {path}: {e}")
    expected = ["person_id"] + schema.names
    if list(frame.columns) != expected:
        raise SchemaMismatch(f"attribute table header {list(frame.columns)} does not match schema {expected}")
    table = {}
    for row_number, row in enumerate(frame.itertuples(index=False), start=2):
        person_id = str(row[0])
        try:
            raw = tuple(int(v) for v in row[1:])
        except (TypeError, ValueError):
            raise ParseError(f"non-integer attribute value for person {person_id}", line=row_number)
        schema.encode(raw)
        if person_id in table:
            raise ParseError(f"duplicate person_id {person_id}", line=row_number)
        table[person_id] = raw
    logger.info(f"Loaded attributes for {len(table)} identities from {path}")
    return table


def write_attribute_table(path: Union[str, Path], table: Dict[str, Sequence[int]], schema: AttributeSchema) -> None:
    rows = [[pid] + [int(v) for v in raw] for pid, raw in table.items()]
    pd.DataFrame(rows, columns=["person_id"] + schema.names).to_csv(path, index=False)


def write_schema(path: Union[str, Path], schema: AttributeSchema) -> None:
    lines = [f"{name},{card}" for name, card in schema.attributes]
    Path(path).write_text("\n".join(lines) + "\n")
