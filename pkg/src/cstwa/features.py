"""Field schema, vocabularies, encoded datasets and row-sparse embedding tables."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .nn import AdamConfig, adam_update, check_finite

log = logging.getLogger(__name__)

SIDES = ("user", "item", "context")
CLICK, CONVERSION = "click", "conversion"


@dataclass(frozen=True)
class FieldSpec:
    name: str
    side: str
    is_entity_id: bool = False

    def __post_init__(self):
        if self.side not in SIDES:
            raise ConfigError(f"field {self.name!r}: side must be one of {SIDES}, got {self.side!r}")
        if self.is_entity_id and self.side == "context":
            raise ConfigError(f"field {self.name!r}: context fields cannot be entity ids")


class Schema:
    """Ordered field list. Fields are grouped user, item, context; declared order is kept within a side."""

    def __init__(self, fields: Sequence[FieldSpec]):
        names = [f.name for f in fields]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate field names in {names}")
        if CLICK in names or CONVERSION in names:
            raise ConfigError("'click' and 'conversion' are reserved label columns")
        self.fields: tuple[FieldSpec, ...] = tuple(sorted(fields, key=lambda f: SIDES.index(f.side)))
        for side in ("user", "item"):
            ids = [f for f in self.fields if f.side == side and f.is_entity_id]
            if len(ids) != 1:
                raise ConfigError(f"need exactly one {side} entity-id field, found {len(ids)}")

    def __len__(self) -> int:
        return len(self.fields)

    def __eq__(self, other) -> bool:
        return isinstance(other, Schema) and self.fields == other.fields

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def columns(self, side: str) -> list[int]:
        return [i for i, f in enumerate(self.fields) if f.side == side]

    def count(self, side: str) -> int:
        return len(self.columns(side))

    def entity_column(self, side: str) -> int:
        return next(i for i, f in enumerate(self.fields) if f.side == side and f.is_entity_id)

    def side_columns(self, sides: Iterable[str]) -> list[int]:
        sides = set(sides)
        bad = sides - set(SIDES)
        if bad:
            raise ConfigError(f"unknown sides {sorted(bad)}")
        return [i for i, f in enumerate(self.fields) if f.side in sides]


def read_field_specs(path: str | Path) -> Schema:
    """Parse ``name,side,is_entity_id`` lines. Blank lines and ``#`` comments are skipped."""
    fields = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise ConfigError(f"{path}:{n}: expected 'name,side,is_entity_id' with is_entity_id in {{0,1}}")
        fields.append(FieldSpec(parts[0], parts[1], parts[2] == "1"))
    return Schema(fields)


def write_field_specs(schema: Schema, path: str | Path) -> None:
    lines = [f"{f.name},{f.side},{int(f.is_entity_id)}" for f in schema.fields]
    Path(path).write_text("\n".join(lines) + "\n")


class Vocabulary:
    """Per-field raw value -> index maps. Index 0 is the out-of-vocabulary slot of every field."""

    def __init__(self, schema: Schema, values: Mapping[str, Sequence[str]]):
        self.schema = schema
        # values[name] lists the kept raw values in index order, starting at index 1
        self._decode = {name: [None, *values[name]] for name in schema.names}
        self._encode = {name: {v: i for i, v in enumerate(vals) if i} for name, vals in self._decode.items()}

    def index(self, name: str, raw: str) -> int:
        return self._encode[name].get(raw, 0)

    def decode(self, name: str, idx: int) -> str | None:
        return self._decode[name][idx]

    def cardinality(self, name: str) -> int:
        return len(self._decode[name])

    @property
    def cardinalities(self) -> list[int]:
        return [self.cardinality(n) for n in self.schema.names]

    def mapping(self, name: str) -> dict[str, int]:
        return dict(self._encode[name])

    def to_dict(self) -> dict:
        return {name: self._decode[name][1:] for name in self.schema.names}

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.schema == other.schema and self.to_dict() == other.to_dict()


def build_vocab(records: Iterable[Mapping[str, str]], schema: Schema, min_freq: int = 10) -> Vocabulary:
    """Count raw values per field and keep those seen at least ``min_freq`` times.

    Kept values are indexed from 1 by descending count, ties by ascending value.
    """
    counts = {name: Counter() for name in schema.names}
    n = 0
    for rec in records:
        n += 1
        for name in schema.names:
            counts[name][rec[name]] += 1
    if n == 0:
        raise ConfigError("cannot build a vocabulary from an empty record stream")
    kept = {}
    for name, c in counts.items():
        items = sorted(((-k, v) for v, k in c.items() if k >= min_freq))
        kept[name] = [v for _, v in items]
    return Vocabulary(schema, kept)


@dataclass(frozen=True)
class Sample:
    x: tuple[int, ...]
    y: int
    z: int
    user_index: int
    item_index: int


def parse_label(raw, what: str) -> int:
    s = str(raw).strip()
    if s not in ("0", "1"):
        raise DataError(f"{what} label must be 0 or 1, got {raw!r}")
    return int(s)


def encode_sample(record: Mapping[str, str], vocab: Vocabulary, schema: Schema) -> Sample:
    for name in (CLICK, CONVERSION, *schema.names):
        if name not in record:
            raise DataError(f"record is missing field {name!r}")
    y = parse_label(record[CLICK], CLICK)
    z = parse_label(record[CONVERSION], CONVERSION)
    if z == 1 and y == 0:
        raise DataError("conversion without click (conversion=1, click=0)")
    x = tuple(vocab.index(name, str(record[name])) for name in schema.names)
    return Sample(x, y, z, x[schema.entity_column("user")], x[schema.entity_column("item")])


class Dataset:
    """Columnar encoded samples: ``x`` is ``(n, n_fields)`` local per-field indices."""

    def __init__(self, schema: Schema, x: np.ndarray, y: np.ndarray, z: np.ndarray):
        x = np.asarray(x, dtype=np.int64).reshape(-1, len(schema))
        y = np.asarray(y, dtype=np.int64)
        z = np.asarray(z, dtype=np.int64)
        if not (len(x) == len(y) == len(z)):
            raise ShapeError(f"column lengths differ: x={len(x)} y={len(y)} z={len(z)}")
        if np.any(z > y):
            raise DataError("dataset contains conversions without clicks")
        self.schema, self.x, self.y, self.z = schema, x, y, z

    @classmethod
    def from_samples(cls, schema: Schema, samples: Sequence[Sample]) -> "Dataset":
        x = np.array([s.x for s in samples], dtype=np.int64).reshape(-1, len(schema))
        return cls(schema, x, [s.y for s in samples], [s.z for s in samples])

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Sample:
        x = tuple(int(v) for v in self.x[i])
        return Sample(x, int(self.y[i]), int(self.z[i]), int(self.user[i]), int(self.item[i]))

    @property
    def user(self) -> np.ndarray:
        return self.x[:, self.schema.entity_column("user")]

    @property
    def item(self) -> np.ndarray:
        return self.x[:, self.schema.entity_column("item")]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.schema, self.x[idx], self.y[idx], self.z[idx])


def entity_feature_map(data: Dataset, side: str, n_entities: int) -> np.ndarray:
    """Per-entity tuple of that side's local feature indices, taken from each entity's first row.

    Entity 0 (out-of-vocabulary) defaults to the OOV index of every field unless observed.
    """
    cols = data.schema.columns(side)
    ent = data.x[:, data.schema.entity_column(side)]
    out = np.full((n_entities, len(cols)), -1, dtype=np.int64)
    out[0] = 0
    uniq, first = np.unique(ent, return_index=True)
    out[uniq] = data.x[first][:, cols]
    missing = np.flatnonzero(out[:, 0] < 0)
    if missing.size:
        raise DataError(f"{side} entity {int(missing[0])} has no feature tuple ({missing.size} missing)")
    return out


class RowTable:
    """Dense ``(n, dim)`` matrix updated row-sparsely with per-row Adam state."""

    def __init__(self, values: np.ndarray):
        if values.ndim != 2:
            raise ShapeError(f"row table needs a 2-d matrix, got {values.shape}")
        self.values = values
        self.m = np.zeros_like(values)
        self.v = np.zeros_like(values)
        self.step = np.zeros(len(values), dtype=np.int64)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def apply_row_grads(self, rows: np.ndarray, grads: np.ndarray, opt: AdamConfig) -> None:
        """Sum gradients of repeated rows, then one Adam step per touched row."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        grads = np.asarray(grads).reshape(len(rows), self.dim)
        check_finite(grads, "embedding gradient")
        if rows.size and (rows.min() < 0 or rows.max() >= self.n):
            raise NumericError(f"row index out of bounds for table with {self.n} rows")
        uniq, inv = np.unique(rows, return_inverse=True)
        acc = np.zeros((len(uniq), self.dim), dtype=self.values.dtype)
        np.add.at(acc, inv, grads)
        self.step[uniq] += 1
        val, m, v = self.values[uniq], self.m[uniq], self.v[uniq]
        adam_update(val, acc, m, v, self.step[uniq], opt.lr, opt.beta1, opt.beta2, opt.eps, opt.l2)
        self.values[uniq], self.m[uniq], self.v[uniq] = val, m, v


class EmbeddingTable(RowTable):
    """One flat table for all fields; field ``f`` owns rows ``offsets[f] : offsets[f] + card[f]``."""

    def __init__(self, name: str, cardinalities: Sequence[int], values: np.ndarray):
        self.name = name
        self.cardinalities = tuple(int(c) for c in cardinalities)
        self.offsets = np.concatenate([[0], np.cumsum(self.cardinalities)[:-1]]).astype(np.int64)
        if values.shape[0] != sum(self.cardinalities):
            raise ShapeError(f"table {name}: {values.shape[0]} rows but cardinalities sum to {sum(self.cardinalities)}")
        super().__init__(values)

    @classmethod
    def init(cls, name: str, cardinalities: Sequence[int], dim: int, rng: np.random.Generator,
             std: float = 0.01, dtype=np.float64) -> "EmbeddingTable":
        vals = (rng.standard_normal((int(sum(cardinalities)), dim)) * std).astype(dtype)
        return cls(name, cardinalities, vals)

    def global_rows(self, x: np.ndarray, columns: Sequence[int] | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        if columns is None:
            columns = range(x.shape[-1])
        columns = list(columns)
        card = np.asarray(self.cardinalities)[columns]
        if x.size and (np.any(x < 0) or np.any(x >= card)):
            raise NumericError(f"table {self.name}: feature index out of bounds")
        return x + self.offsets[columns]

    def copy(self) -> "EmbeddingTable":
        t = EmbeddingTable(self.name, self.cardinalities, self.values.copy())
        t.m, t.v, t.step = self.m.copy(), self.v.copy(), self.step.copy()
        return t


def lookup_concat(table: EmbeddingTable, x, schema: Schema, sides: Iterable[str] = SIDES) -> np.ndarray:
    """Concatenated embeddings of the selected sides' fields, in schema order.

    ``x`` is a Sample, a single index row, or an ``(n, n_fields)`` index matrix.
    """
    if isinstance(x, Sample):
        x = x.x
    x = np.asarray(x, dtype=np.int64)
    single = x.ndim == 1
    x2 = x.reshape(-1, len(schema))
    cols = schema.side_columns(sides)
    rows = table.global_rows(x2[:, cols], cols)
    out = table.values[rows].reshape(len(x2), len(cols) * table.dim)
    return out[0] if single else out


def scatter_grad(table: EmbeddingTable, x, schema: Schema, grad: np.ndarray, opt: AdamConfig,
                 sides: Iterable[str] = SIDES) -> None:
    """Route a gradient w.r.t. ``lookup_concat(table, x, schema, sides)`` back to the touched rows."""
    if isinstance(x, Sample):
        x = x.x
    x2 = np.asarray(x, dtype=np.int64).reshape(-1, len(schema))
    cols = schema.side_columns(sides)
    grad = np.asarray(grad)
    if grad.size != len(x2) * len(cols) * table.dim:
        raise ShapeError(f"gradient size {grad.size} != {len(x2)} x {len(cols)} x {table.dim}")
    rows = table.global_rows(x2[:, cols], cols)
    table.apply_row_grads(rows, grad.reshape(-1, table.dim), opt)
