"""Dataset files, train/validation splitting, and a synthetic impression -> click -> conversion funnel."""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .features import CLICK, CONVERSION, Dataset, FieldSpec, Schema, Vocabulary, write_field_specs
from .metrics import auc
from .nn import make_rng, sigmoid

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class RawData:
    """Unencoded columns: raw string codes per field plus integer labels."""

    columns: dict[str, np.ndarray]
    click: np.ndarray
    conversion: np.ndarray

    def __len__(self) -> int:
        return len(self.click)

    def records(self):
        names = list(self.columns)
        for i in range(len(self)):
            rec = {n: self.columns[n][i] for n in names}
            rec[CLICK] = str(self.click[i])
            rec[CONVERSION] = str(self.conversion[i])
            yield rec


@dataclass
class LoadStats:
    rows: int = 0
    accepted: int = 0
    funnel_violations: int = 0
    errors: list[str] = field(default_factory=list)


def read_raw(path: str | Path, schema: Schema, max_errors: int = 100) -> tuple[RawData, LoadStats]:
    """Parse a ``click,conversion,<fields>`` CSV. Bad rows are dropped and reported by line number."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    stats = LoadStats()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file (no header)")
        header = [h.strip() for h in header]
        if header[:2] != [CLICK, CONVERSION] or sorted(header[2:]) != sorted(schema.names) \
                or len(set(header)) != len(header):
            raise DataError(f"{path}: header {header} does not match click,conversion,{','.join(schema.names)}")
        cols = {name: header.index(name) for name in schema.names}
        width = len(header)
        vals = {name: [] for name in schema.names}
        ys, zs = [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            stats.rows += 1
            err = None
            if len(row) != width:
                err = f"line {lineno}: expected {width} columns, got {len(row)}"
            else:
                y, z = row[0].strip(), row[1].strip()
                if y not in ("0", "1") or z not in ("0", "1"):
                    err = f"line {lineno}: labels must be 0 or 1, got {row[0]!r},{row[1]!r}"
                elif z == "1" and y == "0":
                    stats.funnel_violations += 1
                    err = f"line {lineno}: conversion without click"
            if err:
                stats.errors.append(err)
                if len(stats.errors) - stats.funnel_violations > max_errors:
                    raise DataError(f"{path}: too many malformed rows; first: {stats.errors[0]}")
                continue
            ys.append(int(y))
            zs.append(int(z))
            for name, c in cols.items():
                vals[name].append(row[c].strip())
    stats.accepted = len(ys)
    if stats.rows == 0:
        log.warning("%s has no data rows", path)
    if stats.funnel_violations:
        log.warning("%s: rejected %d rows with conversion but no click", path, stats.funnel_violations)
    raw = RawData({n: np.array(v, dtype=object) for n, v in vals.items()},
                  np.array(ys, dtype=np.int64), np.array(zs, dtype=np.int64))
    return raw, stats


def build_vocab_columns(raw: RawData, schema: Schema, min_freq: int = 10) -> Vocabulary:
    """Vectorised equivalent of ``features.build_vocab`` for in-memory columns."""
    if len(raw) == 0:
        raise ConfigError("cannot build a vocabulary from an empty dataset")
    kept = {}
    for name in schema.names:
        c = Counter(raw.columns[name].tolist())
        kept[name] = [v for _, v in sorted((-k, v) for v, k in c.items() if k >= min_freq)]
    return Vocabulary(schema, kept)


def encode_raw(raw: RawData, vocab: Vocabulary, schema: Schema) -> Dataset:
    x = np.zeros((len(raw), len(schema)), dtype=np.int64)
    for j, name in enumerate(schema.names):
        uniq, inv = np.unique(raw.columns[name].astype(str), return_inverse=True)
        codes = np.array([vocab.index(name, u) for u in uniq], dtype=np.int64)
        x[:, j] = codes[inv] if len(uniq) else 0
    return Dataset(schema, x, raw.click, raw.conversion)


def load_dataset(path: str | Path, schema: Schema, vocab: Vocabulary, max_errors: int = 100) -> tuple[Dataset, LoadStats]:
    raw, stats = read_raw(path, schema, max_errors)
    return encode_raw(raw, vocab, schema), stats


def split_train_val(data: Dataset, fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded uniform split; both parts keep the original row order."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must be in (0, 1), got {fraction}")
    n = len(data)
    n_val = int(round(fraction * n))
    perm = make_rng(seed, "split").permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return data.subset(train_idx), data.subset(val_idx)


def oracle_auc(p, labels) -> float:
    """AUC of the generating probabilities against realised labels."""
    return auc(p, labels)


# synthetic funnel

SYNTH_SCHEMA = Schema([
    FieldSpec("user_id", "user", True),
    FieldSpec("user_cluster", "user", False),
    FieldSpec("item_id", "item", True),
    FieldSpec("item_cluster", "item", False),
    FieldSpec("ctx", "context", False),
])


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items: int = 1000
    n_user_clusters: int = 20
    n_item_clusters: int = 20
    latent_dim: int = 8
    base_click_rate: float = 0.05
    base_conv_rate_given_click: float = 0.06
    contradictory_fraction: float = 0.25
    contradiction_click: float = 2.0
    contradiction_conv: float = 2.0
    # correlation between the click and conversion affinity scores; 1 means identical spaces
    latent_share: float = 0.5
    affinity_scale: float = 1.5
    entity_noise: float = 0.5
    popularity_std: float = 0.5
    n_context: int = 20
    n_train: int = 200_000
    n_val: int = 20_000
    n_test: int = 50_000
    seed: int = 0

    def __post_init__(self):
        for name in ("base_click_rate", "base_conv_rate_given_click"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        for name in ("contradictory_fraction", "latent_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("n_users", "n_items", "n_user_clusters", "n_item_clusters", "latent_dim", "n_context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be nonnegative")


@dataclass
class SynthSplit:
    raw: RawData
    p_click: np.ndarray
    p_conv_given_click: np.ndarray
    user_cluster: np.ndarray
    item_cluster: np.ndarray
    flagged: np.ndarray

    @property
    def p_conv(self) -> np.ndarray:
        return self.p_click * self.p_conv_given_click


@dataclass
class SynthData:
    config: SynthConfig
    schema: Schema
    splits: dict[str, SynthSplit]
    flagged_item_clusters: np.ndarray


def _calibrate(f, target: float, what: str, lo: float = -40.0, hi: float = 40.0) -> float:
    """Bisection for the intercept c with f(c) == target; f must be increasing."""
    flo, fhi = f(lo), f(hi)
    if not flo <= target <= fhi:
        raise ConfigError(f"cannot calibrate {what} to {target}: reachable range [{flo:.3g}, {fhi:.3g}]")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gen_synthetic(cfg: SynthConfig) -> SynthData:
    """Draw clustered users/items and impressions with known click and conversion probabilities.

    Click and conversion affinities share a fraction of their latent structure
    (``latent_share``); items in flagged clusters get a click boost and a conversion
    penalty, so click propensity and conversion propensity disagree on them.
    """
    rng = make_rng(cfg.seed, "synth")
    uc = rng.integers(0, cfg.n_user_clusters, cfg.n_users)
    ic = rng.integers(0, cfg.n_item_clusters, cfg.n_items)
    n_flag = int(round(cfg.contradictory_fraction * cfg.n_item_clusters))
    flagged_clusters = np.sort(rng.permutation(cfg.n_item_clusters)[:n_flag])
    item_flag = np.isin(ic, flagged_clusters)

    def space():
        cu = rng.standard_normal((cfg.n_user_clusters, cfg.latent_dim))
        ci = rng.standard_normal((cfg.n_item_clusters, cfg.latent_dim))
        u = cu[uc] + cfg.entity_noise * rng.standard_normal((cfg.n_users, cfg.latent_dim))
        i = ci[ic] + cfg.entity_noise * rng.standard_normal((cfg.n_items, cfg.latent_dim))
        pop = cfg.popularity_std * rng.standard_normal(cfg.n_items)
        return u, i, pop

    u_click, i_click, pop_click = space()
    u_ind, i_ind, pop_ind = space()

    n = cfg.n_train + cfg.n_val + cfg.n_test
    users = rng.integers(0, cfg.n_users, n)
    items = rng.integers(0, cfg.n_items, n)
    ctx = rng.integers(0, cfg.n_context, n)
    scale = cfg.affinity_scale / math.sqrt(cfg.latent_dim)
    s_click = scale * np.einsum("nd,nd->n", u_click[users], i_click[items]) + pop_click[items]
    s_ind = scale * np.einsum("nd,nd->n", u_ind[users], i_ind[items]) + pop_ind[items]
    rho = cfg.latent_share
    s_conv = rho * s_click + math.sqrt(max(0.0, 1.0 - rho * rho)) * s_ind
    flag = item_flag[items]
    click_logit = s_click + cfg.contradiction_click * flag
    conv_logit = s_conv - cfg.contradiction_conv * flag

    c0 = _calibrate(lambda c: float(sigmoid(click_logit + c).mean()), cfg.base_click_rate, "click rate")
    p_click = sigmoid(click_logit + c0)
    w = p_click / p_click.sum()
    c1 = _calibrate(lambda c: float(w @ sigmoid(conv_logit + c)), cfg.base_conv_rate_given_click,
                    "conversion rate given click")
    p_conv = sigmoid(conv_logit + c1)

    y = (rng.random(n) < p_click).astype(np.int64)
    z = y * (rng.random(n) < p_conv).astype(np.int64)

    cols = {
        "user_id": users, "user_cluster": uc[users],
        "item_id": items, "item_cluster": ic[items], "ctx": ctx,
    }
    splits = {}
    bounds = np.cumsum([0, cfg.n_train, cfg.n_val, cfg.n_test])
    for name, a, b in zip(SPLITS, bounds[:-1], bounds[1:]):
        raw = RawData({k: v[a:b].astype(str).astype(object) for k, v in cols.items()}, y[a:b], z[a:b])
        splits[name] = SynthSplit(raw, p_click[a:b], p_conv[a:b], uc[users[a:b]], ic[items[a:b]], flag[a:b])
    return SynthData(cfg, SYNTH_SCHEMA, splits, flagged_clusters)


def write_raw_csv(raw: RawData, schema: Schema, path: str | Path) -> None:
    names = schema.names
    with open(path, "w", newline="") as fh:
        fh.write(",".join([CLICK, CONVERSION, *names]) + "\n")
        cols = [raw.click.astype(str), raw.conversion.astype(str)] + [raw.columns[n].astype(str) for n in names]
        for row in zip(*cols):
            fh.write(",".join(row) + "\n")


def write_truth_csv(split: SynthSplit, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("p_click,p_conv_given_click\n")
        for a, b in zip(split.p_click.tolist(), split.p_conv_given_click.tolist()):
            fh.write(f"{a!r},{b!r}\n")


def read_truth_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, 0], arr[:, 1]


def write_synthetic(data: SynthData, out_dir: str | Path) -> list[Path]:
    """Write ``fields.txt``, ``<split>.csv`` and ``<split>_truth.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "fields.txt"]
    write_field_specs(data.schema, paths[0])
    for name, split in data.splits.items():
        write_raw_csv(split.raw, data.schema, out / f"{name}.csv")
        write_truth_csv(split, out / f"{name}_truth.csv")
        paths += [out / f"{name}.csv", out / f"{name}_truth.csv"]
    return paths
