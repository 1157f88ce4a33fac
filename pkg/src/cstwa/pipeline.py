"""In-memory pipeline glue: vocab -> pretrain -> mine graphs -> train -> evaluate."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .data import SynthData, build_vocab_columns, encode_raw
from .features import Dataset, EmbeddingTable, Schema, Vocabulary, entity_feature_map
from .metrics import auc
from .model import ModelConfig, PretrainResult, TrainResult, pretrain_ctr, train
from .structure import (MAX_EXACT_NODES, SparseGraph, assemble_reps, normalize_graph,
                        topk_similarity_graph)
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    schema: Schema
    vocab: Vocabulary
    train: Dataset
    val: Dataset
    test: Dataset

    @property
    def cardinalities(self) -> list[int]:
        return self.vocab.cardinalities

    def entity_maps(self) -> dict[str, np.ndarray]:
        return {side: entity_feature_map(self.train, side, self.cardinalities[self.schema.entity_column(side)])
                for side in ("user", "item")}


def prepare_synthetic(data: SynthData, min_freq: int = 10) -> Prepared:
    vocab = build_vocab_columns(data.splits["train"].raw, data.schema, min_freq)
    enc = {k: encode_raw(s.raw, vocab, data.schema) for k, s in data.splits.items()}
    return Prepared(data.schema, vocab, enc["train"], enc["val"], enc["test"])


def mine_graphs(table: EmbeddingTable, schema: Schema, entity_maps: dict, K: int,
                block_size: int = 1024) -> dict[str, SparseGraph]:
    """Normalized top-K cosine graphs over user and item representations built from ``table``."""
    graphs = {}
    for side in ("user", "item"):
        fmap = entity_maps[side]
        if len(fmap) > MAX_EXACT_NODES:
            raise ConfigError(f"{len(fmap)} {side} entities exceed the exact-search limit of {MAX_EXACT_NODES}")
        rows = table.global_rows(fmap, schema.columns(side))
        reps = assemble_reps(table, side, rows)
        graphs[side] = normalize_graph(topk_similarity_graph(reps, K, block_size))
    return graphs


def run_variant(cfg: ModelConfig, prep: Prepared, graphs=None) -> TrainResult:
    maps = prep.entity_maps() if cfg.enable_sm else None
    return train(cfg, prep.train, prep.val, prep.cardinalities, graphs if cfg.enable_sm else None, maps)


def heldout_scores(result: TrainResult, data: Dataset, final: bool = False) -> dict[str, float]:
    """Test AUCs and funnel violation rate of the selected model, or of the last epoch with ``final``."""
    model = result.model
    if final:
        best = model.state_dict()
        model.load_state_dict(result.final_state)
        try:
            y_hat, z_hat = model.predict(data)
        finally:
            model.load_state_dict(best)
    else:
        y_hat, z_hat = model.predict(data)
    return {"click": auc(y_hat, data.y), "purchase": auc(z_hat, data.z),
            "violation_rate": float(np.mean(z_hat > y_hat))}
