"""Two-tower conversion model with structure injection, click gating and reweighted loss.

The click path embeds every field with table ``T``, runs the click tower and predicts
``y_hat``. The conversion path embeds with table ``V`` (or, with structure migration,
with the per-entity matrices ``R_user``/``R_item`` plus ``V`` for context fields),
optionally multiplies the embedding by ``1 + 2 * sigmoid(info(H_T))`` and runs the
conversion tower to predict ``z_hat``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .features import Dataset, EmbeddingTable, Schema
from .metrics import auc
from .nn import (EVAL, TRAIN, AdamConfig, MlpCache, MlpSpec, ParamBlock, adam_step, affine_backward,
                 affine_forward, make_rng, mlp_backward, mlp_forward, sigmoid)
from .objective import (CurseConfig, LossReport, LossWeights, ThresholdTracker, clamp, cstwa_objective,
                        curse_weights)
from .structure import RepMatrix, SparseGraph, StructureConfig, assemble_reps, epoch_refresh

log = logging.getLogger(__name__)

# token -> (enable_sm, enable_cp, enable_ce)
ABLATIONS = {
    "mlp": (False, False, False),
    "sm": (True, False, False),
    "cp": (False, True, False),
    "ce": (False, False, True),
    "sm_cp": (True, True, False),
    "sm_ce": (True, False, True),
    "cp_ce": (False, True, True),
    "full": (True, True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    enable_sm: bool = True
    enable_cp: bool = True
    enable_ce: bool = True
    # clicked-only conversion training with no head coupling (the single-task MLP baseline)
    baseline: bool = False
    stop_grad_gate: bool = False
    d: int = 5
    tower_dims: tuple[int, ...] = (128, 64, 32)
    dropout: tuple[float, ...] = (0.1, 0.3, 0.3)
    d_out: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 1e-6
    batch: int = 2000
    epochs: int = 10
    pretrain_epochs: int = 10
    patience: int = 2
    emb_std: float = 0.01
    dtype: str = "float32"
    seed: int = 0
    structure: StructureConfig = field(default_factory=StructureConfig)
    curse: CurseConfig = field(default_factory=CurseConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not self.tower_dims or self.tower_dims[-1] != self.d_out:
            raise ConfigError(f"last tower dim {self.tower_dims[-1] if self.tower_dims else None} != d_out {self.d_out}")
        if len(self.dropout) != len(self.tower_dims):
            raise ConfigError(f"{len(self.tower_dims)} tower layers but {len(self.dropout)} dropout rates")
        if self.d < 1 or self.batch < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("d and batch must be positive, epochs nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.baseline and (self.enable_sm or self.enable_cp or self.enable_ce):
            raise ConfigError("the baseline regime cannot enable sm/cp/ce")

    @classmethod
    def for_ablation(cls, token: str, **kw) -> "ModelConfig":
        if token not in ABLATIONS:
            raise ConfigError(f"unknown ablation {token!r}; choose from {sorted(ABLATIONS)}")
        sm, cp, ce = ABLATIONS[token]
        return cls(enable_sm=sm, enable_cp=cp, enable_ce=ce, baseline=token == "mlp", **kw)

    @property
    def ablation(self) -> str:
        flags = (self.enable_sm, self.enable_cp, self.enable_ce)
        if flags == (False, False, False):
            # all components off but trained over the entire space is not a named variant
            return "mlp" if self.baseline else "none"
        return next(k for k, v in ABLATIONS.items() if v == flags)

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.adam_eps, self.l2)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def tower_spec(cfg: ModelConfig, n_in: int) -> MlpSpec:
    return MlpSpec((n_in, *cfg.tower_dims), tuple(cfg.dropout), ("relu",) * len(cfg.tower_dims))


@dataclass
class ForwardCache:
    rows_t: np.ndarray
    rows_v: np.ndarray
    users: np.ndarray
    items: np.ndarray
    e_t: np.ndarray
    click: MlpCache
    h_t: np.ndarray
    y_hat: np.ndarray
    e_v: np.ndarray
    gate: np.ndarray | None
    mult: np.ndarray | None
    e_v_hat: np.ndarray
    conv: MlpCache
    h_v: np.ndarray
    z_hat: np.ndarray


@dataclass
class SparseGrad:
    table: object
    rows: np.ndarray
    grad: np.ndarray


class CstwaModel:
    def __init__(self, cfg: ModelConfig, schema: Schema, cardinalities, graphs: dict | None = None,
                 entity_maps: dict | None = None, inference_only: bool = False):
        self.cfg, self.schema = cfg, schema
        self.cardinalities = tuple(int(c) for c in cardinalities)
        dt = cfg.np_dtype
        rng = make_rng(cfg.seed, "init")
        nf = len(schema)
        self.n_in = nf * cfg.d
        self.T = EmbeddingTable.init("T", self.cardinalities, cfg.d, rng, cfg.emb_std, dt)
        self.V = EmbeddingTable.init("V", self.cardinalities, cfg.d, rng, cfg.emb_std, dt)
        spec = tower_spec(cfg, self.n_in)
        self.spec = spec
        self.click_tower = spec.init_params(rng, dt)
        self.conv_tower = spec.init_params(rng, dt)
        self.info = ParamBlock.xavier(cfg.d_out, self.n_in, rng, dt)
        self.click_layer = ParamBlock.xavier(cfg.d_out, 1, rng, dt)
        self.conv_layer = ParamBlock.xavier(cfg.d_out, 1, rng, dt)
        self.user_cols = schema.columns("user")
        self.item_cols = schema.columns("item")
        self.ctx_cols = schema.columns("context")
        self.graphs = graphs or {}
        self.R_user: RepMatrix | None = None
        self.R_item: RepMatrix | None = None
        if cfg.enable_sm and inference_only:
            # shapes only; values come from load_state_dict
            for side, rep_attr in (("user", "R_user"), ("item", "R_item")):
                n_ent = self.cardinalities[schema.entity_column(side)]
                setattr(self, rep_attr, RepMatrix(side, np.zeros((n_ent, schema.count(side) * cfg.d), dt)))
        elif cfg.enable_sm:
            if entity_maps is None or set(self.graphs) != {"user", "item"}:
                raise ConfigError("structure migration needs user and item graphs and entity feature maps")
            for side, rep_attr in (("user", "R_user"), ("item", "R_item")):
                n_ent = self.cardinalities[schema.entity_column(side)]
                if self.graphs[side].n != n_ent or len(entity_maps[side]) != n_ent:
                    raise ConfigError(f"{side} graph has {self.graphs[side].n} nodes, vocabulary has {n_ent} entities")
                cols = schema.columns(side)
                rows = self.V.global_rows(entity_maps[side], cols)
                setattr(self, rep_attr, assemble_reps(self.V, side, rows))

    # parameter bookkeeping

    def dense_blocks(self) -> list[tuple[str, ParamBlock]]:
        out = [(f"click_tower.{i}", p) for i, p in enumerate(self.click_tower)]
        out += [(f"conv_tower.{i}", p) for i, p in enumerate(self.conv_tower)]
        out += [("info", self.info), ("click_layer", self.click_layer), ("conv_layer", self.conv_layer)]
        return out

    def row_tables(self) -> list[tuple[str, object]]:
        out = [("T", self.T), ("V", self.V)]
        if self.R_user is not None:
            out += [("R_user", self.R_user), ("R_item", self.R_item)]
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for name, blk in self.dense_blocks():
            state[f"{name}.weight"] = blk.weight
            state[f"{name}.bias"] = blk.bias
        for name, tab in self.row_tables():
            state[name] = tab.values
        return {k: v.copy() for k, v in state.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = self.state_dict()
        if set(mine) != set(state):
            raise ConfigError(f"state keys differ: {sorted(set(mine) ^ set(state))}")
        for name, blk in self.dense_blocks():
            blk.weight[...] = state[f"{name}.weight"]
            blk.bias[...] = state[f"{name}.bias"]
        for name, tab in self.row_tables():
            tab.values[...] = state[name]

    # forward / backward

    def _embed_v(self, x: np.ndarray, users: np.ndarray, items: np.ndarray):
        if self.cfg.enable_sm:
            ctx_rows = self.V.global_rows(x[:, self.ctx_cols], self.ctx_cols)
            parts = [self.R_user.values[users], self.R_item.values[items],
                     self.V.values[ctx_rows].reshape(len(x), -1)]
            return np.concatenate(parts, axis=1), ctx_rows
        rows = self.V.global_rows(x)
        return self.V.values[rows].reshape(len(x), -1), rows

    def forward(self, x: np.ndarray, mode: str = EVAL, rng: np.random.Generator | None = None):
        """Returns ``(y_hat, z_hat, cache)`` for an ``(n, n_fields)`` index matrix."""
        cfg = self.cfg
        x = np.asarray(x, dtype=np.int64)
        users = x[:, self.schema.entity_column("user")]
        items = x[:, self.schema.entity_column("item")]
        rows_t = self.T.global_rows(x)
        e_t = self.T.values[rows_t].reshape(len(x), -1)
        h_t, click_cache = mlp_forward(self.spec, self.click_tower, e_t, mode, rng)
        y_hat = sigmoid(affine_forward(h_t, self.click_layer))
        e_v, rows_v = self._embed_v(x, users, items)
        gate = mult = None
        if cfg.enable_cp:
            gate = sigmoid(affine_forward(h_t, self.info))
            mult = 1.0 + 2.0 * gate
            e_v_hat = e_v * mult
        else:
            e_v_hat = e_v
        h_v, conv_cache = mlp_forward(self.spec, self.conv_tower, e_v_hat, mode, rng)
        z_hat = sigmoid(affine_forward(h_v, self.conv_layer))
        cache = ForwardCache(rows_t, rows_v, users, items, e_t, click_cache, h_t, y_hat, e_v, gate, mult,
                             e_v_hat, conv_cache, h_v, z_hat)
        return y_hat.ravel(), z_hat.ravel(), cache

    def backward(self, cache: ForwardCache, d_y: np.ndarray, d_z: np.ndarray) -> list[SparseGrad]:
        """Fill dense grad buffers; return row-sparse gradients for the embedding/representation tables."""
        if cache is None:
            raise ConfigError("backward called without a forward cache")
        dt = self.cfg.np_dtype
        for _, blk in self.dense_blocks():
            blk.zero_grad()
        d_y = np.asarray(d_y, dtype=dt).reshape(-1, 1)
        d_z = np.asarray(d_z, dtype=dt).reshape(-1, 1)

        dzl = d_z * cache.z_hat * (1.0 - cache.z_hat)
        dw, db, dh_v = affine_backward(cache.h_v, self.conv_layer, dzl)
        self.conv_layer.grad_w += dw
        self.conv_layer.grad_b += db
        grads, de_v_hat = mlp_backward(cache.conv, dh_v)
        for blk, (gw, gb) in zip(self.conv_tower, grads):
            blk.grad_w += gw
            blk.grad_b += gb

        dh_t = np.zeros_like(cache.h_t)
        if self.cfg.enable_cp:
            de_v = de_v_hat * cache.mult
            d_gate_logit = 2.0 * de_v_hat * cache.e_v * cache.gate * (1.0 - cache.gate)
            dw, db, dh = affine_backward(cache.h_t, self.info, d_gate_logit)
            self.info.grad_w += dw
            self.info.grad_b += db
            if not self.cfg.stop_grad_gate:
                dh_t += dh
        else:
            de_v = de_v_hat

        dyl = d_y * cache.y_hat * (1.0 - cache.y_hat)
        dw, db, dh = affine_backward(cache.h_t, self.click_layer, dyl)
        self.click_layer.grad_w += dw
        self.click_layer.grad_b += db
        dh_t += dh
        grads, de_t = mlp_backward(cache.click, dh_t)
        for blk, (gw, gb) in zip(self.click_tower, grads):
            blk.grad_w += gw
            blk.grad_b += gb

        d = self.cfg.d
        out = [SparseGrad(self.T, cache.rows_t.ravel(), de_t.reshape(-1, d))]
        if self.cfg.enable_sm:
            du = self.R_user.dim
            di = self.R_item.dim
            out.append(SparseGrad(self.R_user, cache.users, de_v[:, :du]))
            out.append(SparseGrad(self.R_item, cache.items, de_v[:, du:du + di]))
            out.append(SparseGrad(self.V, cache.rows_v.ravel(), de_v[:, du + di:].reshape(-1, d)))
        else:
            out.append(SparseGrad(self.V, cache.rows_v.ravel(), de_v.reshape(-1, d)))
        return out

    def apply_grads(self, sparse: list[SparseGrad]) -> None:
        opt = self.cfg.adam
        for name, blk in self.dense_blocks():
            if name == "info" and not self.cfg.enable_cp:
                continue
            adam_step(blk, None, opt.lr, opt.beta1, opt.beta2, opt.eps, opt.l2)
        for sg in sparse:
            sg.table.apply_row_grads(sg.rows, sg.grad, opt)

    def predict(self, data: Dataset | np.ndarray, batch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode predictions in dataset order."""
        x = data.x if isinstance(data, Dataset) else np.asarray(data)
        batch = batch or self.cfg.batch
        ys, zs = [], []
        for s in range(0, len(x), batch):
            y, z, _ = self.forward(x[s:s + batch], EVAL)
            ys.append(y)
            zs.append(z)
        if not ys:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(ys), np.concatenate(zs)

    def refresh_structure(self) -> None:
        if self.cfg.enable_sm:
            epoch_refresh(self.R_user, self.graphs["user"], self.cfg.structure)
            epoch_refresh(self.R_item, self.graphs["item"], self.cfg.structure)


def batches(n: int, size: int, rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, size):
        yield order[s:s + size]


METRIC_FIELDS = ("epoch", "split", "click_auc", "purchase_auc", "l_ctr", "l_ce", "l_co", "total",
                 "mean_a", "mean_b", "pos", "neg")


def _safe_auc(scores, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0 or labels.min() == labels.max():
        return float("nan")
    return auc(scores, labels)


def _report_row(epoch: int, split: str, rep: LossReport, click_auc=float("nan"), purchase_auc=float("nan")) -> dict:
    return {"epoch": epoch, "split": split, "click_auc": click_auc, "purchase_auc": purchase_auc,
            "l_ctr": rep.l_ctr, "l_ce": rep.l_ce, "l_co": rep.l_co, "total": rep.total,
            "mean_a": rep.mean_a, "mean_b": rep.mean_b, "pos": rep.pos, "neg": rep.neg}


@dataclass
class TrainResult:
    model: CstwaModel
    metrics: list[dict]
    best_epoch: int
    best_val_purchase_auc: float
    # parameters after the last epoch, for fixed-budget comparisons
    final_state: dict = field(default_factory=dict)


def train_step(model: CstwaModel, x, y, z, tracker: ThresholdTracker, rng) -> LossReport:
    cfg = model.cfg
    y_hat, z_hat, cache = model.forward(x, TRAIN, rng)
    pos, neg, active = tracker.thresholds()
    a, b = curse_weights(y_hat, pos, neg, replace(cfg.curse, enabled=cfg.enable_ce), active)
    weights = replace(cfg.weights, w3=0.0) if cfg.baseline else cfg.weights
    obj = cstwa_objective(y_hat, z_hat, y, z, weights, a, b, pos, neg,
                          cvr_mask=(np.asarray(y) == 1) if cfg.baseline else None)
    if not math.isfinite(obj.report.total):
        raise NumericError(f"non-finite loss {obj.report.total}")
    sparse = model.backward(cache, obj.d_y, obj.d_z)
    model.apply_grads(sparse)
    tracker.push(clamp(np.asarray(y_hat, dtype=np.float64)))
    return obj.report


def _mean_reports(reports: list[tuple[int, LossReport]]) -> LossReport:
    n = sum(k for k, _ in reports)
    avg = {f: sum(k * getattr(r, f) for k, r in reports) / n
           for f in ("l_ctr", "l_ce", "l_co", "total", "mean_a", "mean_b")}
    last = reports[-1][1]
    return LossReport(avg["l_ctr"], avg["l_ce"], avg["l_co"], avg["total"], avg["mean_a"], avg["mean_b"],
                      last.pos, last.neg)


def evaluate(model: CstwaModel, data: Dataset) -> tuple[float, float, LossReport]:
    y_hat, z_hat = model.predict(data)
    cfg = model.cfg
    weights = replace(cfg.weights, w3=0.0) if cfg.baseline else cfg.weights
    obj = cstwa_objective(y_hat, z_hat, data.y, data.z, weights)
    return _safe_auc(y_hat, data.y), _safe_auc(z_hat, data.z), obj.report


def train(cfg: ModelConfig, train_data: Dataset, val_data: Dataset, cardinalities, graphs=None,
          entity_maps=None) -> TrainResult:
    """Full training run; the returned model holds the parameters of the best validation purchase-AUC epoch."""
    if len(train_data) == 0:
        raise ConfigError("training set is empty")
    model = CstwaModel(cfg, train_data.schema, cardinalities, graphs, entity_maps)
    tracker = ThresholdTracker.from_config(cfg.curse)
    metrics: list[dict] = []
    best_state, best_auc, best_epoch = None, -math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        if epoch > 1:
            model.refresh_structure()
        order_rng = make_rng(cfg.seed, "shuffle", epoch)
        drop_rng = make_rng(cfg.seed, "dropout", epoch)
        reports = []
        for idx in batches(len(train_data), cfg.batch, order_rng):
            try:
                rep = train_step(model, train_data.x[idx], train_data.y[idx], train_data.z[idx], tracker, drop_rng)
            except NumericError as e:
                raise NumericError(f"epoch {epoch}, batch {len(reports)}: {e}") from e
            reports.append((len(idx), rep))
        metrics.append(_report_row(epoch, "train", _mean_reports(reports)))
        click_auc, purchase_auc, val_rep = evaluate(model, val_data)
        metrics.append(_report_row(epoch, "val", val_rep, click_auc, purchase_auc))
        log.info("epoch %d: train loss %.5f val click auc %.4f purchase auc %.4f",
                 epoch, metrics[-2]["total"], click_auc, purchase_auc)
        score = purchase_auc if math.isfinite(purchase_auc) else -math.inf
        if best_state is None or score > best_auc:
            best_state, best_auc, best_epoch = model.state_dict(), score, epoch
    final_state = model.state_dict()
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, metrics, best_epoch, best_auc, final_state)


# CTR pretraining for structure mining


class CtrModel:
    """Embedding -> click tower -> click layer; used only to produce a pretrained table."""

    def __init__(self, cfg: ModelConfig, cardinalities, n_fields: int):
        dt = cfg.np_dtype
        rng = make_rng(cfg.seed, "pretrain-init")
        self.cfg = cfg
        self.T = EmbeddingTable.init("T_pre", cardinalities, cfg.d, rng, cfg.emb_std, dt)
        self.spec = tower_spec(cfg, n_fields * cfg.d)
        self.tower = self.spec.init_params(rng, dt)
        self.head = ParamBlock.xavier(cfg.d_out, 1, rng, dt)

    def forward(self, x, mode=EVAL, rng=None):
        rows = self.T.global_rows(x)
        e = self.T.values[rows].reshape(len(x), -1)
        h, cache = mlp_forward(self.spec, self.tower, e, mode, rng)
        p = sigmoid(affine_forward(h, self.head))
        return p.ravel(), (rows, h, cache, p)

    def step(self, x, y, rng) -> float:
        from .objective import bce_loss
        p, (rows, h, cache, pp) = self.forward(x, TRAIN, rng)
        loss, g = bce_loss(p, y)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite pretraining loss {loss}")
        opt = self.cfg.adam
        dl = np.asarray(g, dtype=pp.dtype).reshape(-1, 1) * pp * (1.0 - pp)
        dw, db, dh = affine_backward(h, self.head, dl)
        grads, de = mlp_backward(cache, dh)
        adam_step(self.head, (dw, db), opt.lr, opt.beta1, opt.beta2, opt.eps, opt.l2)
        for blk, gr in zip(self.tower, grads):
            adam_step(blk, gr, opt.lr, opt.beta1, opt.beta2, opt.eps, opt.l2)
        self.T.apply_row_grads(rows.ravel(), de.reshape(-1, self.cfg.d), opt)
        return loss

    def predict(self, x, batch=None):
        batch = batch or self.cfg.batch
        out = [self.forward(x[s:s + batch])[0] for s in range(0, len(x), batch)]
        return np.concatenate(out) if out else np.zeros(0)


@dataclass
class PretrainResult:
    table: EmbeddingTable
    history: list[dict]
    best_epoch: int


def pretrain_ctr(cfg: ModelConfig, train_data: Dataset, val_data: Dataset, cardinalities) -> PretrainResult:
    """Train a click-only model on all impressions; early-stop on validation click AUC."""
    if len(train_data) == 0:
        raise DataError("pretraining set is empty")
    m = CtrModel(cfg, cardinalities, len(train_data.schema))
    best = m.T.copy()
    best_auc, best_epoch, bad = -math.inf, 0, 0
    history = []
    for epoch in range(1, cfg.pretrain_epochs + 1):
        order_rng = make_rng(cfg.seed, "pretrain-shuffle", epoch)
        drop_rng = make_rng(cfg.seed, "pretrain-dropout", epoch)
        total, n = 0.0, 0
        for idx in batches(len(train_data), cfg.batch, order_rng):
            try:
                total += m.step(train_data.x[idx], train_data.y[idx], drop_rng) * len(idx)
            except NumericError as e:
                raise NumericError(f"pretrain epoch {epoch}, batch {n // cfg.batch}: {e}") from e
            n += len(idx)
        val_auc = _safe_auc(m.predict(val_data.x), val_data.y)
        history.append({"epoch": epoch, "train_loss": total / n, "val_click_auc": val_auc})
        log.info("pretrain epoch %d: loss %.5f val click auc %.4f", epoch, total / n, val_auc)
        if not math.isfinite(val_auc) or val_auc > best_auc:
            best, best_auc, best_epoch, bad = m.T.copy(), val_auc, epoch, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    best.name = "T_pre"
    return PretrainResult(best, history, best_epoch)
