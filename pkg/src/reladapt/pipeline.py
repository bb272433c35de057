"""Staged adaptation training.

Stage 1 pretrains the source extractor F_s and classifier C and freezes
them.  Stage 2 averages the frozen classifier's target predictions into
relation weights.  Stage 3 copies F_s into F_t, adversarially pretrains F_t
against the auxiliary discriminator D_a, reads off instance weights
1 - D_a(F_s(x)), calibrates the relation gate on the weighted objective and
freezes the weight table.  Stage 4 runs the weighted minimax between F_t and
the main discriminator D_r through a gradient-reversal layer whose
coefficient follows the schedule Phi, optionally adding the centroid
transfer loss, and optionally fine-tuning on labeled target data.

Every stage consumes random numbers from its own seeded generator, so runs
with the same seed and config reproduce exactly.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import adversary, diffcore as dc, encoders, semantic_transfer, weighting
from .encoders import mask_na_loss as _mask_na_tensor
from .evalkit import PredictionSet, RankingQuery, RankingSet
from .weighting import WeightTable


class PipelineError(Exception):
    pass


class StageOrderError(PipelineError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs_source: int = 30
    epochs_adapt: int = 10
    epochs_aux: int = 5             # stage-3 pretraining of F_t and D_a
    u: float = 0.1                  # schedule upper bound
    schedule_alpha: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    sm_coeff: float = 0.1
    dropout: float = 0.5
    zeta: float = 0.7
    gate_steps: int = 30
    disc_hidden: int | None = None
    use_relation_weights: bool = True
    use_instance_weights: bool = True
    use_gate: bool = True
    fixed_alpha: float = 0.5
    fine_tune_frac: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise PipelineError("learning rate must be positive")
        if self.u <= 0:
            raise PipelineError("schedule upper bound must be positive")
        if self.batch_size < 1:
            raise PipelineError("batch size must be >= 1")


@dataclass
class TaskData:
    """Packed datasets plus the catalog sizes the encoders need."""

    mode: str                       # "re" | "kgc"
    num_classes: int                # including NA / the "none" class
    source_train: object            # SentenceBatch or TripleBatch
    target_train: object            # unlabeled usage during adaptation
    target_eval: object | None = None
    vocab_size: int | None = None
    num_entities: int | None = None
    num_relation_ids: int | None = None
    struct_dim: int = 0
    entity_vecs: np.ndarray | None = None
    relation_vecs: np.ndarray | None = None
    known_true: set = field(default_factory=set)

    def __post_init__(self):
        if self.mode not in ("re", "kgc"):
            raise PipelineError(f"unknown mode {self.mode!r}")

    @property
    def mask_na(self) -> bool:
        # corrupted triples are a trained "none" class, so only the
        # relation-extraction path cuts the NA loss
        return self.mode == "re"


@dataclass
class TrainState:
    stage: int
    enc_cfg: encoders.EncoderConfig       # train-time (with dropout)
    eval_cfg: encoders.EncoderConfig      # dropout disabled
    cfg: TrainConfig
    num_classes: int
    fs: dc.ParamStore
    c: dc.ParamStore
    ft: dc.ParamStore | None = None
    da: adversary.Discriminator | None = None
    dr: adversary.Discriminator | None = None
    gate: dc.ParamStore | None = None
    table: WeightTable | None = None
    bank: semantic_transfer.CentroidBank | None = None
    c_target: dc.ParamStore | None = None  # fine-tuned head, if any
    history: dict = field(default_factory=dict)

    def _require(self, prev_stage: int, op: str) -> None:
        if self.stage != prev_stage:
            raise StageOrderError(
                f"{op} requires completed stage {prev_stage}, "
                f"state is at stage {self.stage}")


def schedule_phi(p: float, u: float, a: float) -> float:
    """Phi(p) = 2u / (1 + exp(-a p)) - u; zero at p = 0, bounded by u."""
    return 2.0 * u / (1.0 + np.exp(-a * p)) - u


def mask_na_loss(per_instance_losses, labels):
    """Zero losses (and cut gradients) where the label is NA (id 0).

    Accepts either a tape tensor (graph form) or a plain array.
    """
    if isinstance(per_instance_losses, dc.Tensor):
        return _mask_na_tensor(per_instance_losses.tape, per_instance_losses,
                               labels)
    losses = np.asarray(per_instance_losses, dtype=np.float64)
    return np.where(np.asarray(labels) == encoders.NA_LABEL, 0.0, losses)


class Adam:
    """Adam over one or more ParamStores, reading their gradient slots."""

    def __init__(self, stores: list[dc.ParamStore], cfg: TrainConfig):
        self.stores = stores
        self.lr = cfg.learning_rate
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        self.t = 0
        self.m = {}
        self.v = {}
        for i, store in enumerate(stores):
            for name in store.names():
                self.m[(i, name)] = np.zeros_like(store.value(name))
                self.v[(i, name)] = np.zeros_like(store.value(name))

    def zero_grads(self) -> None:
        for store in self.stores:
            store.zero_grads()

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, store in enumerate(self.stores):
            for name in store.names():
                g = store.grad(name)
                m = self.m[(i, name)]
                v = self.v[(i, name)]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                update = self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
                store.value(name)[...] -= update


def _rng(cfg: TrainConfig, stage: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stage])


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class _Cycler:
    """Endless shuffled index stream for the smaller data side."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            room = len(self.order) - self.pos
            grab = min(room, k)
            out.append(self.order[self.pos:self.pos + grab])
            self.pos += grab
            k -= grab
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.n)
                self.pos = 0
        return np.concatenate(out)


def _encode_all(params: dc.ParamStore, cfg: encoders.EncoderConfig, batch,
                chunk: int = 512) -> np.ndarray:
    """Deterministic full-dataset features with dropout off."""
    outs = []
    for start in range(0, len(batch), chunk):
        rows = batch.rows(np.arange(start, min(start + chunk, len(batch))))
        tape = dc.Tape()
        outs.append(encoders.encode(tape, params, cfg, rows, train=False).data)
    return np.concatenate(outs, axis=0)


def _init_encoder_params(task: TaskData, enc_cfg: encoders.EncoderConfig,
                         rng: np.random.Generator) -> dc.ParamStore:
    if enc_cfg.arch == "triple":
        if task.num_entities is None or task.num_relation_ids is None:
            raise PipelineError("kgc task needs entity/relation catalog sizes")
        return encoders.init_triple_params(enc_cfg, task.num_entities,
                                           task.num_relation_ids,
                                           task.struct_dim, rng)
    if task.vocab_size is None:
        raise PipelineError("re task needs a vocabulary size")
    return encoders.init_sentence_params(enc_cfg, task.vocab_size, rng)


# ---------------------------------------------------------------------------
# task assembly


def task_from_corpus(corpus: dict, spec, enc_cfg: encoders.EncoderConfig,
                     hide_target_labels: bool = False) -> TaskData:
    """Pack a generated corpus; target instances split evenly into an
    adaptation half and an evaluation half (interleaved, so both cover every
    relation).  Target labels stay in the adaptation batch for fine-tuning
    unless ``hide_target_labels``."""
    source = encoders.pack_sentences(corpus["source"], enc_cfg)
    target_all = corpus["target"]
    train_insts = target_all[0::2]
    eval_insts = target_all[1::2]
    target_train = encoders.pack_sentences(train_insts, enc_cfg)
    if hide_target_labels:
        target_train.labels = np.full(len(target_train), -1, dtype=np.int64)
    target_eval = encoders.pack_sentences(eval_insts, enc_cfg)
    return TaskData(mode="re", num_classes=spec.num_relations + 1,
                    source_train=source, target_train=target_train,
                    target_eval=target_eval, vocab_size=spec.vocab_size)


def task_from_kg(kg, spec) -> TaskData:
    """Pack a generated knowledge graph for the triple encoder."""
    known = {(t.head, t.relation, t.tail)
             for group in (kg.source_train, kg.target_train, kg.target_test)
             for t in group if t.label != 0}
    return TaskData(
        mode="kgc", num_classes=spec.num_relations + 1,
        source_train=encoders.pack_triples(kg.source_train),
        target_train=encoders.pack_triples(kg.target_train),
        target_eval=encoders.pack_triples(kg.target_test),
        num_entities=kg.entity_vecs.shape[0],
        num_relation_ids=spec.num_relations + 1,
        struct_dim=3 * spec.struct_dim,
        entity_vecs=kg.entity_vecs, relation_vecs=kg.relation_vecs,
        known_true=known)


# ---------------------------------------------------------------------------
# stages


def stage1_pretrain_source(task: TaskData, enc_cfg: encoders.EncoderConfig,
                           cfg: TrainConfig) -> TrainState:
    """Train F_s and C on labeled source data, then freeze them."""
    if len(task.source_train) == 0:
        raise PipelineError("empty source data")
    train_cfg = dataclasses.replace(enc_cfg, dropout=cfg.dropout)
    eval_cfg = dataclasses.replace(enc_cfg, dropout=0.0)
    rng = _rng(cfg, 1)
    fs = _init_encoder_params(task, train_cfg, rng)
    c = encoders.init_classifier_params(train_cfg.feature_width,
                                        task.num_classes, rng)
    opt = Adam([fs, c], cfg)
    batch_all = task.source_train
    losses = []
    for _ in range(cfg.epochs_source):
        for idx in _epoch_batches(len(batch_all), cfg.batch_size, rng):
            rows = batch_all.rows(idx)
            tape = dc.Tape()
            loss = encoders.source_loss(tape, fs, c, train_cfg, rows,
                                        train=True, rng=rng,
                                        mask_na=task.mask_na)
            opt.zero_grads()
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
    state = TrainState(stage=1, enc_cfg=train_cfg, eval_cfg=eval_cfg, cfg=cfg,
                       num_classes=task.num_classes, fs=fs, c=c)
    state.history["stage1_losses"] = losses
    state.history["stage1_train_accuracy"] = _accuracy(state, fs, batch_all)
    return state


def _accuracy(state: TrainState, enc_params: dc.ParamStore, batch) -> float:
    feats = _encode_all(enc_params, state.eval_cfg, batch)
    tape = dc.Tape()
    probs = encoders.classify(tape, state.c, dc.constant(tape, feats)).data
    labeled = batch.labels >= 0
    pred = probs.argmax(axis=1)
    return float(np.mean(pred[labeled] == batch.labels[labeled]))


def stage2_relation_weights(state: TrainState, task: TaskData) -> np.ndarray:
    """Average frozen source predictions over target data into the table."""
    state._require(1, "stage 2")
    weights = weighting.relation_weights(state.c, state.fs, state.eval_cfg,
                                         task.target_train)
    table = WeightTable()
    table.relation_weights = weights
    state.table = table
    state.stage = 2
    return weights


def stage3_instance_weights(state: TrainState, task: TaskData) -> WeightTable:
    """Adversarially pretrain F_t and D_a, then fix instance weights and gate.

    F_t starts as a copy of F_s.  After the minimax pretraining, instance
    weights are 1 - D_a(F_s(x)) over all source instances.  The gate runs a
    short calibration on the weighted objective (W_r and F_t descending, D_r
    ascending, alpha differentiable through a unit-coefficient reversal),
    after which alpha is evaluated once and the table is frozen.
    """
    state._require(2, "stage 3")
    cfg = state.cfg
    rng = _rng(cfg, 3)
    state.ft = state.fs.clone()
    width = state.enc_cfg.feature_width
    state.da = adversary.init_discriminator(width, rng, cfg.disc_hidden)
    state.dr = adversary.init_discriminator(width, rng, cfg.disc_hidden)
    state.gate = weighting.init_gate_params(width)

    src_feats = _encode_all(state.fs, state.eval_cfg, task.source_train)
    src = task.source_train
    tgt = task.target_train
    opt = Adam([state.ft, state.da.params], cfg)
    steps_per_epoch = max(1, (len(src) + cfg.batch_size - 1) // cfg.batch_size)
    total = max(1, cfg.epochs_aux * steps_per_epoch)
    cycler = _Cycler(len(tgt), rng)
    step = 0
    for _ in range(cfg.epochs_aux):
        for idx in _epoch_batches(len(src), cfg.batch_size, rng):
            lam = schedule_phi(step / total, cfg.u, cfg.schedule_alpha)
            tgt_rows = tgt.rows(cycler.take(len(idx)))
            tape = dc.Tape()
            f_src = dc.constant(tape, src_feats[idx])
            f_tgt = encoders.encode(tape, state.ft, state.enc_cfg, tgt_rows,
                                    train=True, rng=rng)
            loss = adversary.combined_adversarial_loss(tape, state.da, f_src,
                                                       f_tgt, lam)
            opt.zero_grads()
            tape.backward(loss)
            opt.step()
            step += 1

    table = state.table
    table.instance_weights = weighting.instance_weights(state.da, src_feats)

    alpha = _calibrate_gate(state, task, src_feats, rng)
    table.alpha = alpha
    table.total_weights = _assemble_totals(state, alpha, src.labels)
    table.freeze()
    state.stage = 3
    return table


def _fusion_relation_weights(table: WeightTable) -> np.ndarray:
    """Relation weights rescaled to max 1 for mixing with instance weights.

    The stored vector is a mean of softmax rows and sums to 1, so its
    entries live at the 1/num_classes scale while instance weights live in
    (0, 1); mixing the raw scales would let the instance side dominate at
    every gate value.
    """
    rel = table.relation_weights
    peak = rel.max()
    if peak <= 0:
        raise PipelineError("relation weights are all zero")
    return rel / peak


def _assemble_totals(state: TrainState, alpha: float,
                     labels: np.ndarray) -> np.ndarray:
    cfg = state.cfg
    table = state.table
    if not cfg.use_relation_weights and not cfg.use_instance_weights:
        return np.ones(len(labels))
    return weighting.total_weights(alpha, table.instance_weights,
                                   _fusion_relation_weights(table), labels)


def _effective_alpha(state: TrainState) -> float | None:
    """Ablation switches pin alpha; None means the gate decides."""
    cfg = state.cfg
    if not cfg.use_relation_weights and not cfg.use_instance_weights:
        return 0.5  # weights are all ones, alpha is irrelevant
    if not cfg.use_relation_weights:
        return 1.0
    if not cfg.use_instance_weights:
        return 0.0
    if not cfg.use_gate:
        return cfg.fixed_alpha
    return None


def _calibrate_gate(state: TrainState, task: TaskData, src_feats: np.ndarray,
                    rng: np.random.Generator) -> float:
    """Warm D_r on the weighted objective while the gate (if enabled) trains.

    The warmup runs for every ablation variant so stage 4 always starts from
    a comparably initialized main discriminator; ablations pin alpha to a
    constant instead of reading the gate.
    """
    pinned = _effective_alpha(state)
    cfg = state.cfg
    src = task.source_train
    tgt = task.target_train
    table = state.table
    stores = [state.ft, state.dr.params]
    if pinned is None:
        stores.append(state.gate)
    opt = Adam(stores, cfg)
    cycler = _Cycler(len(tgt), rng)
    src_cycler = _Cycler(len(src), rng)
    for step in range(cfg.gate_steps):
        idx = src_cycler.take(min(cfg.batch_size, len(src)))
        tgt_rows = tgt.rows(cycler.take(min(cfg.batch_size, len(tgt))))
        lam = schedule_phi(step / max(1, cfg.gate_steps), cfg.u,
                           cfg.schedule_alpha)
        tape = dc.Tape()
        f_src = dc.constant(tape, src_feats[idx])
        f_tgt = encoders.encode(tape, state.ft, state.enc_cfg, tgt_rows,
                                train=True, rng=rng)
        totals = _batch_totals(state, tape, f_tgt, idx, src.labels, pinned)
        loss = adversary.combined_adversarial_loss(
            tape, state.dr, f_src, f_tgt, lam, source_weights=totals)
        opt.zero_grads()
        tape.backward(loss)
        opt.step()
    if pinned is not None:
        return pinned
    tgt_feats = _encode_all(state.ft, state.eval_cfg, tgt)
    return weighting.gate_alpha(state.gate, tgt_feats)


def _batch_totals(state: TrainState, tape: dc.Tape, f_tgt: dc.Tensor,
                  idx: np.ndarray, labels: np.ndarray,
                  pinned: float | None) -> dc.Tensor:
    """Batch-normalized fused weights with a live (differentiable) alpha.

    The alpha subgraph sits behind a unit-coefficient gradient reversal so
    one backward pass trains the gate and F_t downhill on the weighted
    objective while D_r climbs it.
    """
    cfg = state.cfg
    table = state.table
    if not cfg.use_relation_weights and not cfg.use_instance_weights:
        return dc.constant(tape, np.ones(len(idx)))
    if pinned is None:
        mean_tgt = dc.mean(f_tgt, axis=0)
        alpha_t = dc.grl(dc.sigmoid(dc.dot(state.gate.tensor(tape, "w"),
                                           mean_tgt)), 1.0)
    else:
        alpha_t = dc.constant(tape, pinned)
    inst = dc.constant(tape, table.instance_weights[idx])
    rel = dc.constant(tape, _fusion_relation_weights(table)[labels[idx]])
    one = dc.constant(tape, 1.0)
    raw = dc.add(dc.mul(alpha_t, inst), dc.mul(dc.sub(one, alpha_t), rel))
    return dc.div(dc.mul(raw, dc.constant(tape, float(len(idx)))),
                  dc.sum_(raw))


def stage4_adversarial_adapt(state: TrainState, task: TaskData) -> TrainState:
    """Weighted minimax between F_t and D_r with the frozen weight table."""
    state._require(3, "stage 4")
    cfg = state.cfg
    rng = _rng(cfg, 4)
    src = task.source_train
    tgt = task.target_train
    src_feats = _encode_all(state.fs, state.eval_cfg, src)
    totals = state.table.total_weights
    opt = Adam([state.ft, state.dr.params], cfg)
    steps_per_epoch = max(1, (len(src) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = max(1, cfg.epochs_adapt * steps_per_epoch)
    cycler = _Cycler(len(tgt), rng)

    use_sm = cfg.sm_coeff > 0.0
    if use_sm:
        state.bank = semantic_transfer.CentroidBank(
            state.num_classes, state.enc_cfg.feature_width, zeta=cfg.zeta)
        pseudo_all = semantic_transfer.pseudo_label(state.c, state.fs,
                                                    state.eval_cfg, tgt)

    lambdas = []
    step = 0
    for _ in range(cfg.epochs_adapt):
        for idx in _epoch_batches(len(src), cfg.batch_size, rng):
            lam = schedule_phi(step / total_steps, cfg.u, cfg.schedule_alpha)
            lambdas.append(lam)
            tgt_idx = cycler.take(len(idx))
            tgt_rows = tgt.rows(tgt_idx)
            tape = dc.Tape()
            f_src = dc.constant(tape, src_feats[idx])
            f_tgt = encoders.encode(tape, state.ft, state.enc_cfg, tgt_rows,
                                    train=True, rng=rng)
            loss = adversary.combined_adversarial_loss(
                tape, state.dr, f_src, f_tgt, lam, source_weights=totals[idx])
            if use_sm:
                sm = semantic_transfer.sm_loss_graph(
                    tape, state.bank, f_tgt, pseudo_all[tgt_idx],
                    src_feats[idx], src.labels[idx])
                loss = dc.add(loss, dc.mul(sm, dc.constant(tape, cfg.sm_coeff)))
            opt.zero_grads()
            tape.backward(loss)
            opt.step()
            if use_sm:
                tape_eval = dc.Tape()
                f_now = encoders.encode(tape_eval, state.ft, state.eval_cfg,
                                        tgt_rows, train=False).data
                semantic_transfer.apply_bank_update(
                    state.bank, f_now, pseudo_all[tgt_idx], src_feats[idx],
                    src.labels[idx])
            step += 1
    state.history["stage4_lambdas"] = lambdas

    if cfg.fine_tune_frac > 0.0:
        _fine_tune(state, task, rng)
    state.stage = 4
    return state


def _fine_tune(state: TrainState, task: TaskData,
               rng: np.random.Generator) -> None:
    """Supervised adaptation: a fresh target head plus continued F_t training."""
    cfg = state.cfg
    tgt = task.target_train
    labeled = np.where(tgt.labels >= 0)[0]
    if len(labeled) == 0:
        raise PipelineError("fine-tuning requires labeled target data")
    n_keep = max(1, int(round(cfg.fine_tune_frac * len(labeled))))
    keep = labeled[rng.permutation(len(labeled))[:n_keep]]
    subset = tgt.rows(keep)
    head = encoders.init_classifier_params(state.enc_cfg.feature_width,
                                           state.num_classes, rng)
    opt = Adam([state.ft, head], cfg)
    for _ in range(cfg.epochs_adapt):
        for idx in _epoch_batches(len(subset), cfg.batch_size, rng):
            rows = subset.rows(idx)
            tape = dc.Tape()
            loss = encoders.source_loss(tape, state.ft, head, state.enc_cfg,
                                        rows, train=True, rng=rng,
                                        mask_na=task.mask_na)
            opt.zero_grads()
            tape.backward(loss)
            opt.step()
    state.c_target = head


def run_pipeline(task: TaskData, enc_cfg: encoders.EncoderConfig,
                 cfg: TrainConfig) -> TrainState:
    state = stage1_pretrain_source(task, enc_cfg, cfg)
    stage2_relation_weights(state, task)
    stage3_instance_weights(state, task)
    stage4_adversarial_adapt(state, task)
    return state


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict(state: TrainState, batch, encoder: str = "target") -> PredictionSet:
    """Predictions of C (or the fine-tuned head) over F_s or F_t features.

    Confidence is the maximum non-NA class probability, the ranking score
    for held-out precision.
    """
    enc_params = _pick_encoder(state, encoder)
    head = state.c_target if (encoder == "target" and
                              state.c_target is not None) else state.c
    feats = _encode_all(enc_params, state.eval_cfg, batch)
    tape = dc.Tape()
    probs = encoders.classify(tape, head, dc.constant(tape, feats)).data
    non_na = probs.copy()
    non_na[:, encoders.NA_LABEL] = -np.inf
    return PredictionSet(probs.argmax(axis=1), non_na.max(axis=1), batch.labels)


def _pick_encoder(state: TrainState, encoder: str) -> dc.ParamStore:
    if encoder == "source":
        return state.fs
    if encoder == "target":
        if state.ft is None:
            raise PipelineError("no trained target extractor yet")
        return state.ft
    raise PipelineError(f"unknown encoder {encoder!r}")


def triple_scores(state: TrainState, batch, encoder: str = "target") -> np.ndarray:
    """P(stated relation | triple), the binary plausibility score."""
    enc_params = _pick_encoder(state, encoder)
    feats = _encode_all(enc_params, state.eval_cfg, batch)
    tape = dc.Tape()
    probs = encoders.classify(tape, state.c, dc.constant(tape, feats)).data
    return probs[np.arange(len(batch)), batch.relations]


def link_prediction_rankings(state: TrainState, task: TaskData,
                             positives, encoder: str = "target",
                             domain: int = 1) -> RankingSet:
    """Head and tail corruption queries over one domain's entity pool."""
    if task.entity_vecs is None or task.relation_vecs is None:
        raise PipelineError("link prediction needs structural vectors")
    per_domain = task.num_entities // 2
    pool = np.arange(domain * per_domain, (domain + 1) * per_domain)
    queries = []
    for t in positives:
        for side in ("head", "tail"):
            if side == "head":
                heads, tails = pool, np.full(len(pool), t.tail)
                gold_index = int(np.where(pool == t.head)[0][0])
            else:
                heads, tails = np.full(len(pool), t.head), pool
                gold_index = int(np.where(pool == t.tail)[0][0])
            rels = np.full(len(pool), t.relation)
            structural = np.concatenate(
                [task.entity_vecs[heads], task.relation_vecs[rels],
                 task.entity_vecs[tails]], axis=1)
            batch = encoders.TripleBatch(heads, rels, tails, structural,
                                         np.full(len(pool), -1))
            scores = triple_scores(state, batch, encoder)
            known = np.array([(h, t.relation, tl) in task.known_true
                              for h, tl in zip(heads, tails)])
            known[gold_index] = False
            queries.append(RankingQuery(scores, gold_index, known))
    return RankingSet(queries, filtered=True)


# ---------------------------------------------------------------------------
# checkpoints and manifests


_STORES = ("fs", "c", "ft", "gate", "c_target")
_DISCS = ("da", "dr")


def save_checkpoint(state: TrainState, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name in _STORES:
        store = getattr(state, name)
        if store is not None:
            store.save(os.path.join(out_dir, f"{name}.params"))
    for name in _DISCS:
        disc = getattr(state, name)
        if disc is not None:
            disc.params.save(os.path.join(out_dir, f"{name}.params"))
    if state.table is not None and state.table.frozen:
        state.table.save(os.path.join(out_dir, "weights.txt"))
    meta = {
        "stage": state.stage,
        "num_classes": state.num_classes,
        "arch": state.enc_cfg.arch,
        "word_dim": state.enc_cfg.word_dim,
        "pos_dim": state.enc_cfg.pos_dim,
        "kernel": state.enc_cfg.kernel,
        "channels": state.enc_cfg.channels,
        "max_len": state.enc_cfg.max_len,
        "dropout": state.enc_cfg.dropout,
        "activation": state.enc_cfg.activation,
    }
    with open(os.path.join(out_dir, "state.txt"), "w") as fh:
        for key in sorted(meta):
            fh.write(f"state.{key}={meta[key]}\n")


def load_checkpoint(ckpt_dir, cfg: TrainConfig) -> TrainState:
    meta = {}
    with open(os.path.join(ckpt_dir, "state.txt")) as fh:
        for line in fh:
            key, value = line.strip().split("=", 1)
            meta[key.split(".", 1)[1]] = value
    enc_cfg = encoders.EncoderConfig(
        arch=meta["arch"], word_dim=int(meta["word_dim"]),
        pos_dim=int(meta["pos_dim"]), kernel=int(meta["kernel"]),
        channels=int(meta["channels"]), max_len=int(meta["max_len"]),
        dropout=float(meta["dropout"]), activation=meta["activation"])
    eval_cfg = dataclasses.replace(enc_cfg, dropout=0.0)

    def load_store(name):
        path = os.path.join(ckpt_dir, f"{name}.params")
        return dc.ParamStore.load(path) if os.path.exists(path) else None

    state = TrainState(stage=int(meta["stage"]), enc_cfg=enc_cfg,
                       eval_cfg=eval_cfg, cfg=cfg,
                       num_classes=int(meta["num_classes"]),
                       fs=load_store("fs"), c=load_store("c"))
    state.ft = load_store("ft")
    state.gate = load_store("gate")
    state.c_target = load_store("c_target")
    width = enc_cfg.feature_width
    for name in _DISCS:
        store = load_store(name)
        if store is not None:
            hidden = store.value("b1").shape[0]
            setattr(state, name,
                    adversary.Discriminator(store, width, hidden))
    weights_path = os.path.join(ckpt_dir, "weights.txt")
    if os.path.exists(weights_path):
        state.table = WeightTable.load(weights_path)
    return state


def write_manifest(path, config_echo: dict, stage_times: dict,
                   metrics: dict) -> None:
    """Run manifest: config echo, stage timestamps, final metrics."""
    with open(path, "w") as fh:
        for section, mapping in (("config", config_echo),
                                 ("stage_time", stage_times),
                                 ("metric", metrics)):
            for key in sorted(mapping):
                value = mapping[key]
                if isinstance(value, float):
                    value = repr(value)
                fh.write(f"{section}.{key}={value}\n")


def now_stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")
