"""Instance encoders and the source relation classifier.

Sentences are encoded by a same-padded 1-D convolution over word + position
embeddings, followed by either a global max-pool (cnn) or a three-segment
max-pool split at the two entity positions (pcnn).  Triples are encoded by
concatenating learned id embeddings (head, relation, tail) with an optional
structural vector and passing the result through one hidden affine layer.

Source (F_s) and target (F_t) extractors are separate ParamStores that never
alias; the target store starts as a deep copy of the source one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

NA_LABEL = 0  # the "no relation" class id; its classification loss is cut

_ACTIVATIONS = {"tanh": dc.tanh, "relu": dc.relu}


class EncoderError(Exception):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Shared encoder hyperparameters; `arch` selects the instance type."""

    arch: str = "cnn"  # cnn | pcnn | triple
    word_dim: int = 16
    pos_dim: int = 4
    kernel: int = 3
    channels: int = 16
    max_len: int = 30
    dropout: float = 0.0
    activation: str = "tanh"

    def __post_init__(self):
        if self.arch not in ("cnn", "pcnn", "triple"):
            raise EncoderError(f"unknown arch {self.arch!r}")
        if self.kernel % 2 != 1:
            raise EncoderError(f"kernel size must be odd, got {self.kernel}")
        if self.channels < 1:
            raise EncoderError("channels must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.activation not in _ACTIVATIONS:
            raise EncoderError(f"unknown activation {self.activation!r}")

    @property
    def input_width(self) -> int:
        return self.word_dim + 2 * self.pos_dim

    @property
    def feature_width(self) -> int:
        return 3 * self.channels if self.arch == "pcnn" else self.channels


@dataclass
class SentenceInstance:
    """One tokenized sentence with its entity spans and optional label."""

    tokens: np.ndarray
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    relation: int | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        n = len(self.tokens)
        if n < 1:
            raise EncoderError("sentence must have at least one token")
        for name, (a, b) in (("head", self.head_span), ("tail", self.tail_span)):
            if not (0 <= a < b <= n):
                raise EncoderError(f"{name} span {(a, b)} outside [0, {n})")
        h, t = self.head_span, self.tail_span
        if max(h[0], t[0]) < min(h[1], t[1]):
            raise EncoderError(f"head span {h} overlaps tail span {t}")


@dataclass
class TripleInstance:
    """One (head, relation, tail) id triple with optional structure and label."""

    head: int
    relation: int
    tail: int
    structural_input: np.ndarray | None = None
    label: int | None = None  # 1 positive, 0 negative, None unlabeled


@dataclass
class SentenceBatch:
    """Column-packed sentences, padded to the longest member."""

    tokens: np.ndarray       # (N, L) int64, zero-padded
    lengths: np.ndarray      # (N,)
    head_start: np.ndarray   # (N,)
    tail_start: np.ndarray   # (N,)
    seg1: np.ndarray         # (N,) first segment boundary (inclusive)
    seg2: np.ndarray         # (N,) second segment boundary (inclusive)
    labels: np.ndarray       # (N,) relation id, -1 when unlabeled

    def __len__(self):
        return self.tokens.shape[0]

    def rows(self, idx) -> "SentenceBatch":
        return SentenceBatch(self.tokens[idx], self.lengths[idx],
                             self.head_start[idx], self.tail_start[idx],
                             self.seg1[idx], self.seg2[idx], self.labels[idx])


@dataclass
class TripleBatch:
    heads: np.ndarray       # (N,)
    relations: np.ndarray   # (N,)
    tails: np.ndarray       # (N,)
    structural: np.ndarray | None  # (N, S) or None
    labels: np.ndarray      # (N,) 1/0, -1 when unlabeled

    def __len__(self):
        return self.heads.shape[0]

    def rows(self, idx) -> "TripleBatch":
        return TripleBatch(
            self.heads[idx], self.relations[idx], self.tails[idx],
            None if self.structural is None else self.structural[idx],
            self.labels[idx])


def pack_sentences(instances: list[SentenceInstance], cfg: EncoderConfig) -> SentenceBatch:
    if not instances:
        raise EncoderError("cannot pack an empty instance list")
    n = len(instances)
    lengths = np.array([len(s.tokens) for s in instances], dtype=np.int64)
    if lengths.max() > cfg.max_len:
        raise EncoderError(
            f"sentence length {lengths.max()} exceeds max_len {cfg.max_len}")
    L = int(lengths.max())
    tokens = np.zeros((n, L), dtype=np.int64)
    for i, s in enumerate(instances):
        tokens[i, : len(s.tokens)] = s.tokens
    head_start = np.array([s.head_span[0] for s in instances], dtype=np.int64)
    tail_start = np.array([s.tail_span[0] for s in instances], dtype=np.int64)
    # piecewise boundaries: last token of each entity, in sentence order
    head_end = np.array([s.head_span[1] - 1 for s in instances], dtype=np.int64)
    tail_end = np.array([s.tail_span[1] - 1 for s in instances], dtype=np.int64)
    seg1 = np.minimum(head_end, tail_end)
    seg2 = np.maximum(head_end, tail_end)
    labels = np.array(
        [-1 if s.relation is None else s.relation for s in instances],
        dtype=np.int64)
    return SentenceBatch(tokens, lengths, head_start, tail_start, seg1, seg2, labels)


def pack_triples(instances: list[TripleInstance]) -> TripleBatch:
    if not instances:
        raise EncoderError("cannot pack an empty instance list")
    heads = np.array([t.head for t in instances], dtype=np.int64)
    rels = np.array([t.relation for t in instances], dtype=np.int64)
    tails = np.array([t.tail for t in instances], dtype=np.int64)
    have_struct = [t.structural_input is not None for t in instances]
    if any(have_struct) and not all(have_struct):
        raise EncoderError("mixed structural/non-structural triples in one batch")
    structural = (np.stack([np.asarray(t.structural_input, dtype=np.float64)
                            for t in instances])
                  if all(have_struct) else None)
    labels = np.array([-1 if t.label is None else t.label for t in instances],
                      dtype=np.int64)
    return TripleBatch(heads, rels, tails, structural, labels)


# ---------------------------------------------------------------------------
# parameter initialization

INIT_SCALE = 0.05  # uniform(-0.05, 0.05), stands in for pretrained vectors


def init_sentence_params(cfg: EncoderConfig, vocab_size: int,
                         rng: np.random.Generator) -> dc.ParamStore:
    store = dc.ParamStore()
    u = lambda *shape: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
    store.add("word_emb", u(vocab_size, cfg.word_dim))
    n_buckets = 2 * cfg.max_len + 1
    store.add("pos_head_emb", u(n_buckets, cfg.pos_dim))
    store.add("pos_tail_emb", u(n_buckets, cfg.pos_dim))
    store.add("conv_kernel", u(cfg.channels, cfg.kernel, cfg.input_width))
    store.add("conv_bias", np.zeros(cfg.channels))
    return store


def init_triple_params(cfg: EncoderConfig, num_entities: int, num_relations: int,
                       structural_dim: int, rng: np.random.Generator) -> dc.ParamStore:
    store = dc.ParamStore()
    u = lambda *shape: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
    store.add("ent_emb", u(num_entities, cfg.word_dim))
    store.add("rel_emb", u(num_relations, cfg.word_dim))
    in_width = 3 * cfg.word_dim + structural_dim
    store.add("hidden_w", u(in_width, cfg.channels))
    store.add("hidden_b", np.zeros(cfg.channels))
    return store


def init_classifier_params(feature_width: int, num_classes: int,
                           rng: np.random.Generator) -> dc.ParamStore:
    store = dc.ParamStore()
    store.add("w", rng.uniform(-INIT_SCALE, INIT_SCALE,
                               size=(feature_width, num_classes)))
    store.add("b", np.zeros(num_classes))
    return store


# ---------------------------------------------------------------------------
# encoding

def embed_sentence(tape: dc.Tape, params: dc.ParamStore, cfg: EncoderConfig,
                   batch: SentenceBatch) -> dc.Tensor:
    """Word + relative-position embeddings, padded rows zeroed.

    Row i of each sentence is the word embedding of token i concatenated
    with the embeddings of the clipped offsets (i - head_start) and
    (i - tail_start); offsets are bucketed into [-max_len, max_len].
    """
    n, L = batch.tokens.shape
    word = dc.embedding(params.tensor(tape, "word_emb"), batch.tokens)
    pos = np.arange(L)[None, :]
    head_off = np.clip(pos - batch.head_start[:, None], -cfg.max_len, cfg.max_len)
    tail_off = np.clip(pos - batch.tail_start[:, None], -cfg.max_len, cfg.max_len)
    head = dc.embedding(params.tensor(tape, "pos_head_emb"), head_off + cfg.max_len)
    tail = dc.embedding(params.tensor(tape, "pos_tail_emb"), tail_off + cfg.max_len)
    rows = dc.concat([word, head, tail], axis=2)
    pad_mask = (pos < batch.lengths[:, None]).astype(np.float64)
    return dc.mul(rows, dc.constant(tape, pad_mask[:, :, None]))


def cnn_encode(tape: dc.Tape, params: dc.ParamStore, cfg: EncoderConfig,
               embedded: dc.Tensor, lengths: np.ndarray, train: bool = False,
               rng: np.random.Generator | None = None) -> dc.Tensor:
    """Convolution, global max-pool over valid positions, activation, dropout."""
    conv = dc.conv1d_same(embedded, params.tensor(tape, "conv_kernel"),
                          params.tensor(tape, "conv_bias"))
    L = embedded.data.shape[1]
    mask = np.arange(L)[None, :] < lengths[:, None]
    pooled = dc.masked_maxpool(conv, mask)
    out = _ACTIVATIONS[cfg.activation](pooled)
    return dc.dropout(out, cfg.dropout, rng, train)


def pcnn_encode(tape: dc.Tape, params: dc.ParamStore, cfg: EncoderConfig,
                embedded: dc.Tensor, lengths: np.ndarray,
                seg1: np.ndarray, seg2: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> dc.Tensor:
    """Convolution, per-segment max-pools split at the entity positions.

    Segments are [0, seg1], (seg1, seg2], (seg2, length); an empty segment
    pools to 0 before the activation.
    """
    if np.any(seg1 >= seg2):
        raise EncoderError("segment boundaries must satisfy seg1 < seg2")
    conv = dc.conv1d_same(embedded, params.tensor(tape, "conv_kernel"),
                          params.tensor(tape, "conv_bias"))
    pooled = dc.piecewise_maxpool(conv, seg1, seg2, lengths)
    out = _ACTIVATIONS[cfg.activation](pooled)
    return dc.dropout(out, cfg.dropout, rng, train)


def encode_triples(tape: dc.Tape, params: dc.ParamStore, cfg: EncoderConfig,
                   batch: TripleBatch, train: bool = False,
                   rng: np.random.Generator | None = None) -> dc.Tensor:
    """Concatenated id embeddings (+ structural vector) through one hidden layer."""
    ent = params.tensor(tape, "ent_emb")
    rel = params.tensor(tape, "rel_emb")
    parts = [dc.embedding(ent, batch.heads),
             dc.embedding(rel, batch.relations),
             dc.embedding(ent, batch.tails)]
    if batch.structural is not None:
        parts.append(dc.constant(tape, batch.structural))
    x = dc.concat(parts, axis=1)
    if x.data.shape[1] != params.value("hidden_w").shape[0]:
        raise EncoderError(
            f"triple input width {x.data.shape[1]} != hidden layer input "
            f"{params.value('hidden_w').shape[0]}")
    h = dc.affine(x, params.tensor(tape, "hidden_w"), params.tensor(tape, "hidden_b"))
    out = _ACTIVATIONS[cfg.activation](h)
    return dc.dropout(out, cfg.dropout, rng, train)


def encode(tape: dc.Tape, params: dc.ParamStore, cfg: EncoderConfig, batch,
           train: bool = False, rng: np.random.Generator | None = None) -> dc.Tensor:
    """Arch dispatch: returns (N, feature_width) features for any batch type."""
    if cfg.arch == "triple":
        return encode_triples(tape, params, cfg, batch, train, rng)
    embedded = embed_sentence(tape, params, cfg, batch)
    if cfg.arch == "cnn":
        return cnn_encode(tape, params, cfg, embedded, batch.lengths, train, rng)
    return pcnn_encode(tape, params, cfg, embedded, batch.lengths,
                       batch.seg1, batch.seg2, train, rng)


def class_logits(tape: dc.Tape, params: dc.ParamStore,
                 features: dc.Tensor) -> dc.Tensor:
    if features.data.shape[1] != params.value("w").shape[0]:
        raise EncoderError(
            f"feature width {features.data.shape[1]} != classifier input "
            f"{params.value('w').shape[0]}")
    return dc.affine(features, params.tensor(tape, "w"), params.tensor(tape, "b"))


def classify(tape: dc.Tape, params: dc.ParamStore,
             features: dc.Tensor) -> dc.Tensor:
    """Probability rows over the source relation catalog."""
    return dc.softmax(class_logits(tape, params, features))


def mask_na_loss(tape: dc.Tape, per_instance: dc.Tensor,
                 labels: np.ndarray) -> dc.Tensor:
    """Zero the loss (and cut its gradient) wherever the label is NA."""
    keep = (np.asarray(labels) != NA_LABEL).astype(np.float64)
    return dc.mul(per_instance, dc.constant(tape, keep))


def source_loss(tape: dc.Tape, enc_params: dc.ParamStore,
                cls_params: dc.ParamStore, cfg: EncoderConfig, batch,
                train: bool = False, rng: np.random.Generator | None = None,
                mask_na: bool = True) -> dc.Tensor:
    """Mean cross-entropy over the batch's non-NA instances.

    With ``mask_na`` (the default), NA-labeled rows contribute exactly zero
    loss and gradient, and the mean runs over the remaining rows only; an
    all-NA batch yields loss 0.
    """
    labels = batch.labels
    if np.any(labels < 0):
        raise EncoderError("source_loss requires every instance to be labeled")
    feats = encode(tape, enc_params, cfg, batch, train, rng)
    probs = classify(tape, cls_params, feats)
    nll = dc.neg(dc.log(dc.take_rows(probs, labels)))
    if mask_na:
        nll = mask_na_loss(tape, nll, labels)
        denom = max(1, int(np.sum(labels != NA_LABEL)))
    else:
        denom = len(labels)
    return dc.mul(dc.sum_(nll), dc.constant(tape, 1.0 / denom))
