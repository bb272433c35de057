"""Deterministic synthetic corpora and knowledge graphs for relation adaptation.

PRNG
----
Generation uses xoshiro256** seeded through splitmix64 so datasets are
bit-reproducible across platforms and languages:

    splitmix64:  z = (s += 0x9E3779B97F4A7C15);
                 z = (z ^ z >> 30) * 0xBF58476D1CE4E5B9;
                 z = (z ^ z >> 27) * 0x94D049BB133111EB; return z ^ z >> 31
    xoshiro256** next: r = rotl(s1 * 5, 7) * 9; t = s1 << 17;
                 s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t;
                 s3 = rotl(s3, 45); return r
    state: four splitmix64 outputs from the 64-bit seed.

Floats are (next >> 11) * 2^-53; bounded ints use rejection on the high bits
(Lemire-free modulo with rejection of the biased region).

Sentence file format (one instance per line, tab-separated fields)
    tokens: space-separated vocabulary ids
    head span: "start end" (half-open)
    tail span: "start end"
    relation id (decimal; id 0 is NA)

Triple file format (tab-separated): head, relation, tail, label with label
1 = positive, 0 = negative, -1 = unlabeled.  Structural vectors live in
companion files with lines "id v1 v2 ..." at full round-trip precision.
Spec files are line-oriented "section.key=value".

Corpus construction: every relation owns a primary trigger token, one
synonym trigger and a small set of relation-specific context tokens; a
sentence is noise prefix + head entity + filler + trigger + filler + tail
entity + noise suffix, where each filler slot draws a relation context
token with probability ``context_rate`` and a generic filler otherwise.
The target domain shifts the generic-filler distribution and swaps triggers
for synonyms at configurable rates; NA sentences carry no trigger and only
generic fillers.  Outlier relations are realized only in the source domain.
The synonym swap is the load-bearing shift for a max-pooling encoder; the
relation context tokens give unsupervised adaptation a class-consistent
signal to latch onto.

KG construction: entities sit in clusters; entity vectors are cluster
center + a per-index offset + optional noise.  A relation is a planted
bipartite mapping between two clusters pairing equal indices, so with zero
noise the tail vector is exactly head vector + relation offset.  The target
domain uses a fresh entity pool whose vectors are shifted by a constant
bias, which preserves the relational geometry while moving the input
distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import SentenceInstance, TripleInstance

_MASK64 = (1 << 64) - 1


class DatagenError(Exception):
    pass


class ParseError(DatagenError):
    pass


def _splitmix64(state: int):
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256:
    """xoshiro256** with a splitmix64-expanded 64-bit seed."""

    def __init__(self, seed: int):
        s = seed & _MASK64
        self.state = []
        for _ in range(4):
            s, out = _splitmix64(s)
            self.state.append(out)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.state
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.state = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise DatagenError("randrange needs n >= 1")
        threshold = ((1 << 64) // n) * n  # reject the biased top region
        while True:
            x = self.next_u64()
            if x < threshold:
                return x % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform on [lo, hi] inclusive."""
        return lo + self.randrange(hi - lo + 1)

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def shuffle(self, seq: list) -> None:
        for i in range(len(seq) - 1, 0, -1):
            j = self.randrange(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def gauss(self) -> float:
        # Box-Muller; one fresh pair per call keeps the stream position
        # a pure function of call count
        import math
        u1 = self.random()
        while u1 <= 1e-300:
            u1 = self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


# ---------------------------------------------------------------------------
# corpus generation


@dataclass(frozen=True)
class CorpusSpec:
    """Layout and shift knobs for the synthetic sentence corpus."""

    vocab_size: int = 160
    num_relations: int = 8               # source relations, excluding NA
    target_relations: tuple = (1, 2, 3, 4, 5)
    samples_per_relation: int = 250
    na_fraction: float = 0.1
    max_len: int = 20
    seed: int = 0
    # domain shift: filler-distribution divergence and synonym swap rates
    source_filler_shift: float = 0.05
    target_filler_shift: float = 0.9
    source_trigger_swap: float = 0.02
    target_trigger_swap: float = 0.6
    noise_tokens: int = 20
    filler_tokens: int = 40
    entity_tokens: int = 24
    context_tokens_per_relation: int = 3
    context_rate: float = 0.7
    context_noise: float = 0.5   # chance a context token comes from a wrong relation

    def __post_init__(self):
        if not 0.0 <= self.na_fraction < 1.0:
            raise DatagenError("na_fraction must be in [0, 1)")
        bad = [r for r in self.target_relations
               if not 1 <= r <= self.num_relations]
        if bad:
            raise DatagenError(
                f"target relations {bad} outside the source set "
                f"[1, {self.num_relations}]")

    @property
    def outlier_relations(self) -> tuple:
        return tuple(r for r in range(1, self.num_relations + 1)
                     if r not in self.target_relations)


@dataclass
class VocabLayout:
    noise: range
    fillers: range
    entities: range
    triggers: dict   # relation id -> (primary, synonym)
    contexts: dict   # relation id -> list of context token ids


def vocab_layout(spec: CorpusSpec) -> VocabLayout:
    need = spec.noise_tokens + spec.filler_tokens + spec.entity_tokens \
        + (2 + spec.context_tokens_per_relation) * spec.num_relations + 1
    if spec.vocab_size < need:
        raise DatagenError(
            f"vocab_size {spec.vocab_size} too small for requested structure "
            f"(needs {need})")
    base = 1  # id 0 is reserved padding, never emitted
    noise = range(base, base + spec.noise_tokens)
    fillers = range(noise.stop, noise.stop + spec.filler_tokens)
    entities = range(fillers.stop, fillers.stop + spec.entity_tokens)
    triggers = {}
    contexts = {}
    cursor = entities.stop
    for r in range(1, spec.num_relations + 1):
        triggers[r] = (cursor, cursor + 1)
        cursor += 2
        contexts[r] = list(range(cursor, cursor + spec.context_tokens_per_relation))
        cursor += spec.context_tokens_per_relation
    return VocabLayout(noise, fillers, entities, triggers, contexts)


def _pick_filler(rng: Xoshiro256, layout: VocabLayout, shift: float) -> int:
    pool = list(layout.fillers)
    half = len(pool) // 2
    if rng.random() < shift:
        return rng.choice(pool[half:])
    return rng.choice(pool[:half])


def _make_sentence(rng: Xoshiro256, spec: CorpusSpec, layout: VocabLayout,
                   relation: int, filler_shift: float, trigger_swap: float,
                   noise_relations: tuple) -> SentenceInstance:
    def slot_token():
        if relation != 0 and rng.random() < spec.context_rate:
            r = relation
            if rng.random() < spec.context_noise:
                # context confusion stays within the vocabulary the domain
                # actually realizes, so target text never mentions
                # outlier-relation contexts
                r = rng.choice(noise_relations)
            return rng.choice(layout.contexts[r])
        return _pick_filler(rng, layout, filler_shift)

    tokens: list[int] = []
    for _ in range(rng.randint(0, 2)):
        tokens.append(rng.choice(list(layout.noise)))
    head_pos = len(tokens)
    tokens.append(rng.choice(list(layout.entities)))
    for _ in range(rng.randint(1, 2)):
        tokens.append(slot_token())
    if relation == 0:
        tokens.append(_pick_filler(rng, layout, filler_shift))
    else:
        primary, synonym = layout.triggers[relation]
        tokens.append(synonym if rng.random() < trigger_swap else primary)
    for _ in range(rng.randint(1, 2)):
        tokens.append(slot_token())
    tail_pos = len(tokens)
    tokens.append(rng.choice(list(layout.entities)))
    for _ in range(rng.randint(0, 2)):
        tokens.append(rng.choice(list(layout.noise)))
    tokens = tokens[: spec.max_len]
    return SentenceInstance(np.array(tokens, dtype=np.int64),
                            (head_pos, head_pos + 1),
                            (tail_pos, tail_pos + 1), relation)


def gen_corpus(spec: CorpusSpec) -> dict:
    """Source and target sentence lists, deterministic in the spec's seed."""
    layout = vocab_layout(spec)
    rng = Xoshiro256(spec.seed)
    source: list[SentenceInstance] = []
    target: list[SentenceInstance] = []

    def emit(relations, filler_shift, trigger_swap, sink):
        pool = tuple(relations)
        for r in pool:
            for _ in range(spec.samples_per_relation):
                sink.append(_make_sentence(rng, spec, layout, r, filler_shift,
                                           trigger_swap, pool))
        n_na = int(round(spec.na_fraction * len(sink)))
        for _ in range(n_na):
            sink.append(_make_sentence(rng, spec, layout, 0, filler_shift,
                                       trigger_swap, pool))

    emit(range(1, spec.num_relations + 1), spec.source_filler_shift,
         spec.source_trigger_swap, source)
    emit(spec.target_relations, spec.target_filler_shift,
         spec.target_trigger_swap, target)
    return {"source": source, "target": target, "layout": layout}


def make_partial_split(instances: list[SentenceInstance],
                       keep_relations) -> tuple[list[SentenceInstance], dict]:
    """Drop instances outside the keep set; also emit an id remapping table.

    NA (id 0) is always kept and always maps to 0.  The remapping table maps
    old relation ids to contiguous new ids; it is informational, instances
    keep their original ids.
    """
    keep = set(keep_relations)
    if not keep:
        raise DatagenError("keep set must be nonempty")
    kept = [s for s in instances if s.relation == 0 or s.relation in keep]
    if not [s for s in kept if s.relation != 0]:
        raise DatagenError("partial split removed every labeled instance")
    remap = {0: 0}
    for new_id, old_id in enumerate(sorted(keep), start=1):
        remap[old_id] = new_id
    return kept, remap


# ---------------------------------------------------------------------------
# knowledge-graph generation


@dataclass(frozen=True)
class KgSpec:
    """Planted-geometry knowledge graph with a shifted target domain."""

    num_entities: int = 50               # per domain
    num_relations: int = 10
    cluster_size: int = 10
    struct_dim: int = 6
    triples_per_relation: int = 10       # source-side positives per relation
    low_resource_relations: tuple = (1, 2, 3)
    low_resource_train: int = 6          # target-side adaptation positives
    low_resource_test: int = 4           # target-side held-out positives
    negative_ratio: int = 1
    noise: float = 0.05
    target_shift: float = 1.5            # bias added to target entity vectors
    seed: int = 0

    def __post_init__(self):
        if self.num_entities % self.cluster_size != 0:
            raise DatagenError("num_entities must be a multiple of cluster_size")
        n_clusters = self.num_entities // self.cluster_size
        if self.num_relations > n_clusters * (n_clusters - 1):
            raise DatagenError(
                f"entity pool too small: {n_clusters} clusters support at most "
                f"{n_clusters * (n_clusters - 1)} relations")
        bad = [r for r in self.low_resource_relations
               if not 1 <= r <= self.num_relations]
        if bad:
            raise DatagenError(f"low-resource relations {bad} out of range")
        if self.low_resource_train + self.low_resource_test > self.cluster_size:
            raise DatagenError("low-resource train+test exceeds cluster size")


@dataclass
class KgData:
    source_train: list[TripleInstance]
    target_train: list[TripleInstance]   # unlabeled positives for adaptation
    target_test: list[TripleInstance]    # labeled positives + negatives
    entity_vecs: np.ndarray              # (2 * num_entities, struct_dim)
    relation_vecs: np.ndarray            # (num_relations + 1, struct_dim)
    num_entities_total: int = field(init=False)

    def __post_init__(self):
        self.num_entities_total = self.entity_vecs.shape[0]


def _entity_id(domain: int, idx: int, spec: KgSpec) -> int:
    return domain * spec.num_entities + idx


def gen_kg(spec: KgSpec) -> KgData:
    """Planted bipartite mappings with TransE-like structural vectors.

    Relation r maps cluster a -> cluster b pairing equal within-cluster
    indices, so tail = head + offset (+ noise).  Target entities (fresh ids)
    repeat the cluster geometry under a constant bias; the target domain
    realizes only the low-resource relations.
    """
    rng = Xoshiro256(spec.seed)
    n_clusters = spec.num_entities // spec.cluster_size

    centers = np.array([[rng.gauss() * 2.0 for _ in range(spec.struct_dim)]
                        for _ in range(n_clusters)])
    offsets = np.array([[rng.gauss() * 0.5 for _ in range(spec.struct_dim)]
                        for _ in range(spec.cluster_size)])
    shift = np.array([rng.gauss() for _ in range(spec.struct_dim)])
    shift = spec.target_shift * shift / max(1e-12, float(np.sqrt((shift ** 2).sum())))

    pairs = [(a, b) for a in range(n_clusters) for b in range(n_clusters) if a != b]
    rng.shuffle(pairs)
    rel_pairs = {r: pairs[r - 1] for r in range(1, spec.num_relations + 1)}

    entity_vecs = np.zeros((2 * spec.num_entities, spec.struct_dim))
    for domain in (0, 1):
        for idx in range(spec.num_entities):
            cluster, slot = divmod(idx, spec.cluster_size)
            vec = centers[cluster] + offsets[slot]
            if domain == 1:
                vec = vec + shift
            if spec.noise > 0:
                vec = vec + spec.noise * np.array(
                    [rng.gauss() for _ in range(spec.struct_dim)])
            entity_vecs[_entity_id(domain, idx, spec)] = vec

    relation_vecs = np.zeros((spec.num_relations + 1, spec.struct_dim))
    for r, (a, b) in rel_pairs.items():
        relation_vecs[r] = centers[b] - centers[a]

    def structural(h, r, t):
        return np.concatenate([entity_vecs[h], relation_vecs[r], entity_vecs[t]])

    def positives(domain, r, slots):
        a, b = rel_pairs[r]
        out = []
        for slot in slots:
            h = _entity_id(domain, a * spec.cluster_size + slot, spec)
            t = _entity_id(domain, b * spec.cluster_size + slot, spec)
            out.append(TripleInstance(h, r, t, structural(h, r, t), 1))
        return out

    def corrupt(domain, triple):
        lo = domain * spec.num_entities
        hi = lo + spec.num_entities
        while True:
            if rng.random() < 0.5:
                h, t = rng.randint(lo, hi - 1), triple.tail
            else:
                h, t = triple.head, rng.randint(lo, hi - 1)
            if (h, t) != (triple.head, triple.tail):
                return TripleInstance(h, triple.relation, t,
                                      structural(h, triple.relation, t), 0)

    all_slots = list(range(spec.cluster_size))

    source_train: list[TripleInstance] = []
    for r in range(1, spec.num_relations + 1):
        slots = all_slots[: spec.triples_per_relation]
        pos = positives(0, r, slots)
        source_train.extend(pos)
        for p in pos:
            for _ in range(spec.negative_ratio):
                source_train.append(corrupt(0, p))

    target_train: list[TripleInstance] = []
    target_test: list[TripleInstance] = []
    for r in spec.low_resource_relations:
        slots = all_slots[: spec.low_resource_train + spec.low_resource_test]
        pos = positives(1, r, slots)
        train_pos = pos[: spec.low_resource_train]
        test_pos = pos[spec.low_resource_train:]
        target_train.extend(
            TripleInstance(p.head, p.relation, p.tail, p.structural_input, None)
            for p in train_pos)
        for p in test_pos:
            target_test.append(p)
            for _ in range(spec.negative_ratio):
                target_test.append(corrupt(1, p))

    return KgData(source_train, target_train, target_test,
                  entity_vecs, relation_vecs)


# ---------------------------------------------------------------------------
# serialization


def write_sentences(path, instances: list[SentenceInstance]) -> None:
    with open(path, "w") as fh:
        for s in instances:
            tokens = " ".join(str(int(t)) for t in s.tokens)
            rel = -1 if s.relation is None else s.relation
            fh.write(f"{tokens}\t{s.head_span[0]} {s.head_span[1]}\t"
                     f"{s.tail_span[0]} {s.tail_span[1]}\t{rel}\n")


def read_sentences(path) -> list[SentenceInstance]:
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            try:
                tok_s, head_s, tail_s, rel_s = line.split("\t")
                tokens = np.array([int(t) for t in tok_s.split()], dtype=np.int64)
                h0, h1 = (int(v) for v in head_s.split())
                t0, t1 = (int(v) for v in tail_s.split())
                rel = int(rel_s)
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {raw!r}") from exc
            out.append(SentenceInstance(tokens, (h0, h1), (t0, t1),
                                        None if rel < 0 else rel))
    return out


def write_triples(path, instances: list[TripleInstance]) -> None:
    with open(path, "w") as fh:
        for t in instances:
            label = -1 if t.label is None else t.label
            fh.write(f"{t.head}\t{t.relation}\t{t.tail}\t{label}\n")


def read_triples(path, entity_vecs: np.ndarray | None = None,
                 relation_vecs: np.ndarray | None = None) -> list[TripleInstance]:
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            try:
                h, r, t, label = (int(v) for v in line.split("\t"))
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {raw!r}") from exc
            structural = None
            if entity_vecs is not None and relation_vecs is not None:
                structural = np.concatenate(
                    [entity_vecs[h], relation_vecs[r], entity_vecs[t]])
            out.append(TripleInstance(h, r, t, structural,
                                      None if label < 0 else label))
    return out


def write_vectors(path, vecs: np.ndarray) -> None:
    with open(path, "w") as fh:
        for i, row in enumerate(np.atleast_2d(vecs)):
            fh.write(f"{i} " + " ".join(repr(float(v)) for v in row) + "\n")


def read_vectors(path) -> np.ndarray:
    rows = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                parts = line.split()
                rows[int(parts[0])] = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {raw!r}") from exc
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    out = np.zeros((max(rows) + 1, width))
    for i, vals in rows.items():
        out[i] = vals
    return out


def write_spec(path, sections: dict) -> None:
    """Line-oriented key=value spec echo, e.g. corpus.vocab_size=120."""
    with open(path, "w") as fh:
        for section, mapping in sections.items():
            for key, value in mapping.items():
                if isinstance(value, float):
                    value = repr(value)
                elif isinstance(value, (tuple, list)):
                    value = ",".join(str(v) for v in value)
                fh.write(f"{section}.{key}={value}\n")


def read_spec(path) -> dict:
    out: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line or "." not in line.split("=", 1)[0]:
                raise ParseError(f"{path}: line {lineno}: {raw!r}")
            key, value = line.split("=", 1)
            section, name = key.split(".", 1)
            out.setdefault(section, {})[name] = value
    return out
