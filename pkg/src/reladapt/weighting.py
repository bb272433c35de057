"""Relation-level and instance-level importance weights and their fusion.

Relation weights average the frozen source classifier's predicted
distributions over all target instances, so outlier source relations (never
predicted for target data) receive near-zero mass.  Instance weights are
1 - D_a(f) from the frozen auxiliary discriminator: samples it confidently
identifies as source-only are down-weighted.  A sigmoid gate alpha mixes the
two per source instance, and the fused weights are rescaled so their mean is
exactly 1.  Once frozen, a WeightTable rejects further mutation.
"""

from __future__ import annotations

import numpy as np

from . import adversary, diffcore as dc, encoders


class WeightingError(Exception):
    pass


class FrozenTableError(WeightingError):
    pass


class WeightTable:
    """Per-relation weights, per-instance weights, gate value and fused totals."""

    _FIELDS = ("relation_weights", "instance_weights", "alpha", "total_weights")

    def __init__(self):
        self.relation_weights: np.ndarray | None = None
        self.instance_weights: np.ndarray | None = None
        self.alpha: float | None = None
        self.total_weights: np.ndarray | None = None
        self.frozen: bool = False

    def __setattr__(self, name, value):
        if getattr(self, "frozen", False) and name != "frozen":
            raise FrozenTableError(f"weight table is frozen; cannot set {name!r}")
        if getattr(self, "frozen", False) and name == "frozen" and value is not True:
            raise FrozenTableError("cannot unfreeze a weight table")
        super().__setattr__(name, value)

    def freeze(self) -> "WeightTable":
        """Freeze after all three weight fields are populated (idempotent)."""
        if self.frozen:
            return self
        missing = [f for f in self._FIELDS if getattr(self, f) is None]
        if missing:
            raise WeightingError(f"cannot freeze with unpopulated fields: {missing}")
        self.frozen = True
        return self

    # -- line-oriented text artifact: "[section]" headers, "index value" rows
    def dumps(self) -> str:
        if not self.frozen:
            raise WeightingError("serialize only frozen tables")
        lines = []
        for section in ("relation_weights", "instance_weights", "total_weights"):
            lines.append(f"[{section}]")
            for i, v in enumerate(getattr(self, section)):
                lines.append(f"{i} {float(v)!r}")
        lines.append("[alpha]")
        lines.append(f"0 {float(self.alpha)!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "WeightTable":
        table = cls()
        sections: dict[str, list[tuple[int, float]]] = {}
        current = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                sections[current] = []
                continue
            if current is None:
                raise WeightingError(f"line {lineno}: data before any section")
            try:
                idx_str, val_str = line.split()
                sections[current].append((int(idx_str), float(val_str)))
            except ValueError as exc:
                raise WeightingError(f"line {lineno}: {raw!r}") from exc

        def vec(name):
            rows = sorted(sections.get(name, []))
            if [i for i, _ in rows] != list(range(len(rows))):
                raise WeightingError(f"section {name}: indices not contiguous")
            return np.array([v for _, v in rows])

        table.relation_weights = vec("relation_weights")
        table.instance_weights = vec("instance_weights")
        table.total_weights = vec("total_weights")
        alpha_rows = sections.get("alpha", [])
        if len(alpha_rows) != 1:
            raise WeightingError("alpha section must hold exactly one value")
        table.alpha = alpha_rows[0][1]
        return table.freeze()

    @classmethod
    def load(cls, path) -> "WeightTable":
        with open(path) as fh:
            return cls.loads(fh.read())


def relation_weights(cls_params: dc.ParamStore, enc_params: dc.ParamStore,
                     cfg: encoders.EncoderConfig, target_batch) -> np.ndarray:
    """Mean predicted class distribution of the source model over target data.

    Each prediction is a softmax row, so the average sums to 1 and outlier
    relations that attract no target probability mass end up near zero.
    """
    if len(target_batch) == 0:
        raise WeightingError("relation weights need a non-empty target set")
    tape = dc.Tape()
    feats = encoders.encode(tape, enc_params, cfg, target_batch, train=False)
    probs = encoders.classify(tape, cls_params, feats)
    return probs.data.mean(axis=0)


def instance_weights(aux_disc: adversary.Discriminator,
                     source_features: np.ndarray) -> np.ndarray:
    """w_i = 1 - D_a(f_i); in (0, 1) thanks to the discriminator's clamping."""
    tape = dc.Tape()
    d = adversary.discriminate(tape, aux_disc,
                               dc.constant(tape, np.asarray(source_features)))
    return 1.0 - d.data


def init_gate_params(feature_width: int, rng: np.random.Generator | None = None
                     ) -> dc.ParamStore:
    """Gate weight vector, zero-initialized so the starting alpha is 0.5."""
    store = dc.ParamStore()
    store.add("w", np.zeros(feature_width))
    return store


def gate_alpha(gate_params: dc.ParamStore,
               target_features: np.ndarray) -> float:
    """alpha = sigmoid(W_r . mean(target features)), a single scalar."""
    feats = np.asarray(target_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise WeightingError("gate needs at least one target feature row")
    z = float(np.dot(gate_params.value("w"), feats.mean(axis=0)))
    return float(1.0 / (1.0 + np.exp(-z)))


def gate_alpha_per_relation(gate_params: dc.ParamStore,
                            target_features: np.ndarray,
                            pseudo_labels: np.ndarray,
                            num_classes: int) -> np.ndarray:
    """Per-relation gate readout for case-study style reporting.

    alpha_r is the gate applied to the mean target feature among instances
    pseudo-labeled r; relations with no pseudo-labeled instances get nan.
    """
    feats = np.asarray(target_features, dtype=np.float64)
    labels = np.asarray(pseudo_labels)
    out = np.full(num_classes, np.nan)
    for r in range(num_classes):
        rows = feats[labels == r]
        if len(rows):
            out[r] = gate_alpha(gate_params, rows)
    return out


def total_weights(alpha: float, inst_weights: np.ndarray,
                  rel_weights: np.ndarray,
                  source_labels: np.ndarray) -> np.ndarray:
    """Fuse instance and relation weights and normalize to mean exactly 1.

    raw_i = alpha * w_i^instance + (1 - alpha) * w_{y_i}^relation,
    total_i = n * raw_i / sum(raw).
    """
    inst = np.asarray(inst_weights, dtype=np.float64)
    rel = np.asarray(rel_weights, dtype=np.float64)
    labels = np.asarray(source_labels)
    if labels.min() < 0 or labels.max() >= len(rel):
        raise WeightingError(
            f"labels must index relation weights of length {len(rel)}")
    if inst.shape != labels.shape:
        raise WeightingError("instance weights must align with labels")
    raw = alpha * inst + (1.0 - alpha) * rel[labels]
    total = raw.sum()
    if total <= 0.0:
        raise WeightingError("degenerate all-zero importance weights")
    return len(raw) * raw / total


def freeze(table: WeightTable) -> WeightTable:
    return table.freeze()
