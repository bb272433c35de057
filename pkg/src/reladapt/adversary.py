"""Relation discriminators, gradient-reversal wiring and adversarial losses.

A discriminator is two affine layers (hidden width defaults to the input
width) with tanh between and a sigmoid head whose output is clamped to
[1e-7, 1 - 1e-7] so logs stay finite.  The adversarial value

    mean_i w_i * log D(f_i^src) + mean_j log(1 - D(f_j^tgt))

is maximized by the discriminator and minimized by the target extractor.
Training both in a single backward pass works by minimizing the negated
value with a gradient-reversal node between the target extractor and the
discriminator input: the discriminator then ascends the value while the
extractor descends it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

CLAMP_EPS = 1e-7


class AdversaryError(Exception):
    pass


@dataclass
class Discriminator:
    params: dc.ParamStore
    in_width: int
    hidden: int


def init_discriminator(in_width: int, rng: np.random.Generator,
                       hidden: int | None = None) -> Discriminator:
    hidden = in_width if hidden is None else hidden
    store = dc.ParamStore()
    scale = 1.0 / np.sqrt(in_width)
    store.add("w1", rng.uniform(-scale, scale, size=(in_width, hidden)))
    store.add("b1", np.zeros(hidden))
    store.add("w2", rng.uniform(-scale, scale, size=(hidden, 1)))
    store.add("b2", np.zeros(1))
    return Discriminator(store, in_width, hidden)


def discriminate(tape: dc.Tape, disc: Discriminator,
                 features: dc.Tensor) -> dc.Tensor:
    """Per-row probability of being a source sample, clamped to (0, 1)."""
    if features.data.ndim != 2 or features.data.shape[1] != disc.in_width:
        raise AdversaryError(
            f"feature width {features.data.shape} != discriminator input "
            f"{disc.in_width}")
    p = disc.params
    h = dc.tanh(dc.affine(features, p.tensor(tape, "w1"), p.tensor(tape, "b1")))
    logit = dc.affine(h, p.tensor(tape, "w2"), p.tensor(tape, "b2"))
    prob = dc.sigmoid(dc.reshape(logit, (features.data.shape[0],)))
    return dc.clamp(prob, CLAMP_EPS, 1.0 - CLAMP_EPS)


@dataclass
class AdvBatch:
    """Source/target feature tensors plus optional per-source weights."""

    source_features: dc.Tensor
    target_features: dc.Tensor
    source_weights: np.ndarray | dc.Tensor | None = None

    def __post_init__(self):
        if self.source_features.data.shape[0] == 0:
            raise AdversaryError("empty source side")
        if self.target_features.data.shape[0] == 0:
            raise AdversaryError("empty target side")
        if self.source_weights is not None:
            w = (self.source_weights.data
                 if isinstance(self.source_weights, dc.Tensor)
                 else np.asarray(self.source_weights))
            if w.shape != (self.source_features.data.shape[0],):
                raise AdversaryError(
                    f"weights shape {w.shape} does not align with "
                    f"{self.source_features.data.shape[0]} source features")
            if np.any(w < 0):
                raise AdversaryError("source weights must be >= 0")


def adv_loss(tape: dc.Tape, disc: Discriminator, batch: AdvBatch) -> dc.Tensor:
    """The (optionally weighted) adversarial value of one batch.

    Weights default to 1.  The caller decides the optimization direction:
    see :func:`combined_adversarial_loss` for the single-backward wiring.
    """
    d_src = discriminate(tape, disc, batch.source_features)
    d_tgt = discriminate(tape, disc, batch.target_features)
    log_src = dc.log(d_src)
    if batch.source_weights is not None:
        w = batch.source_weights
        if not isinstance(w, dc.Tensor):
            w = dc.constant(tape, np.asarray(w, dtype=np.float64))
        log_src = dc.mul(w, log_src)
    one = dc.constant(tape, 1.0)
    log_tgt = dc.log(dc.sub(one, d_tgt))
    return dc.add(dc.mean(log_src), dc.mean(log_tgt))


def grl_wrap(features: dc.Tensor, lam: float) -> dc.Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    return dc.grl(features, lam)


def combined_adversarial_loss(tape: dc.Tape, disc: Discriminator,
                              source_features: dc.Tensor,
                              target_features: dc.Tensor, lam: float,
                              source_weights=None) -> dc.Tensor:
    """Negated adversarial value with the GRL inserted on the target path.

    Minimizing the returned scalar with one optimizer step makes the
    discriminator ascend the adversarial value while the target extractor
    (everything upstream of ``target_features``) descends it, scaled by
    ``lam``.
    """
    batch = AdvBatch(source_features, grl_wrap(target_features, lam),
                     source_weights)
    return dc.neg(adv_loss(tape, disc, batch))
