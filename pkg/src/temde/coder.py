"""Trainable sketching coder.

A coder maps a variable-length sequence of token (or image segment) embeddings
to soft assignment histograms over ``N`` independent partitionings of a learned
``D``-dimensional space, each partitioning having ``K`` trainable centroids.
Per-token sketches are ``N x K`` rows of probabilities; a whole sequence is
summarized by summing them, so the global representation has a fixed size
no matter how many tokens went in and costs O(T) to build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from temde.errors import ContractError, DimensionError, EmptySequenceError
from temde.layers import BatchNorm, Linear, Module
from temde.tensor import DEFAULT_DTYPE, Tensor, concat, no_grad, relu, reshape, softmax, square, sum_

DISTANCE_SIGNS = ("negative", "literal")


@dataclass
class TemdeConfig:
    """Shape of one coder.

    ``distance_sign="negative"`` feeds ``-distance`` to the softmax so the
    nearest centroid gets the most mass; ``"literal"`` feeds the raw squared
    distance. ``broadcast_projection`` projects each token to ``N x D`` and
    shares that point across the K centroids of a division instead of
    emitting a separate point per (division, centroid) pair.
    """

    n_divisions: int = 20
    n_centroids: int = 8
    inner_dim: int = 8
    input_dim: int = 256
    distance_sign: str = "negative"
    broadcast_projection: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_divisions", "n_centroids", "inner_dim", "input_dim"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.distance_sign not in DISTANCE_SIGNS:
            raise ContractError(f"distance_sign must be one of {DISTANCE_SIGNS}, got {self.distance_sign!r}")

    @property
    def sketch_size(self) -> int:
        return self.n_divisions * self.n_centroids

    @property
    def projected_size(self) -> int:
        k = 1 if self.broadcast_projection else self.n_centroids
        return self.n_divisions * k * self.inner_dim


class TemdeCoder(Module):
    def __init__(self, cfg: TemdeConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        n, k, d = cfg.n_divisions, cfg.n_centroids, cfg.inner_dim
        self.centroids = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(d), (n, k, d)).astype(dtype), requires_grad=True
        )
        self.projection = Linear(cfg.input_dim, cfg.projected_size, rng, dtype)
        self.bnorm = BatchNorm(cfg.projected_size, cfg.bn_momentum, cfg.bn_eps, dtype)

    def encode(self, tokens: Tensor) -> Tensor:
        """Per-token sketches, ``T x E -> T x N x K``.

        Each of the N rows of every token is a softmax over the K centroids.
        Batch-norm statistics are taken over all T rows, so a caller encoding
        several sequences at once should stack them into one matrix.
        """
        cfg = self.cfg
        if tokens.ndim != 2 or tokens.shape[1] != cfg.input_dim:
            raise DimensionError(f"expected tokens of shape (T, {cfg.input_dim}), got {tokens.shape}")
        t = tokens.shape[0]
        if t == 0:
            raise EmptySequenceError("cannot encode an empty sequence")
        x = self.bnorm(self.projection(tokens))
        k = 1 if cfg.broadcast_projection else cfg.n_centroids
        x = reshape(x, (t, cfg.n_divisions, k, cfg.inner_dim))
        dist = sum_(square(x - self.centroids), axis=3)
        logits = -dist if cfg.distance_sign == "negative" else dist
        return softmax(logits, axis=2)


def encode_tokens(coder: TemdeCoder, tokens: Tensor, training: bool | None = None) -> Tensor:
    """Run ``coder.encode`` in an explicit mode, restoring the previous one."""
    if training is None:
        return coder.encode(tokens)
    prev = coder.training
    coder.train(training)
    try:
        return coder.encode(tokens)
    finally:
        coder.train(prev)


def aggregate(per_token: Tensor) -> Tensor:
    """Sum ``T x N x K`` token sketches into one ``N x K`` sketch."""
    if per_token.ndim != 3:
        raise DimensionError(f"expected a T x N x K stack, got {per_token.shape}")
    if per_token.shape[0] == 0:
        raise EmptySequenceError("cannot aggregate an empty sequence")
    return sum_(per_token, axis=0)


def segment_matrix(lengths, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """0/1 matrix of shape ``B x sum(lengths)`` selecting each sequence's rows."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size == 0 or np.any(lengths < 1):
        raise EmptySequenceError(f"every sequence needs at least one element, got lengths {lengths.tolist()}")
    owner = np.repeat(np.arange(lengths.size), lengths)
    m = np.zeros((lengths.size, owner.size), dtype=dtype)
    m[owner, np.arange(owner.size)] = 1.0
    return m


def aggregate_segments(per_token: Tensor, lengths) -> Tensor:
    """Aggregate a stack of concatenated sequences into ``B x (N*K)`` sketches."""
    t = per_token.shape[0]
    if sum(int(n) for n in lengths) != t:
        raise DimensionError(f"lengths sum to {sum(lengths)} but {t} token sketches were given")
    flat = reshape(per_token, (t, -1))
    return Tensor(segment_matrix(lengths, per_token.dtype)) @ flat


class CombineHead(Module):
    """``relu(W [text; image] + b)``: concatenation mapped down to ``H`` features."""

    def __init__(self, sketch_size: int, hidden: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        if not 1 <= hidden < 2 * sketch_size:
            raise ContractError(f"hidden size must be in [1, {2 * sketch_size}), got {hidden}")
        self.sketch_size = sketch_size
        self.linear = Linear(2 * sketch_size, hidden, rng, dtype)

    def __call__(self, text_sketch: Tensor, image_sketch: Tensor) -> Tensor:
        return combine_modalities(text_sketch, image_sketch, self.linear.weight, self.linear.bias)

    def pairwise(self, text: Tensor, image: Tensor) -> Tensor:
        """All pairs at once: ``Bt x S`` and ``Bi x S`` give ``Bt x Bi x H``.

        The concatenated linear map splits into a text half and an image half,
        so each side is projected once and the halves are broadcast-added.
        """
        s = self.sketch_size
        if text.ndim != 2 or image.ndim != 2 or text.shape[1] != s or image.shape[1] != s:
            raise DimensionError(f"pairwise: expected (*, {s}) sketches, got {text.shape} and {image.shape}")
        w = self.linear.weight
        a = text @ w[:s]
        b = image @ w[s:]
        h = w.shape[1]
        return relu(reshape(a, (text.shape[0], 1, h)) + reshape(b, (1, image.shape[0], h)) + self.linear.bias)


def combine_modalities(text_sketch: Tensor, image_sketch: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if text_sketch.shape != image_sketch.shape:
        raise DimensionError(f"sketch shapes differ: {text_sketch.shape} vs {image_sketch.shape}")
    joint = concat([text_sketch, image_sketch], axis=-1)
    if joint.shape[-1] != weight.shape[0]:
        raise DimensionError(f"head expects {weight.shape[0]} inputs, got {joint.shape[-1]}")
    if joint.ndim == 1:
        return relu(reshape(reshape(joint, (1, -1)) @ weight, (-1,)) + bias)
    return relu(joint @ weight + bias)


def sketch_dump(coder: TemdeCoder, tokens: Tensor) -> str:
    cfg = coder.cfg
    with no_grad():
        probs = encode_tokens(coder, tokens, training=False).data
    lines = [f"# temde-sketch N={cfg.n_divisions} K={cfg.n_centroids}"]
    for t in range(probs.shape[0]):
        for n in range(cfg.n_divisions):
            row = "\t".join(f"{p:.6f}" for p in probs[t, n])
            lines.append(f"{t}\t{n}\t{row}")
    return "\n".join(lines) + "\n"
