"""Self-attention baselines that the sketching coder replaces.

``GlobalSimilarity`` builds one global vector per sequence: local (per-token)
and global (token-mean) variants pass through their own linear/batch-norm
stacks, the global vector scores every local row, and the softmax-weighted sum
of local rows is L2-normalized. ``full_self_attention`` is plain token-token
attention, kept as the quadratic-cost subject for benchmarks.
"""

from __future__ import annotations

import numpy as np

from temde.coder import segment_matrix
from temde.errors import DimensionError, EmptySequenceError
from temde.layers import BatchNorm, Linear, Module
from temde.tensor import (
    DEFAULT_DTYPE,
    Tensor,
    exp,
    l2_normalize,
    matmul,
    reshape,
    softmax,
    sum_,
    transpose,
)


class LinearBNStack(Module):
    """Alternating linear and batch-norm layers, no activation in between."""

    def __init__(self, in_features: int, width: int, depth: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.blocks = []
        for i in range(depth):
            self.blocks.append(Linear(in_features if i == 0 else width, width, rng, dtype))
            self.blocks.append(BatchNorm(width, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.blocks:
            x = layer(x)
        return x


class GlobalSimilarity(Module):
    """Per-modality attention pooling.

    ``global_gamma_init`` sets the scale of the global stack's last batch norm.
    At 0 the global vector starts at zero and attention starts uniform; the
    unscaled ``L . G`` logits otherwise have a spread of about ``sqrt(width)``
    at initialization, saturating the softmax.
    """

    def __init__(self, in_features: int, width: int = 256, depth: int = 2, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE, global_gamma_init: float = 0.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.width = width
        self.local = LinearBNStack(in_features, width, depth, rng, dtype)
        self.glob = LinearBNStack(in_features, width, depth, rng, dtype)
        self.glob.blocks[-1].gamma.data[:] = global_gamma_init

    def __call__(self, tokens: Tensor) -> Tensor:
        """Global representation of a single ``T x E`` sequence.

        The global stack sees a batch of one row here, so this only works in
        eval mode; use :meth:`batch` while training.
        """
        self._check(tokens)
        local = self.local(tokens)
        glob = self.glob(tokens.mean(axis=0, keepdims=True))
        return global_similarity_attention(local, reshape(glob, (-1,)))

    def batch(self, tokens: Tensor, lengths) -> Tensor:
        """Global representations ``B x d`` for concatenated sequences."""
        self._check(tokens)
        seg = segment_matrix(lengths, tokens.dtype)
        if seg.shape[1] != tokens.shape[0]:
            raise DimensionError(f"lengths sum to {seg.shape[1]} but {tokens.shape[0]} tokens were given")
        counts = seg.sum(axis=1, keepdims=True)
        local = self.local(tokens)
        glob = self.glob(Tensor(seg / counts) @ tokens)
        return segment_attention(local, glob, seg)

    def _check(self, tokens: Tensor) -> None:
        if tokens.ndim != 2 or tokens.shape[1] != self.in_features:
            raise DimensionError(f"expected (T, {self.in_features}) tokens, got {tokens.shape}")
        if tokens.shape[0] == 0:
            raise EmptySequenceError("cannot attend over an empty sequence")


def attention_weights(local: Tensor, glob: Tensor) -> Tensor:
    if local.ndim != 2 or glob.ndim != 1 or local.shape[1] != glob.shape[0]:
        raise DimensionError(f"local {local.shape} and global {glob.shape} widths disagree")
    if local.shape[0] == 0:
        raise EmptySequenceError("cannot attend over an empty sequence")
    scores = reshape(matmul(local, reshape(glob, (-1, 1))), (-1,))
    return softmax(scores, axis=0)


def global_similarity_attention(local: Tensor, glob: Tensor) -> Tensor:
    """``l2_normalize(sum_t softmax_t(L_t . G) * L_t)``; no 1/sqrt(d) scaling."""
    w = attention_weights(local, glob)
    pooled = reshape(matmul(reshape(w, (1, -1)), local), (-1,))
    return l2_normalize(pooled, axis=0)


def segment_attention(local: Tensor, glob: Tensor, seg: np.ndarray) -> Tensor:
    """Batched :func:`global_similarity_attention` over concatenated sequences.

    ``seg`` is the ``B x T`` 0/1 ownership matrix. The softmax runs separately
    inside each sequence; the per-sequence max shift is a constant.
    """
    owner = np.argmax(seg, axis=0)
    glob_tok = Tensor(seg.T) @ glob
    scores = sum_(local * glob_tok, axis=1)
    shift = np.full(seg.shape[0], -np.inf, dtype=scores.dtype)
    np.maximum.at(shift, owner, scores.data)
    e = reshape(exp(scores - shift[owner]), (-1, 1))
    seg_t = Tensor(seg)
    pooled = (seg_t @ (e * local)) / (seg_t @ e)
    return l2_normalize(pooled, axis=1)


def global_similarity_vector(img_global: Tensor, txt_global: Tensor) -> Tensor:
    if img_global.shape != txt_global.shape:
        raise DimensionError(f"global widths differ: {img_global.shape} vs {txt_global.shape}")
    return img_global - txt_global


def full_self_attention(x: Tensor) -> Tensor:
    """Token-token attention ``softmax(X X^T) X``; O(T^2 d)."""
    if x.ndim != 2:
        raise DimensionError(f"expected a T x d matrix, got {x.shape}")
    if x.shape[0] == 0:
        raise EmptySequenceError("cannot attend over an empty sequence")
    weights = softmax(matmul(x, transpose(x)), axis=1)
    return matmul(weights, x)
