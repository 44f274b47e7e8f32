"""Two-tower image/text matching model with a swappable global-representation backend."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from temde.attention import GlobalSimilarity
from temde.coder import CombineHead, TemdeCoder, TemdeConfig, aggregate_segments
from temde.errors import ContractError, EmptySequenceError, FormatError, VocabularyError
from temde.layers import Linear, Module
from temde.tensor import DEFAULT_DTYPE, Tensor, max_, no_grad, relu, reshape, square, sum_, take

BACKENDS = ("temde", "attention")
MAGIC = b"TEMD"
VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int = 512
    embed_dim: int = 128
    segment_feat_dim: int = 64
    backend: str = "temde"
    temde: TemdeConfig = field(default_factory=lambda: TemdeConfig(n_divisions=16, n_centroids=8))
    head_dim: int | None = None  # None -> min(256, N*K)
    attn_width: int = 256
    attn_depth: int = 2
    attn_gamma_init: float = 0.0
    margin: float = 0.2

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ContractError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.margin <= 0:
            raise ContractError(f"margin must be positive, got {self.margin}")
        # the coder always consumes tower outputs
        self.temde.input_dim = self.embed_dim
        if self.head_dim is None:
            self.head_dim = min(256, self.temde.sketch_size)

    def to_lines(self) -> list[str]:
        lines = []
        for f in fields(self):
            if f.name == "temde":
                lines += [f"temde.{k}={v}" for k, v in asdict(self.temde).items()]
            else:
                lines.append(f"{f.name}={getattr(self, f.name)}")
        return lines

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> ModelConfig:
        raw = dict(line.split("=", 1) for line in lines if line)
        temde_kw = {}
        for f in fields(TemdeConfig):
            key = f"temde.{f.name}"
            if key in raw:
                temde_kw[f.name] = _coerce(raw.pop(key), f.type)
        kw = {}
        for f in fields(cls):
            if f.name in raw:
                kw[f.name] = _coerce(raw.pop(f.name), f.type)
        if raw:
            raise FormatError(f"unknown config keys: {sorted(raw)}")
        return cls(temde=TemdeConfig(**temde_kw), **kw)


def _coerce(text: str, annotation) -> object:
    kind = str(annotation)
    if "bool" in kind:
        return text == "True"
    if "int" in kind:
        return None if text == "None" else int(text)
    if "float" in kind:
        return float(text)
    return text


class RetrievalModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        e = cfg.embed_dim
        self.embedding = Tensor(rng.normal(0.0, 1.0, (cfg.vocab_size, e)).astype(dtype), requires_grad=True)
        self.image_proj = Linear(cfg.segment_feat_dim, e, rng, dtype)
        if cfg.backend == "temde":
            # one coder per modality
            self.text_backend = TemdeCoder(cfg.temde, rng, dtype)
            self.image_backend = TemdeCoder(cfg.temde, rng, dtype)
            self.combine = CombineHead(cfg.temde.sketch_size, cfg.head_dim, rng, dtype)
            self.scorer = Linear(cfg.head_dim, 1, rng, dtype)
        else:
            self.text_backend = GlobalSimilarity(e, cfg.attn_width, cfg.attn_depth, rng, dtype, cfg.attn_gamma_init)
            self.image_backend = GlobalSimilarity(e, cfg.attn_width, cfg.attn_depth, rng, dtype, cfg.attn_gamma_init)
            self.scorer = Linear(cfg.attn_width, 1, rng, dtype)

    @property
    def dtype(self):
        return self.embedding.dtype

    # -- towers ------------------------------------------------------------

    def _pack_captions(self, captions: Sequence[np.ndarray]) -> tuple[np.ndarray, list[int]]:
        lengths = [len(c) for c in captions]
        if not captions or min(lengths) == 0:
            raise EmptySequenceError("every caption needs at least one token")
        ids = np.concatenate([np.asarray(c, dtype=np.int64) for c in captions])
        bad = (ids < 0) | (ids >= self.cfg.vocab_size)
        if bad.any():
            raise VocabularyError(f"token id {int(ids[bad][0])} outside vocabulary of size {self.cfg.vocab_size}")
        return ids, lengths

    def encode_text(self, captions: Sequence[np.ndarray]) -> Tensor:
        """``B`` captions to ``B x S`` global representations."""
        ids, lengths = self._pack_captions(captions)
        return self._global(self.text_backend, take(self.embedding, ids), lengths)

    def encode_images(self, images: Sequence[np.ndarray]) -> Tensor:
        lengths = [len(s) for s in images]
        if not images or min(lengths) == 0:
            raise EmptySequenceError("every image needs at least one segment")
        feats = Tensor(np.concatenate([np.asarray(s) for s in images]).astype(self.dtype))
        return self._global(self.image_backend, self.image_proj(feats), lengths)

    def _global(self, backend: Module, tokens: Tensor, lengths: list[int]) -> Tensor:
        if self.cfg.backend == "temde":
            return aggregate_segments(backend.encode(tokens), lengths)
        return backend.batch(tokens, lengths)

    # -- similarity --------------------------------------------------------

    def pair_features(self, text: Tensor, image: Tensor) -> Tensor:
        """``Bt x Bi x H`` joint features feeding the scorer."""
        if self.cfg.backend == "temde":
            return self.combine.pairwise(text, image)
        d = text.shape[1]
        diff = reshape(image, (1, image.shape[0], d)) - reshape(text, (text.shape[0], 1, d))
        return square(diff)

    def score_matrix(self, text: Tensor, image: Tensor) -> Tensor:
        """Scores for every (caption, image) pair; rows are captions."""
        feats = self.pair_features(text, image)
        bt, bi, h = feats.shape
        return reshape(self.scorer(reshape(feats, (bt * bi, h))), (bt, bi))

    def similarity(self, captions: Sequence[np.ndarray], images: Sequence[np.ndarray], chunk: int = 64) -> np.ndarray:
        """Eval-mode score matrix for whole galleries, computed in row chunks."""
        prev = self.training
        self.eval()
        try:
            with no_grad():
                text = self.encode_text(captions)
                image = self.encode_images(images)
                rows = [
                    self.score_matrix(text[i:i + chunk], image).data
                    for i in range(0, text.shape[0], chunk)
                ]
        finally:
            self.train(prev)
        return np.concatenate(rows, axis=0)


def score(model: RetrievalModel, caption: np.ndarray, segments: np.ndarray, training: bool = False) -> Tensor:
    """Scalar match score of one caption against one image.

    Eval mode by default; train mode needs at least two tokens and segments for
    the sketch backend and is rejected by the attention backend, whose global
    stack normalizes over a batch of items.
    """
    prev = model.training
    model.train(training)
    try:
        s = model.score_matrix(model.encode_text([caption]), model.encode_images([segments]))
    finally:
        model.train(prev)
    return reshape(s, ())


def triplet_loss(pos_score: Tensor, neg_scores_img: Tensor, neg_scores_txt: Tensor, margin: float = 0.2) -> Tensor:
    """Hinge on the hardest negative in each direction."""
    if margin <= 0:
        raise ContractError(f"margin must be positive, got {margin}")
    total = None
    for neg in (neg_scores_img, neg_scores_txt):
        if neg.size == 0:
            continue
        term = relu(max_(neg) - pos_score + margin)
        total = term if total is None else total + term
    return total if total is not None else pos_score * 0.0


def batch_triplet_loss(scores: Tensor, margin: float = 0.2, hardest: bool = True) -> Tensor:
    """Bidirectional hinge summed over a square batch.

    ``scores[i, j]`` scores caption ``i`` against image ``j``; the diagonal
    holds the matching pairs. ``hardest`` keeps only the worst negative per
    anchor; otherwise every violating negative contributes.
    """
    b = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != b:
        raise ContractError(f"expected a square score matrix, got {scores.shape}")
    if margin <= 0:
        raise ContractError(f"margin must be positive, got {margin}")
    idx = np.arange(b)
    pos = scores[idx, idx]
    off = Tensor((1.0 - np.eye(b)).astype(scores.dtype))
    cost_img = relu(scores - reshape(pos, (b, 1)) + margin) * off
    cost_txt = relu(scores - reshape(pos, (1, b)) + margin) * off
    if not hardest:
        return sum_(cost_img) + sum_(cost_txt)
    return sum_(max_(cost_img, axis=1)) + sum_(max_(cost_txt, axis=0))


# -- persistence --------------------------------------------------------------


def save_model(model: RetrievalModel, path: str | Path) -> None:
    """Write ``TEMD``, u32 version, u32-length-prefixed config, then raw ``<f4`` tensors."""
    config = "\n".join(model.cfg.to_lines()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(config)))
        fh.write(config)
        for _, arr in model.state_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path: str | Path) -> RetrievalModel:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError("file shorter than the model header", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported model version {version}", offset=4)
    end = 12 + cfg_len
    if len(blob) < end:
        raise FormatError("config block truncated", offset=len(blob))
    try:
        cfg = ModelConfig.from_lines(blob[12:end].decode("utf-8").split("\n"))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable config block: {exc}", offset=12) from None
    model = RetrievalModel(cfg, seed=0, dtype=np.float32)
    offset = end
    for name, arr in model.state_arrays():
        nbytes = arr.size * 4
        if offset + nbytes > len(blob):
            raise FormatError(f"tensor {name} truncated", offset=len(blob))
        arr[...] = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=offset).reshape(arr.shape)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes", offset=offset)
    return model


def model_file_size(cfg: ModelConfig) -> int:
    """Expected byte length of a saved model, computed from the config alone."""
    config = "\n".join(cfg.to_lines()).encode("utf-8")
    n = cfg.temde.sketch_size
    e, f, v = cfg.embed_dim, cfg.segment_feat_dim, cfg.vocab_size
    count = v * e + f * e + e
    if cfg.backend == "temde":
        t = cfg.temde
        p = t.projected_size
        coder = t.n_divisions * t.n_centroids * t.inner_dim + e * p + p + 2 * p + 2 * p
        count += 2 * coder + (2 * n * cfg.head_dim + cfg.head_dim) + cfg.head_dim + 1
    else:
        w = cfg.attn_width
        stack = sum((e if i == 0 else w) * w + w + 4 * w for i in range(cfg.attn_depth))
        count += 4 * stack + w + 1
    return 12 + len(config) + 4 * count
