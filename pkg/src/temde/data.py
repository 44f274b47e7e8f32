"""Paired caption/segment datasets: synthetic generation and on-disk formats.

A dataset directory holds::

    vocab.txt       one token per line; the line number is the token id, 0 is <unk>
    captions.tsv    item_id<TAB>token token ...
    segments.fmat   every item's segment features stacked row-wise (FMAT)
    segments.tsv    item_id<TAB>row count, in the same order as the stack
    splits.tsv      item_id<TAB>train|val|test
    latents.tsv     item_id<TAB>latent ids (synthetic data only)

FMAT is ``b"FMAT"``, then little-endian u32 version, rows and cols, then
``rows * cols`` little-endian float32 values in row-major order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from temde.errors import ContractError, FormatError, ParseError

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1
FMAT_HEADER = 16
UNK = "<unk>"
SPLITS = ("train", "val", "test")


@dataclass
class PairedDataset:
    captions: list[np.ndarray]
    segments: list[np.ndarray]
    splits: dict[str, np.ndarray]
    vocab_size: int
    vocab: list[str] | None = None
    latents: list[tuple[int, ...]] | None = None
    item_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.item_ids:
            self.item_ids = list(range(len(self.captions)))
        if len(self.captions) != len(self.segments):
            raise ContractError(f"{len(self.captions)} captions but {len(self.segments)} segment sets")

    def __len__(self) -> int:
        return len(self.captions)

    @property
    def feat_dim(self) -> int:
        return self.segments[0].shape[1]

    def split(self, name: str) -> tuple[list[np.ndarray], list[np.ndarray]]:
        idx = self.splits[name]
        return [self.captions[i] for i in idx], [self.segments[i] for i in idx]


# -- synthetic corpus ----------------------------------------------------------


def generate_synthetic(
    n_items: int = 2560,
    n_latents: int = 16,
    vocab_size: int = 512,
    feat_dim: int = 64,
    seed: int = 0,
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
    caption_len: tuple[int, int] = (4, 12),
    segment_count: tuple[int, int] = (4, 10),
    noise_prob: float = 0.15,
    segment_noise: float = 0.5,
) -> PairedDataset:
    """Paired corpus where caption and image share a hidden set of 2-5 latent factors.

    Each latent owns a contiguous block of the vocabulary and a Gaussian
    prototype in feature space. A caption draws its tokens from the blocks of
    its latents (every latent at least once) plus occasional noise tokens; an
    image draws segments around the prototypes plus occasional pure-noise
    segments. Latent sets are unique across items whenever the number of
    possible sets leaves room, so every caption has exactly one best image.
    """
    block = (vocab_size - 1) // (n_latents + 1)
    if n_latents < 1 or n_items < 1:
        raise ContractError("n_items and n_latents must be positive")
    if n_latents > min(vocab_size, feat_dim) or block < 1:
        raise ContractError(
            f"{n_latents} latents need a vocabulary of at least {n_latents + 2} and feat_dim >= n_latents"
        )
    if caption_len[0] < 1 or segment_count[0] < 1:
        raise ContractError("sequence minimum lengths must be >= 1")
    n_test = round(n_items * test_fraction)
    n_val = round(n_items * val_fraction)
    if n_test + n_val >= n_items:
        raise ContractError("splits leave no training items")

    rng = np.random.default_rng(seed)
    prototypes = rng.normal(0.0, 1.0, (n_latents, feat_dim))
    lo, hi = min(2, n_latents), min(5, n_latents)
    n_sets = sum(math.comb(n_latents, m) for m in range(lo, hi + 1))
    unique = n_sets >= 2 * n_items
    noise_lo = 1 + n_latents * block

    seen: set[tuple[int, ...]] = set()
    captions, segments, latents = [], [], []
    for _ in range(n_items):
        while True:
            m = int(rng.integers(lo, hi + 1))
            lat = tuple(sorted(rng.choice(n_latents, m, replace=False).tolist()))
            if not unique or lat not in seen:
                break
        seen.add(lat)
        latents.append(lat)

        t_c = int(rng.integers(max(caption_len[0], m), max(caption_len[1], m) + 1))
        toks = []
        for j in range(t_c):
            if j >= m and rng.random() < noise_prob:
                toks.append(int(rng.integers(noise_lo, vocab_size)))
                continue
            l = lat[j] if j < m else lat[int(rng.integers(m))]
            toks.append(1 + l * block + int(rng.integers(block)))
        captions.append(rng.permutation(np.asarray(toks, dtype=np.int64)))

        t_i = int(rng.integers(max(segment_count[0], m), max(segment_count[1], m) + 1))
        rows = []
        for j in range(t_i):
            if j >= m and rng.random() < noise_prob:
                rows.append(rng.normal(0.0, 1.0, feat_dim))
                continue
            l = lat[j] if j < m else lat[int(rng.integers(m))]
            rows.append(prototypes[l] + segment_noise * rng.normal(0.0, 1.0, feat_dim))
        segments.append(rng.permutation(np.asarray(rows)).astype(np.float32))

    perm = rng.permutation(n_items)
    splits = {
        "test": np.sort(perm[:n_test]),
        "val": np.sort(perm[n_test:n_test + n_val]),
        "train": np.sort(perm[n_test + n_val:]),
    }
    vocab = [UNK] + [f"w{i}" for i in range(1, vocab_size)]
    return PairedDataset(captions, segments, splits, vocab_size, vocab, latents)


# -- FMAT feature matrices ---------------------------------------------------


def save_features(path: str | Path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 2:
        raise ContractError(f"features must be 2-D, got shape {features.shape}")
    rows, cols = features.shape
    with open(path, "wb") as fh:
        fh.write(FMAT_MAGIC + struct.pack("<III", FMAT_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def load_features(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < FMAT_HEADER:
        raise FormatError("file shorter than the FMAT header", offset=len(blob))
    if blob[:4] != FMAT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    version, rows, cols = struct.unpack_from("<III", blob, 4)
    if version != FMAT_VERSION:
        raise FormatError(f"unsupported FMAT version {version}", offset=4)
    expected = FMAT_HEADER + 4 * rows * cols
    if len(blob) != expected:
        raise FormatError(f"expected {expected} bytes for {rows}x{cols}, found {len(blob)}", offset=min(len(blob), expected))
    data = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=FMAT_HEADER)
    return data.astype(np.float32).reshape(rows, cols)


# -- captions ------------------------------------------------------------------


def load_captions(path: str | Path, vocab: list[str] | None = None) -> tuple[list[int], list[np.ndarray], list[str]]:
    """Parse ``item_id<TAB>tokens`` lines into (item ids, id sequences, vocabulary).

    Without a ``vocab`` the vocabulary is built in first-occurrence order after
    the reserved ``<unk>`` at id 0. With one, unknown tokens map to 0.
    """
    building = vocab is None
    vocab = [UNK] if building else list(vocab)
    index = {tok: i for i, tok in enumerate(vocab)}
    ids, seqs = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ParseError("expected item_id<TAB>tokens", lineno)
            head, text = line.split("\t", 1)
            try:
                item = int(head)
            except ValueError:
                raise ParseError(f"item id {head!r} is not an integer", lineno) from None
            tokens = text.split()
            if not tokens:
                raise ParseError("caption has no tokens", lineno)
            seq = []
            for tok in tokens:
                if tok not in index and building:
                    index[tok] = len(vocab)
                    vocab.append(tok)
                seq.append(index.get(tok, 0))
            ids.append(item)
            seqs.append(np.asarray(seq, dtype=np.int64))
    return ids, seqs, vocab


def save_captions(path: str | Path, item_ids: list[int], captions: list[np.ndarray], vocab: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item, seq in zip(item_ids, captions):
            fh.write(f"{item}\t{' '.join(vocab[int(t)] for t in seq)}\n")


# -- dataset directories -------------------------------------------------------


def save_dataset(ds: PairedDataset, directory: str | Path) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    vocab = ds.vocab or [UNK] + [f"w{i}" for i in range(1, ds.vocab_size)]
    (root / "vocab.txt").write_text("".join(f"{tok}\n" for tok in vocab), encoding="utf-8")
    save_captions(root / "captions.tsv", ds.item_ids, ds.captions, vocab)
    stacked = np.concatenate(ds.segments) if ds.segments else np.zeros((0, 0), np.float32)
    save_features(root / "segments.fmat", stacked)
    (root / "segments.tsv").write_text(
        "".join(f"{i}\t{len(s)}\n" for i, s in zip(ds.item_ids, ds.segments)), encoding="utf-8"
    )
    owner = {}
    for name, idx in ds.splits.items():
        for i in idx:
            owner[int(i)] = name
    (root / "splits.tsv").write_text(
        "".join(f"{ds.item_ids[i]}\t{owner[i]}\n" for i in range(len(ds))), encoding="utf-8"
    )
    if ds.latents is not None:
        (root / "latents.tsv").write_text(
            "".join(f"{i}\t{' '.join(map(str, lat))}\n" for i, lat in zip(ds.item_ids, ds.latents)),
            encoding="utf-8",
        )


def _read_tsv(path: Path) -> list[tuple[int, str]]:
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t", 1)
        if len(parts) != 2:
            raise ParseError(f"expected two tab-separated fields in {path.name}", lineno)
        try:
            out.append((int(parts[0]), parts[1]))
        except ValueError:
            raise ParseError(f"item id {parts[0]!r} is not an integer in {path.name}", lineno) from None
    return out


def load_dataset(directory: str | Path) -> PairedDataset:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    vocab_path = root / "vocab.txt"
    vocab = vocab_path.read_text(encoding="utf-8").splitlines() if vocab_path.exists() else None
    item_ids, captions, vocab = load_captions(root / "captions.tsv", vocab)
    position = {item: i for i, item in enumerate(item_ids)}

    stacked = load_features(root / "segments.fmat")
    counts = _read_tsv(root / "segments.tsv")
    segments: list[np.ndarray | None] = [None] * len(item_ids)
    offset = 0
    for item, count in counts:
        n = int(count)
        segments[position[item]] = stacked[offset:offset + n]
        offset += n
    if offset != stacked.shape[0] or any(s is None for s in segments):
        raise FormatError("segments.tsv does not cover segments.fmat item by item")

    buckets: dict[str, list[int]] = {name: [] for name in SPLITS}
    for item, name in _read_tsv(root / "splits.tsv"):
        buckets.setdefault(name, []).append(position[item])
    splits = {name: np.asarray(sorted(idx), dtype=np.int64) for name, idx in buckets.items()}

    latents = None
    lat_path = root / "latents.tsv"
    if lat_path.exists():
        lat_map = {item: tuple(int(x) for x in text.split()) for item, text in _read_tsv(lat_path)}
        latents = [lat_map[item] for item in item_ids]
    return PairedDataset(captions, segments, splits, len(vocab), vocab, latents, item_ids)
