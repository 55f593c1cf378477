"""Synthetic interleaved corpus: procedural shape images with template captions.

Each image is a deterministic render of (count, color, shape) attributes and
its paired caption spells out exactly those attributes, so image-caption
alignment has verifiable ground truth. Documents interleave caption/image
pairs with unrelated filler sentences.

Corpus container format (``PWCORP01``), all integers little-endian:

    magic            8 bytes  b"PWCORP01"
    manifest_len     u32
    manifest         UTF-8 JSON: format, seed, spec echo, counts, vocab
    documents        repeated:
        doc_id       u32
        n_segments   u32
        segments     repeated:
            kind     u8   0 = sentence, 1 = image
            sentence: n_tokens u32, then n_tokens * u32 token ids
            image:    image_id u32, paired_segment u32,
                      count u32, color u32, shape u32,
                      ndim u8, ndim * u32 dims, float32 pixel data

A golden corpus file is checked into the test suite to pin the layout.
"""

from __future__ import annotations


import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

MAGIC = b"PWCORP01"
FORMAT = "picoweave-corpus-v1"

PAD_ID = 0
BOS_ID = 1  # sequence-initial marker token
BOI_ID = 2
EOI_ID = 3

COUNT_WORDS = ["one", "two", "three", "four"]
COLOR_WORDS = ["red", "green", "blue", "yellow", "purple", "orange", "teal", "white"]
SHAPE_WORDS = ["square", "circle", "triangle", "diamond", "plus", "cross", "ring", "stripe"]
FILLER_WORDS = [
    "the", "a", "and", "is", "was", "on", "in", "of", "to", "it",
    "sky", "grass", "road", "wind", "rain", "light", "stone", "river", "cloud", "tree",
    "walked", "turned", "stood", "moved", "fell", "rose", "spoke", "waited", "looked", "ran",
    "slowly", "quietly", "often", "never", "again", "far", "near", "here", "there", "today",
]

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.9, 0.0),
    "blue": (0.1, 0.2, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.6, 0.0, 0.8),
    "orange": (1.0, 0.5, 0.0),
    "teal": (0.0, 0.8, 0.8),
    "white": (1.0, 1.0, 1.0),
}


class Vocabulary:
    """Fixed token inventory: 4 specials + attribute words + filler words."""

    def __init__(self):
        self.words = ["<pad>", "</s>", "<BoI>", "<EoI>"]
        self.words += COUNT_WORDS + COLOR_WORDS + SHAPE_WORDS + FILLER_WORDS
        self.index = {w: i for i, w in enumerate(self.words)}
        self.count_base = 4
        self.color_base = self.count_base + len(COUNT_WORDS)
        self.shape_base = self.color_base + len(COLOR_WORDS)
        self.filler_base = self.shape_base + len(SHAPE_WORDS)

    def __len__(self):
        return len(self.words)

    def id_of(self, word: str) -> int:
        return self.index[word]

    def caption_tokens(self, count: int, color: int, shape: int) -> list[int]:
        return [self.count_base + count, self.color_base + color, self.shape_base + shape]

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in ids)


VOCAB = Vocabulary()

N_COUNTS = len(COUNT_WORDS)
N_COLORS = len(COLOR_WORDS)
N_SHAPES = len(SHAPE_WORDS)
N_IMAGE_TYPES = N_COUNTS * N_COLORS * N_SHAPES


@dataclass
class Sentence:
    tokens: list[int]

    def __len__(self):
        return len(self.tokens)


@dataclass
class ImageSegment:
    pixels: np.ndarray  # (C, H, W) float32 in [-1, 1]
    image_id: int
    paired_segment: int  # index of the caption sentence within the document
    count: int
    color: int
    shape: int

    @property
    def attrs(self) -> tuple[int, int, int]:
        return (self.count, self.color, self.shape)

    @property
    def type_index(self) -> int:
        return (self.count * N_COLORS + self.color) * N_SHAPES + self.shape

    def caption_tokens(self) -> list[int]:
        return VOCAB.caption_tokens(self.count, self.color, self.shape)


@dataclass
class Document:
    doc_id: int
    segments: list


@dataclass
class CorpusSpec:
    n_documents: int = 100
    min_images: int = 1
    max_images: int = 6
    distractor_rate: float = 0.3
    image_size: int = 32
    channels: int = 3
    text_only: bool = False

    def __post_init__(self):
        if not 1 <= self.min_images <= self.max_images <= 6:
            raise ValueError("images per document must satisfy 1 <= min <= max <= 6")
        if len(VOCAB) == 0:
            raise ValueError("empty vocabulary")


def _shape_mask(shape_idx: int, s: int) -> np.ndarray:
    """Binary stencil for one shape on an s x s cell."""
    c = (s - 1) / 2.0
    ii, jj = np.mgrid[0:s, 0:s]
    r = np.sqrt((ii - c) ** 2 + (jj - c) ** 2)
    name = SHAPE_WORDS[shape_idx]
    if name == "square":
        m = (np.abs(ii - c) <= s * 0.38) & (np.abs(jj - c) <= s * 0.38)
    elif name == "circle":
        m = r <= s * 0.42
    elif name == "triangle":
        m = (ii >= s * 0.15) & (np.abs(jj - c) <= (ii - s * 0.15) * 0.6)
    elif name == "diamond":
        m = (np.abs(ii - c) + np.abs(jj - c)) <= s * 0.45
    elif name == "plus":
        m = (np.abs(ii - c) <= s * 0.14) | (np.abs(jj - c) <= s * 0.14)
        m &= (np.abs(ii - c) <= s * 0.42) & (np.abs(jj - c) <= s * 0.42)
    elif name == "cross":
        m = (np.abs(ii - jj) <= s * 0.12) | (np.abs(ii + jj - (s - 1)) <= s * 0.12)
    elif name == "ring":
        m = (r <= s * 0.45) & (r >= s * 0.28)
    elif name == "stripe":
        m = np.abs(ii - c) <= s * 0.16
    else:  # pragma: no cover
        raise ValueError(f"unknown shape {shape_idx}")
    return m.astype(np.float32)


_CELL_LAYOUTS = {1: [(0, 0)], 2: [(0, 0), (1, 1)], 3: [(0, 0), (1, 1), (0, 1)], 4: [(0, 0), (0, 1), (1, 0), (1, 1)]}


def render_image(count: int, color: int, shape: int, image_size: int = 32, channels: int = 3) -> np.ndarray:
    """Deterministic (C, H, W) render in [-1, 1]; one image per attribute triple."""
    canvas = np.full((channels, image_size, image_size), 0.1, dtype=np.float32)
    cell = image_size // 2
    stencil = _shape_mask(shape, cell)
    rgb = COLOR_RGB[COLOR_WORDS[color]][:channels]
    for gi, gj in _CELL_LAYOUTS[count + 1]:
        ys, xs = gi * cell, gj * cell
        for ch, val in enumerate(rgb):
            region = canvas[ch, ys : ys + cell, xs : xs + cell]
            canvas[ch, ys : ys + cell, xs : xs + cell] = np.where(stencil > 0, val, region)
    return canvas * 2.0 - 1.0


def attrs_of_type(type_index: int) -> tuple[int, int, int]:
    shape = type_index % N_SHAPES
    rest = type_index // N_SHAPES
    return rest // N_COLORS, rest % N_COLORS, shape


def _distractor(rng) -> Sentence:
    n = int(rng.integers(3, 8))
    toks = VOCAB.filler_base + rng.integers(0, len(FILLER_WORDS), size=n)
    return Sentence(tokens=[int(t) for t in toks])


def generate_corpus(spec: CorpusSpec, seed: int) -> list[Document]:
    """Build documents of caption/image pairs mixed with filler sentences.

    Captions always precede their image within a document; pair-mode
    packing applies its own 50/50 placement flip downstream. Deterministic
    under (spec, seed).
    """
    rng = np.random.default_rng(seed)
    docs = []
    image_id = 0
    for doc_id in range(spec.n_documents):
        segments: list = []
        if spec.text_only:
            for _ in range(int(rng.integers(2, 6))):
                segments.append(_distractor(rng))
            docs.append(Document(doc_id=doc_id, segments=segments))
            continue
        n_images = int(rng.integers(spec.min_images, spec.max_images + 1))
        for _ in range(n_images):
            if rng.random() < spec.distractor_rate:
                segments.append(_distractor(rng))
            count = int(rng.integers(0, N_COUNTS))
            color = int(rng.integers(0, N_COLORS))
            shape = int(rng.integers(0, N_SHAPES))
            caption = Sentence(tokens=VOCAB.caption_tokens(count, color, shape))
            segments.append(caption)
            segments.append(
                ImageSegment(
                    pixels=render_image(count, color, shape, spec.image_size, spec.channels),
                    image_id=image_id,
                    paired_segment=len(segments) - 1,
                    count=count,
                    color=color,
                    shape=shape,
                )
            )
            image_id += 1
        if rng.random() < spec.distractor_rate:
            segments.append(_distractor(rng))
        docs.append(Document(doc_id=doc_id, segments=segments))
    return docs


# -- container io -------------------------------------------------------


class CorpusFormatError(ValueError):
    """Raised when a corpus container fails to parse."""


def _w32(f, v):
    f.write(struct.pack("<I", v))


def _r32(f, what):
    raw = f.read(4)
    if len(raw) != 4:
        raise CorpusFormatError(f"truncated corpus file while reading {what}")
    return struct.unpack("<I", raw)[0]


def write_corpus(docs: list[Document], spec: CorpusSpec, seed: int, path) -> None:
    n_sentences = sum(isinstance(s, Sentence) for d in docs for s in d.segments)
    n_images = sum(isinstance(s, ImageSegment) for d in docs for s in d.segments)
    manifest = {
        "format": FORMAT,
        "seed": seed,
        "spec": asdict(spec),
        "counts": {"documents": len(docs), "images": n_images, "sentences": n_sentences},
        "vocab": VOCAB.words,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        _w32(f, len(blob))
        f.write(blob)
        for doc in docs:
            _w32(f, doc.doc_id)
            _w32(f, len(doc.segments))
            for seg in doc.segments:
                if isinstance(seg, Sentence):
                    f.write(b"\x00")
                    _w32(f, len(seg.tokens))
                    f.write(struct.pack(f"<{len(seg.tokens)}I", *seg.tokens))
                else:
                    f.write(b"\x01")
                    _w32(f, seg.image_id)
                    _w32(f, seg.paired_segment)
                    _w32(f, seg.count)
                    _w32(f, seg.color)
                    _w32(f, seg.shape)
                    arr = np.ascontiguousarray(seg.pixels, dtype="<f4")
                    f.write(struct.pack("<B", arr.ndim))
                    for d in arr.shape:
                        _w32(f, d)
                    f.write(arr.tobytes())


def read_corpus(path) -> tuple[list[Document], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CorpusFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        mlen = _r32(f, "manifest length")
        try:
            manifest = json.loads(f.read(mlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorpusFormatError(f"corrupt manifest: {e}") from e
        if manifest.get("vocab") != VOCAB.words:
            raise CorpusFormatError("corpus vocabulary does not match this build")
        docs = []
        for _ in range(manifest["counts"]["documents"]):
            doc_id = _r32(f, "doc id")
            n_seg = _r32(f, "segment count")
            segments: list = []
            for _ in range(n_seg):
                kind = f.read(1)
                if len(kind) != 1:
                    raise CorpusFormatError("truncated corpus file while reading segment kind")
                if kind == b"\x00":
                    n = _r32(f, "token count")
                    raw = f.read(4 * n)
                    if len(raw) != 4 * n:
                        raise CorpusFormatError("truncated corpus file while reading tokens")
                    segments.append(Sentence(tokens=list(struct.unpack(f"<{n}I", raw))))
                elif kind == b"\x01":
                    image_id = _r32(f, "image id")
                    paired = _r32(f, "paired segment")
                    count, color, shape = (_r32(f, "attr") for _ in range(3))
                    ndim_raw = f.read(1)
                    if len(ndim_raw) != 1:
                        raise CorpusFormatError("truncated corpus file while reading image header")
                    ndim = ndim_raw[0]
                    dims = tuple(_r32(f, "image dim") for _ in range(ndim))
                    nbytes = 4 * int(np.prod(dims))
                    raw = f.read(nbytes)
                    if len(raw) != nbytes:
                        raise CorpusFormatError("truncated corpus file while reading image data")
                    pixels = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
                    segments.append(
                        ImageSegment(pixels=pixels, image_id=image_id, paired_segment=paired,
                                     count=count, color=color, shape=shape)
                    )
                else:
                    raise CorpusFormatError(f"unknown segment kind byte {kind!r}")
            docs.append(Document(doc_id=doc_id, segments=segments))
    return docs, manifest


def corpus_bytes(docs: list[Document], spec: CorpusSpec, seed: int) -> bytes:
    import tempfile, os

    with tempfile.NamedTemporaryFile(delete=False) as f:
        tmp = f.name
    try:
        write_corpus(docs, spec, seed, tmp)
        with open(tmp, "rb") as f:
            return f.read()
    finally:
        os.unlink(tmp)
