"""Packing documents into fixed-length interleaved training sequences.

Three strategies:

* ``pack_pair_random`` — one (image, caption) pair per sequence, image
  placed before or after its caption with probability 0.5 each.
* ``pack_document`` — one document per sequence; keeps at most
  ``max_images`` images (sampled without replacement, order preserved),
  truncates whole trailing segments past ``max_len``, pads to ``max_len``.
* ``pack_stream_window`` — documents concatenated into a token stream cut
  into consecutive fixed-size windows; an image span that would straddle
  a window boundary is deferred intact to the next window and the vacated
  room is padded.

Every sequence starts with the sequence-initial marker at position 0;
the length budget counts every position (marker, text, specials, image
patches). An image occupies an atomic span of ``patch_tokens + 2``
positions: ``<BoI>``, the patch slots, ``<EoI>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from picoweave.corpus import BOI_ID, BOS_ID, EOI_ID, PAD_ID, Document, ImageSegment, Sentence

KIND_PAD = 0
KIND_TEXT = 1  # text tokens and specials
KIND_PATCH = 2


class PackingError(ValueError):
    pass


@dataclass
class PackedImage:
    pixels: np.ndarray
    image_id: int
    doc_id: int
    boi_pos: int  # position of <BoI> within the sequence
    patch_start: int  # first patch position (= boi_pos + 1)
    attrs: tuple[int, int, int]
    caption_tokens: tuple[int, ...]


@dataclass
class InterleavedSequence:
    ids: np.ndarray  # (L,) int64; PAD_ID at patch and pad positions
    kind: np.ndarray  # (L,) int8
    images: list[PackedImage]
    length: int  # number of real positions, including the leading marker

    @property
    def image_positions(self) -> np.ndarray:
        """Index set over patch positions (1..N)."""
        return np.flatnonzero(self.kind == KIND_PATCH)

    @property
    def text_positions(self) -> np.ndarray:
        """Index set over text/special positions in 1..N (marker excluded)."""
        pos = np.flatnonzero(self.kind == KIND_TEXT)
        return pos[pos > 0]


class _SeqBuilder:
    def __init__(self, capacity: int, patch_tokens: int):
        self.capacity = capacity
        self.patch_tokens = patch_tokens
        self.ids = [BOS_ID]
        self.kind = [KIND_TEXT]
        self.images: list[PackedImage] = []

    @property
    def pos(self) -> int:
        return len(self.ids)

    def room(self) -> int:
        return self.capacity - self.pos

    def add_tokens(self, tokens) -> None:
        self.ids.extend(int(t) for t in tokens)
        self.kind.extend([KIND_TEXT] * len(tokens))

    def add_image(self, seg: ImageSegment, doc_id: int) -> None:
        boi = self.pos
        self.ids.append(BOI_ID)
        self.kind.append(KIND_TEXT)
        self.ids.extend([PAD_ID] * self.patch_tokens)
        self.kind.extend([KIND_PATCH] * self.patch_tokens)
        self.ids.append(EOI_ID)
        self.kind.append(KIND_TEXT)
        self.images.append(
            PackedImage(
                pixels=seg.pixels,
                image_id=seg.image_id,
                doc_id=doc_id,
                boi_pos=boi,
                patch_start=boi + 1,
                attrs=seg.attrs,
                caption_tokens=tuple(seg.caption_tokens()),
            )
        )

    def finish(self, pad_to: int | None = None) -> InterleavedSequence:
        length = self.pos
        total = max(length, pad_to or 0)
        ids = np.full(total, PAD_ID, dtype=np.int64)
        kind = np.full(total, KIND_PAD, dtype=np.int8)
        ids[:length] = self.ids
        kind[:length] = self.kind
        return InterleavedSequence(ids=ids, kind=kind, images=self.images, length=length)


def image_span(patch_tokens: int) -> int:
    return patch_tokens + 2


def pack_pair_random(pairs, patch_tokens: int, seed: int, max_len: int | None = None) -> list[InterleavedSequence]:
    """One sequence per (image, caption) pair; image first with p=0.5."""
    rng = np.random.default_rng(seed)
    span = image_span(patch_tokens)
    out = []
    for image_seg, caption in pairs:
        if max_len is not None and 1 + span > max_len:
            raise PackingError(f"image span {span} does not fit in max_len {max_len}")
        b = _SeqBuilder(max_len if max_len is not None else 1 << 30, patch_tokens)
        image_first = rng.random() < 0.5
        tokens = list(caption.tokens)
        if max_len is not None and len(tokens) > max_len - 1 - span:
            tokens = []  # overflow drops the whole caption, never part of the image
        if image_first:
            b.add_image(image_seg, doc_id=-1)
            b.add_tokens(tokens)
        else:
            b.add_tokens(tokens)
            b.add_image(image_seg, doc_id=-1)
        out.append(b.finish(pad_to=max_len))
    return out


def _segment_length(seg, patch_tokens: int) -> int:
    return image_span(patch_tokens) if isinstance(seg, ImageSegment) else len(seg)


def pack_document(doc: Document, patch_tokens: int, max_len: int = 2048,
                  max_images: int = 6, seed: int = 0) -> InterleavedSequence:
    """One padded sequence per document; whole-segment truncation only."""
    if not doc.segments:
        raise PackingError(f"document {doc.doc_id} is empty")
    for seg in doc.segments:
        if _segment_length(seg, patch_tokens) > max_len - 1:
            raise PackingError(
                f"document {doc.doc_id}: a single segment of length "
                f"{_segment_length(seg, patch_tokens)} exceeds max_len {max_len}"
            )
    image_indices = [i for i, s in enumerate(doc.segments) if isinstance(s, ImageSegment)]
    keep = set(image_indices)
    if len(image_indices) > max_images:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(image_indices), size=max_images, replace=False)
        keep = {image_indices[i] for i in sorted(chosen)}

    b = _SeqBuilder(max_len, patch_tokens)
    for i, seg in enumerate(doc.segments):
        if isinstance(seg, ImageSegment):
            if i not in keep:
                continue
            if b.room() < image_span(patch_tokens):
                break  # surplus truncated; the whole image span is dropped
            b.add_image(seg, doc_id=doc.doc_id)
        else:
            if b.room() < len(seg):
                break  # never split a sentence
            b.add_tokens(seg.tokens)
    return b.finish(pad_to=max_len)


def pack_stream_window(docs, patch_tokens: int, window: int = 2048) -> list[InterleavedSequence]:
    """Concatenate documents and emit fixed-length windows.

    Sentences may split across windows; an image span never does — it is
    deferred to the next window whole, and the shortfall is padded.
    """
    span = image_span(patch_tokens)
    if span > window - 1:
        raise PackingError(f"image span {span} longer than window {window}")

    out = []
    b = _SeqBuilder(window, patch_tokens)

    def flush():
        nonlocal b
        if b.pos > 1 or b.images:
            out.append(b.finish(pad_to=window))
        b = _SeqBuilder(window, patch_tokens)

    for doc in docs:
        for seg in doc.segments:
            if isinstance(seg, ImageSegment):
                if b.room() < span:
                    flush()
                b.add_image(seg, doc_id=doc.doc_id)
            else:
                tokens = list(seg.tokens)
                while tokens:
                    if b.room() == 0:
                        flush()
                    n = min(b.room(), len(tokens))
                    b.add_tokens(tokens[:n])
                    tokens = tokens[n:]
    flush()
    return out


@dataclass
class BatchedSequence:
    """Collated, padded batch with masks and image bookkeeping."""

    ids: np.ndarray  # (B, L) int64
    kind: np.ndarray  # (B, L) int8
    real_mask: np.ndarray  # (B, L) bool, True at non-pad positions
    gen_target_mask: np.ndarray  # (B, L) bool, True where the token is a generation target
    attend_mask: np.ndarray  # (B, L, L) bool, True where query i may attend key j
    images: list[PackedImage]  # canonical order: row-major, position order
    image_rows: np.ndarray  # (n_images,) row of each image
    boi_positions: np.ndarray  # (n_images,) <BoI> position of each image
    patch_starts: np.ndarray  # (n_images,)
    image_counts: np.ndarray  # (B,)
    lengths: np.ndarray  # (B,)
    patch_tokens: int

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]

    def image_pixels(self) -> np.ndarray:
        return np.stack([im.pixels for im in self.images]) if self.images else np.zeros((0,))


def collate_batch(seqs: list[InterleavedSequence], patch_tokens: int,
                  gen_specials: bool = True, max_seq_len: int | None = None) -> BatchedSequence:
    if not seqs:
        raise PackingError("collate: empty batch")
    # common width is the longest real length; shared trailing padding is dropped
    lmax = max(s.length for s in seqs)
    if max_seq_len is not None and lmax > max_seq_len:
        raise PackingError(f"collate: sequence length {lmax} exceeds max_seq_len {max_seq_len}")
    bsz = len(seqs)
    ids = np.full((bsz, lmax), PAD_ID, dtype=np.int64)
    kind = np.full((bsz, lmax), KIND_PAD, dtype=np.int8)
    lengths = np.zeros(bsz, dtype=np.int64)
    images: list[PackedImage] = []
    image_rows, boi_positions, patch_starts, image_counts = [], [], [], []
    for r, s in enumerate(seqs):
        ids[r, : s.length] = s.ids[: s.length]
        kind[r, : s.length] = s.kind[: s.length]
        lengths[r] = s.length
        image_counts.append(len(s.images))
        for im in s.images:
            if s.kind[im.boi_pos] != KIND_TEXT or s.ids[im.boi_pos] != BOI_ID:
                raise PackingError(f"row {r}: image {im.image_id} has no <BoI> record at {im.boi_pos}")
            images.append(im)
            image_rows.append(r)
            boi_positions.append(im.boi_pos)
            patch_starts.append(im.patch_start)

    real = kind != KIND_PAD
    gen = kind == KIND_TEXT
    gen[:, 0] = False  # the leading marker has no predecessor to predict it
    if not gen_specials:
        gen &= ~np.isin(ids, (BOI_ID, EOI_ID, BOS_ID))

    causal = np.tril(np.ones((lmax, lmax), dtype=bool))
    attend = causal[None, :, :] & real[:, None, :]

    return BatchedSequence(
        ids=ids,
        kind=kind,
        real_mask=real,
        gen_target_mask=gen,
        attend_mask=attend,
        images=images,
        image_rows=np.asarray(image_rows, dtype=np.int64),
        boi_positions=np.asarray(boi_positions, dtype=np.int64),
        patch_starts=np.asarray(patch_starts, dtype=np.int64),
        image_counts=np.asarray(image_counts, dtype=np.int64),
        lengths=lengths,
        patch_tokens=patch_tokens,
    )


# -- packed-sequence container io ----------------------------------------

PACK_MAGIC = b"PWPACK01"


def write_packed(seqs: list[InterleavedSequence], path, mode: str, patch_tokens: int) -> None:
    """Packed-sequence container: manifest JSON, then per-sequence records.

    Record layout (little-endian): length u32, padded u32, ids padded*u32,
    kind padded*u8, n_images u32, then per image: image_id u32, doc_id i32,
    boi u32, patch_start u32, attrs 3*u32, n_caption u32 + tokens u32[],
    ndim u8 + dims u32[] + float32 pixels.
    """
    manifest = {"format": "picoweave-pack-v1", "mode": mode,
                "patch_tokens": patch_tokens, "sequences": len(seqs)}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PACK_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for s in seqs:
            f.write(struct.pack("<II", s.length, len(s.ids)))
            f.write(s.ids.astype("<u4").tobytes())
            f.write(s.kind.astype("<u1").tobytes())
            f.write(struct.pack("<I", len(s.images)))
            for im in s.images:
                f.write(struct.pack("<IiII", im.image_id, im.doc_id, im.boi_pos, im.patch_start))
                f.write(struct.pack("<III", *im.attrs))
                f.write(struct.pack("<I", len(im.caption_tokens)))
                f.write(struct.pack(f"<{len(im.caption_tokens)}I", *im.caption_tokens))
                arr = np.ascontiguousarray(im.pixels, dtype="<f4")
                f.write(struct.pack("<B", arr.ndim))
                for d in arr.shape:
                    f.write(struct.pack("<I", d))
                f.write(arr.tobytes())


def read_packed(path) -> tuple[list[InterleavedSequence], dict]:
    def need(f, n, what):
        raw = f.read(n)
        if len(raw) != n:
            raise PackingError(f"truncated pack file while reading {what}")
        return raw

    with open(path, "rb") as f:
        if f.read(len(PACK_MAGIC)) != PACK_MAGIC:
            raise PackingError("bad pack-file magic")
        (mlen,) = struct.unpack("<I", need(f, 4, "manifest length"))
        manifest = json.loads(need(f, mlen, "manifest").decode("utf-8"))
        seqs = []
        for _ in range(manifest["sequences"]):
            length, padded = struct.unpack("<II", need(f, 8, "sequence header"))
            ids = np.frombuffer(need(f, 4 * padded, "ids"), dtype="<u4").astype(np.int64)
            kind = np.frombuffer(need(f, padded, "kinds"), dtype="<u1").astype(np.int8)
            (n_img,) = struct.unpack("<I", need(f, 4, "image count"))
            images = []
            for _ in range(n_img):
                image_id, doc_id, boi, pstart = struct.unpack("<IiII", need(f, 16, "image header"))
                attrs = struct.unpack("<III", need(f, 12, "image attrs"))
                (ncap,) = struct.unpack("<I", need(f, 4, "caption length"))
                cap = struct.unpack(f"<{ncap}I", need(f, 4 * ncap, "caption tokens"))
                ndim = need(f, 1, "image ndim")[0]
                dims = struct.unpack(f"<{ndim}I", need(f, 4 * ndim, "image dims"))
                nbytes = 4 * int(np.prod(dims))
                pixels = np.frombuffer(need(f, nbytes, "image pixels"), dtype="<f4").reshape(dims).copy()
                images.append(PackedImage(pixels=pixels, image_id=image_id, doc_id=doc_id,
                                          boi_pos=boi, patch_start=pstart,
                                          attrs=tuple(attrs), caption_tokens=tuple(cap)))
            seqs.append(InterleavedSequence(ids=ids, kind=kind, images=images, length=length))
    return seqs, manifest
