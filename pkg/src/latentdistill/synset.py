"""The distilled set: per-class latents (or pixels), labels and step size.

Space tags: ``pixel`` stores images directly; ``wplus`` stores per-block
style codes over the generator's fixed input constant; ``f<n>`` stores the
activation entering block ``n`` plus the style codes of blocks ``n..B-1``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .binfmt import FormatError, Reader, Writer, native_f8, read_bytes, write_bytes
from .generator import GenLatent, Generator

MAGIC = b"GLADSYNS"
NO_GENERATOR = bytes(32)


def parse_space(space: str, blocks: int | None = None):
    """Return ``None`` for pixel space or the generator cut for a latent space."""
    if space == "pixel":
        return None
    if space == "wplus":
        return 0
    m = re.fullmatch(r"f(\d+)", space)
    if not m:
        raise ValueError(f"unknown space {space!r}; expected pixel, wplus or f<n>")
    cut = int(m.group(1))
    if blocks is not None and cut > blocks:
        raise ValueError(f"space {space!r}: cut exceeds the generator's {blocks} blocks")
    return cut


def all_spaces(blocks: int) -> list:
    return ["pixel", "wplus"] + [f"f{n}" for n in range(blocks + 1)]


@dataclass
class SynSet:
    space: str
    ipc: int
    classes: int
    features: np.ndarray  # (K, C, H, W): pixels, or the block-input activation
    styles: np.ndarray  # (K, S, w_dim); S == 0 in pixel space
    alpha: float = 0.01
    gen_hash: bytes = NO_GENERATOR
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        parse_space(self.space)
        if self.ipc < 1 or self.classes < 1:
            raise ValueError("SynSet: ipc and classes must be >= 1")
        k = self.ipc * self.classes
        if self.labels is None:
            self.labels = np.repeat(np.arange(self.classes), self.ipc)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.features.shape[0] != k or self.styles.shape[0] != k or self.labels.shape != (k,):
            raise ValueError(f"SynSet: expected {k} latents ({self.classes} classes x {self.ipc})")
        if np.any(np.bincount(self.labels, minlength=self.classes) != self.ipc):
            raise ValueError("SynSet: every class needs exactly ipc entries")
        if not self.alpha > 0:
            raise ValueError("SynSet: alpha must be > 0")
        if len(self.gen_hash) != 32:
            raise ValueError("SynSet: generator hash must be 32 bytes")
        if self.space == "pixel" and self.styles.size:
            raise ValueError("SynSet: pixel space carries no style codes")

    @property
    def cut(self):
        return parse_space(self.space)

    def __len__(self):
        return self.labels.shape[0]

    def copy(self, **changes) -> "SynSet":
        base = dict(features=self.features.copy(), styles=self.styles.copy(), labels=self.labels.copy())
        base.update(changes)
        return replace(self, **base)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def latents(self, c: int) -> list:
        if self.space == "pixel":
            return [self.features[i] for i in self.class_indices(c)]
        return [GenLatent(self.cut, self.features[i], self.styles[i]) for i in self.class_indices(c)]

    def num_scalars(self) -> int:
        """Optimized scalars (the fixed input constant in wplus space excluded)."""
        n = self.styles.size
        if self.space != "wplus":
            n += self.features.size
        return int(n)

    def render(self, generator: Generator | None = None, batch: int | None = None) -> np.ndarray:
        """Images for every entry, evaluated untracked in generator batches."""
        if self.space == "pixel":
            return self.features.copy()
        if generator is None:
            raise ValueError(f"SynSet in space {self.space!r} needs a generator to render")
        if generator.digest() != self.gen_hash:
            raise ValueError("SynSet was distilled with a different generator")
        k = len(self)
        step = batch or k
        out = []
        with T.no_grad():
            for i in range(0, k, step):
                out.append(generator.synthesize(self.cut, self.features[i:i + step], self.styles[i:i + step]).data)
        return np.concatenate(out)

    def __eq__(self, other):
        return (
            isinstance(other, SynSet)
            and self.space == other.space
            and self.ipc == other.ipc
            and self.classes == other.classes
            and self.alpha == other.alpha
            and self.gen_hash == other.gen_hash
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and self.styles.shape == other.styles.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.styles, other.styles)
        )


def to_bytes(s: SynSet) -> bytes:
    """GLADSYNS: header (space, ipc, classes, generator hash, alpha, count),
    then per entry a u32 label and shape-prefixed f8 feature and style blocks."""
    w = Writer(MAGIC)
    w.text(s.space)
    w.u32(s.ipc)
    w.u32(s.classes)
    w.raw(s.gen_hash)
    w.f64(s.alpha)
    w.u32(len(s))
    for i in range(len(s)):
        w.u32(s.labels[i])
        w.shaped(s.features[i])
        w.shaped(s.styles[i])
    return w.getvalue()


def from_bytes(data: bytes) -> SynSet:
    r = Reader(data, MAGIC)
    space = r.text()
    ipc, classes = r.u32(), r.u32()
    gen_hash = r.raw(32)
    alpha = r.f64()
    k = r.u32()
    if k != ipc * classes:
        raise FormatError(f"GLADSYNS: {k} entries for ipc {ipc} x {classes} classes")
    labels, feats, styles = [], [], []
    for _ in range(k):
        labels.append(r.u32())
        feats.append(native_f8(r.shaped()))
        styles.append(native_f8(r.shaped()))
    r.finish()
    if len({f.shape for f in feats}) > 1 or len({s.shape for s in styles}) > 1:
        raise FormatError("GLADSYNS: entries have inconsistent shapes")
    try:
        return SynSet(space, ipc, classes, np.stack(feats), np.stack(styles), alpha, gen_hash, np.array(labels))
    except ValueError as e:
        raise FormatError(f"GLADSYNS: {e}") from None


def save_synset(s: SynSet, path):
    write_bytes(path, to_bytes(s))


def load_synset(path) -> SynSet:
    return from_bytes(read_bytes(path))
