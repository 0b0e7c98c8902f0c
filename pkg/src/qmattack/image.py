"""Luminance planes, binary netpbm I/O and directory datasets.

An image plane is a 2-D ``float64`` numpy array indexed ``[row, col]``
(height x width).  Pixel values are kept real-valued everywhere; the
only quantization happens in :func:`write_pgm`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DatasetError, FormatError, ShapeError

log = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_WHITESPACE = b" \t\n\r\v\f"


def as_plane(x) -> np.ndarray:
    """Validate and convert ``x`` into a finite 2-D float64 plane."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D plane, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image plane contains non-finite values")
    return a


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "images") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in size: {a.shape[::-1]} vs {b.shape[::-1]} (w x h)")


# --------------------------------------------------------------------------
# netpbm parsing
# --------------------------------------------------------------------------

def _header_tokens(buf: bytes, count: int) -> tuple[list[tuple[bytes, int]], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens with their byte offsets, and the offset just past
    the single whitespace byte that terminates the last token.
    """
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos] in _WHITESPACE:
            pos += 1
        if pos >= n:
            raise FormatError(f"truncated header at offset {pos}")
        if buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\n\r":
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos] not in _WHITESPACE and buf[pos] != ord("#"):
            pos += 1
        tokens.append((buf[start:pos], start))
    if pos >= n or buf[pos] not in _WHITESPACE:
        raise FormatError(f"expected a single whitespace byte after header at offset {pos}")
    return tokens, pos + 1


def _parse_int(tok: bytes, offset: int, name: str) -> int:
    if not tok.isdigit():
        raise FormatError(f"bad {name} {tok!r} at offset {offset}")
    return int(tok)


def read_pnm(buf: bytes) -> tuple[str, np.ndarray]:
    """Parse a binary PGM (P5) or PPM (P6) byte string.

    Returns the magic and a ``(h, w)`` array for P5 or ``(h, w, 3)`` for
    P6, holding the stored sample values as float64.
    """
    buf = bytes(buf)
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {buf[:2]!r} at offset 0 (expected P5 or P6)")
    magic = buf[:2].decode()
    # the magic itself counts as the first token
    tokens, data_start = _header_tokens(buf, 4)
    (mg, _), (wt, wo), (ht, ho), (mt, mo) = tokens
    if mg != buf[:2]:
        raise FormatError(f"bad magic {mg!r} at offset 0")
    width = _parse_int(wt, wo, "width")
    height = _parse_int(ht, ho, "height")
    maxval = _parse_int(mt, mo, "maxval")
    if width < 1 or height < 1:
        raise FormatError(f"non-positive dimensions {width}x{height} at offset {wo}")
    if not 1 <= maxval <= 255:
        raise FormatError(f"unsupported maxval {maxval} at offset {mo} (must be 1..255)")
    channels = 1 if magic == "P5" else 3
    expected = width * height * channels
    payload = buf[data_start:data_start + expected]
    if len(payload) < expected:
        raise FormatError(
            f"truncated payload at offset {data_start + len(payload)}: "
            f"expected {expected} bytes, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    if channels == 1:
        return magic, arr.reshape(height, width)
    return magic, arr.reshape(height, width, 3)


def read_pgm(buf: bytes) -> np.ndarray:
    magic, arr = read_pnm(buf)
    if magic != "P5":
        raise FormatError(f"expected P5 at offset 0, got {magic}")
    return arr


def quantize(img) -> np.ndarray:
    """Clamp to [0, 255] and round half away from zero, as uint8."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 255.0)
    return np.floor(a + 0.5).astype(np.uint8)


def write_pgm(img) -> bytes:
    plane = as_plane(img)
    h, w = plane.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + quantize(plane).tobytes()


def rgb_to_luma(r, g, b) -> np.ndarray:
    r, g, b = (np.asarray(c, dtype=np.float64) for c in (r, g, b))
    if not (r.shape == g.shape == b.shape):
        raise ShapeError(f"channel sizes differ: {r.shape}, {g.shape}, {b.shape}")
    wr, wg, wb = LUMA_WEIGHTS
    return wr * r + wg * g + wb * b


def load_image(path) -> np.ndarray:
    """Load a PGM or PPM file as a luma plane."""
    path = Path(path)
    magic, arr = read_pnm(path.read_bytes())
    if magic == "P6":
        return rgb_to_luma(arr[..., 0], arr[..., 1], arr[..., 2])
    return arr


def save_pgm(path, img) -> None:
    Path(path).write_bytes(write_pgm(img))


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    entries: tuple[tuple[str, np.ndarray], ...] = field(default_factory=tuple)

    def __post_init__(self):
        ids = [k for k, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate identifiers in dataset")
        object.__setattr__(self, "entries", tuple(sorted(self.entries, key=lambda e: e[0])))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [k for k, _ in self.entries]


def load_dataset(path, glob: str = "*.p[gp]m") -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    files = sorted(p for p in root.glob(glob) if p.is_file())
    entries = []
    for p in files:
        try:
            img = load_image(p)
        except OSError as exc:
            raise DatasetError(f"cannot read {p}: {exc}") from exc
        except FormatError as exc:
            raise FormatError(f"{p}: {exc}") from exc
        entries.append((p.stem, img))
    if not entries:
        raise DatasetError(f"no images matching {glob!r} in {root}")
    log.debug("loaded %d images from %s", len(entries), root)
    return Dataset(tuple(entries))
