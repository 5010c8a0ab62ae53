"""Image and label file formats.

Desk-scale images are PNG or PPM (8-bit, scaled to [0, 1]). Large images use
a tiled raw container so a patch read only touches the tiles it overlaps:

    offset  size  field
    0       4     magic b"FTIL"
    4       2     version (u16, = 1)
    6       4     height H (u32)
    10      4     width W (u32)
    14      2     channels C (u16)
    16      2     tile size T (u16, default 256)
    18      1     dtype code: 1 = uint8, 2 = float32, 3 = float64
    19      13    zero padding (header is 32 bytes)
    32      ...   ceil(H/T) * ceil(W/T) tiles in row-major tile order; each
                  tile is T*T*C values, row-major HWC, little-endian; edge
                  tiles are zero-filled beyond the image.

uint8 data is divided by 255 on read. Label maps are single-channel PNGs
holding class indices with 255 meaning "ignore".
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import IGNORE

TILE_MAGIC = b"FTIL"
TILE_VERSION = 1
HEADER_SIZE = 32
_DTYPES = {1: np.dtype("u1"), 2: np.dtype("<f4"), 3: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class TiledImage:
    """Read-only view of a tiled raw image; indexing reads only needed tiles."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            head = fh.read(HEADER_SIZE)
        if head[:4] != TILE_MAGIC:
            raise ValueError(f"{path}: not a tiled image")
        version, h, w, c, t, code = struct.unpack_from("<HIIHHB", head, 4)
        if version != TILE_VERSION:
            raise ValueError(f"{path}: unsupported tiled-image version {version}")
        self.shape = (h, w, c)
        self.tile = t
        self.dtype = _DTYPES[code]
        self.n_tile_rows = -(-h // t)
        self.n_tile_cols = -(-w // t)
        self._data = np.memmap(
            self.path, dtype=self.dtype, mode="r", offset=HEADER_SIZE,
            shape=(self.n_tile_rows, self.n_tile_cols, t, t, c),
        )

    def _scale(self, arr):
        arr = arr.astype(np.float64)
        return arr / 255.0 if self.dtype == np.uint8 else arr

    def take(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Values at the outer product of in-bounds ``rows`` x ``cols``."""
        rows, cols = np.asarray(rows), np.asarray(cols)
        t = self.tile
        out = np.empty((rows.size, cols.size, self.shape[2]), dtype=self.dtype)
        tr, tc = rows // t, cols // t
        for a in np.unique(tr):
            ri = np.nonzero(tr == a)[0]
            for b in np.unique(tc):
                ci = np.nonzero(tc == b)[0]
                tile = self._data[a, b]
                out[np.ix_(ri, ci)] = tile[np.ix_(rows[ri] % t, cols[ci] % t)]
        return self._scale(out)

    def row_strip(self, r0: int, r1: int) -> np.ndarray:
        return self.take(np.arange(r0, r1), np.arange(self.shape[1]))

    def to_array(self) -> np.ndarray:
        return self.row_strip(0, self.shape[0])


def write_tiled(path, image: np.ndarray, tile: int = 256, dtype="u1") -> None:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    dt = np.dtype(dtype)
    if dt == np.uint8:
        data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    else:
        data = image.astype(dt.newbyteorder("<"))
    ntr, ntc = -(-h // tile), -(-w // tile)
    padded = np.zeros((ntr * tile, ntc * tile, c), dtype=data.dtype)
    padded[:h, :w] = data
    tiles = padded.reshape(ntr, tile, ntc, tile, c).transpose(0, 2, 1, 3, 4)
    code = _CODES[np.dtype(dt).newbyteorder("<") if dt.itemsize > 1 else dt]
    head = TILE_MAGIC + struct.pack("<HIIHHB", TILE_VERSION, h, w, c, tile, code)
    head = head.ljust(HEADER_SIZE, b"\0")
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(tiles).tobytes())


def image_shape(image):
    return image.shape if isinstance(image, TiledImage) else np.asarray(image).shape


def take(image, rows, cols) -> np.ndarray:
    if isinstance(image, TiledImage):
        return image.take(rows, cols)
    return image[np.ix_(rows, cols)]


def load_image(path):
    """Return an (H, W, C) float array in [0, 1], or a TiledImage for ``.ftil``."""
    path = Path(path)
    if path.suffix == ".ftil":
        return TiledImage(path)
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint16:
        arr = arr / 65535.0
    else:
        arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def load_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: label maps must be single-channel")
    return arr.astype(np.int64)


def save_labels(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.max(initial=0) > 255 or arr.min(initial=0) < 0:
        raise ValueError("label values must fit in 8 bits")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


_PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
]


def save_prediction(path, labels: np.ndarray) -> None:
    """Class-index map as a palette (indexed) PNG; IGNORE is drawn black."""
    arr = np.asarray(labels)
    if arr.max(initial=0) > 255 or arr.min(initial=0) < 0:
        raise ValueError("label values must fit in 8 bits")
    palette = np.zeros((256, 3), dtype=np.uint8)
    for i in range(255):
        palette[i] = _PALETTE[i % len(_PALETTE)]
    im = Image.fromarray(arr.astype(np.uint8), mode="P")
    im.putpalette(palette.reshape(-1).tolist())
    im.save(path)


def save_map16(path, values: np.ndarray) -> None:
    """[0, 1] map as 16-bit grayscale PNG plus a raw float64 sidecar (.f64)."""
    values = np.asarray(values, dtype=np.float64)
    q = np.clip(np.round(values * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)
    side = Path(path).with_suffix(".f64")
    side.write_bytes(struct.pack("<II", *values.shape) + values.astype("<f8").tobytes())


def load_map_sidecar(path) -> np.ndarray:
    buf = Path(path).with_suffix(".f64").read_bytes()
    h, w = struct.unpack_from("<II", buf, 0)
    return np.frombuffer(buf, dtype="<f8", offset=8).reshape(h, w).copy()


__all__ = [
    "IGNORE", "TiledImage", "write_tiled", "load_image", "save_image",
    "load_labels", "save_labels", "save_prediction", "save_map16", "load_map_sidecar", "take", "image_shape",
]
