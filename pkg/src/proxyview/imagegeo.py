"""Raster grid types and file I/O for normals, depth, masks and rendered images.

Float rasters (normals, depth) live in PFM files, masks and renders in 8-bit PNG.
Normals are camera-space with +x right, +y up and +z toward the viewer.
Arrays are stored top row first regardless of the on-disk row order.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from PIL import Image


class FormatError(ValueError):
    """Raised when a file does not follow the expected layout."""


class ValidationError(ValueError):
    """Raised when loaded data violates a raster invariant."""


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ForegroundMask:
    data: np.ndarray  # (H, W) bool

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data, bool))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def require_nonempty(self) -> None:
        if not self.data.any():
            raise ValidationError("mask has no foreground pixels")


@dataclass(frozen=True)
class NormalMap:
    data: np.ndarray  # (H, W, 3) float64

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValidationError(f"normal map must be (H, W, 3), got {data.shape}")
        object.__setattr__(self, "data", _frozen(data, np.float64))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def normalized(cls, vectors: np.ndarray, mask: ForegroundMask | None = None) -> NormalMap:
        """Build a normal map, renormalizing every foreground vector to unit length.

        Without a mask, pixels whose vector is all-NaN or all-zero count as background.
        Background pixels are stored as NaN.
        """
        vectors = np.asarray(vectors, dtype=np.float64)
        finite = np.isfinite(vectors)
        if mask is None:
            fg = finite.all(axis=2) & (np.abs(vectors) > 0).any(axis=2)
            partial = finite.any(axis=2) & ~finite.all(axis=2)
            if partial.any():
                raise ValidationError("normal map has pixels with partially NaN components")
        else:
            fg = mask.data
            if (~finite[fg]).any():
                raise ValidationError("NaN in a foreground normal")
        norms = np.linalg.norm(np.where(finite, vectors, 0.0), axis=2)
        if (norms[fg] == 0).any():
            raise ValidationError("zero-length foreground normal")
        out = np.full(vectors.shape, np.nan)
        out[fg] = vectors[fg] / norms[fg][:, None]
        return cls(out)


@dataclass(frozen=True)
class DepthMap:
    data: np.ndarray  # (H, W) float64, NaN on background

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValidationError(f"depth map must be 2-D, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data, np.float64))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def check_foreground(self, mask: ForegroundMask) -> None:
        if self.data.shape != mask.data.shape:
            raise ValidationError(f"depth {self.data.shape} and mask {mask.data.shape} differ")
        if not np.isfinite(self.data[mask.data]).all():
            raise ValidationError("depth is not finite on the foreground")


@dataclass(frozen=True)
class RgbImage:
    data: np.ndarray  # (H, W, 3) float64 in [0, 1]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValidationError(f"RGB image must be (H, W, 3), got {data.shape}")
        object.__setattr__(self, "data", _frozen(np.clip(data, 0.0, 1.0), np.float64))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def filled(cls, height: int, width: int, color=(1.0, 1.0, 1.0)) -> RgbImage:
        return cls(np.broadcast_to(np.asarray(color, dtype=np.float64), (height, width, 3)))


# ---------------------------------------------------------------- PFM

_PFM_DIMS = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")


def read_pfm(path) -> tuple[np.ndarray, float]:
    """Read a PFM file into a top-to-bottom float32 array plus its scale field."""
    with open(path, "rb") as fh:
        tag = fh.readline().rstrip()
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise FormatError(f"{path}: not a PFM file (header {tag[:8]!r})")
        dims = _PFM_DIMS.match(fh.readline())
        if dims is None:
            raise FormatError(f"{path}: malformed dimension line")
        width, height = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(fh.readline().decode("ascii").strip())
        except (UnicodeDecodeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed scale line") from exc
        if scale == 0.0:
            raise FormatError(f"{path}: scale must be nonzero")
        dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
        count = width * height * channels
        payload = fh.read(count * 4)
    if len(payload) != count * 4:
        raise FormatError(f"{path}: expected {count * 4} payload bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype).astype(np.float32)
    shape = (height, width, 3) if channels == 3 else (height, width)
    # PFM stores the bottom row first
    return np.flipud(data.reshape(shape)).copy(), scale


def write_pfm(path, data: np.ndarray, little_endian: bool = True) -> None:
    data = np.asarray(data)
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"cannot store array of shape {data.shape} as PFM")
    height, width = data.shape[:2]
    dtype = "<f4" if little_endian else ">f4"
    scale = b"-1.0" if little_endian else b"1.0"
    payload = np.ascontiguousarray(np.flipud(data).astype(dtype)).tobytes()
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{width} {height}".encode() + b"\n" + scale + b"\n")
        fh.write(payload)


def load_pfm(path, mask: ForegroundMask | None = None) -> NormalMap | DepthMap:
    """Load a 3-channel PFM as a NormalMap or a 1-channel PFM as a DepthMap.

    Normals are renormalized to unit length; with a mask, NaN inside the
    foreground is rejected. Depth values are returned as stored.
    """
    data, _ = read_pfm(path)
    if data.ndim == 3:
        return NormalMap.normalized(data, mask)
    return DepthMap(data)


def save_pfm(raster: NormalMap | DepthMap, path) -> None:
    write_pfm(path, raster.data)


# ---------------------------------------------------------------- PNG


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to uint8 with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def save_png(img: RgbImage, path) -> None:
    Image.fromarray(to_bytes(img.data), mode="RGB").save(path, format="PNG")


def load_png(path) -> RgbImage:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return RgbImage(rgb)


def load_mask(path, threshold: float = 0.5) -> ForegroundMask:
    """Foreground is where the alpha channel (or luminance if no alpha) exceeds ``threshold``."""
    with Image.open(path) as im:
        if im.mode == "P" and "transparency" in im.info:
            im = im.convert("RGBA")
        if "A" in im.getbands():
            channel = im.getchannel("A")
        else:
            channel = im if im.mode in ("L", "I;16", "I", "F") else im.convert("L")
        values = np.asarray(channel, dtype=np.float64)
        if channel.mode in ("I;16",):
            values = values / 65535.0
        elif channel.mode in ("I", "F"):
            top = values.max()
            values = values / (65535.0 if top > 255 else 255.0)
        else:
            values = values / 255.0
    mask = ForegroundMask(values > threshold)
    mask.require_nonempty()
    return mask


def save_mask(mask: ForegroundMask, path) -> None:
    Image.fromarray(mask.data.astype(np.uint8) * 255, mode="L").save(path, format="PNG")
