"""Image I/O, color conversion, and patch extraction.

Images are numpy arrays in row-major (height, width, channels) layout:
``uint8`` for 8-bit rasters, ``float64`` in [0, 1] for probability maps.
Coordinates in public APIs are (x, y) with x the column index.

Supported file formats are PNG (8-bit gray / RGB / RGBA on read) and
binary PPM (P6). Masks and probability maps are written as 8-bit
grayscale PNG.
"""

import io

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError

PATCH_SIZE = 32

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

# sRGB -> CIEXYZ (D65, 2 degree observer). The reference white is taken as
# the row sums so that (255,255,255) maps exactly to L=100, a=b=0 and
# L stays within [0, 100] for every 8-bit input.
_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_WHITE = _RGB_TO_XYZ.sum(axis=1)


def decode_image(data: bytes) -> np.ndarray:
    """Decode a PNG or binary PPM (P6) byte stream.

    Returns a (H, W, C) uint8 array with C=3 for color input and C=1 for
    grayscale PNG. An alpha channel, if present, is dropped.
    """
    if data[:8] == _PNG_MAGIC:
        return _decode_png(data)
    if data[:2] == b"P6":
        return _decode_ppm(data)
    raise DecodeError(
        "unrecognized image format at offset 0: expected PNG or PPM(P6) magic"
    )


def _decode_png(data: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"malformed PNG stream: {exc}") from exc
    mode = img.mode
    if mode in ("I", "I;16", "I;16B", "F"):
        raise DecodeError(f"unsupported PNG bit depth (mode {mode}); 8-bit only")
    if mode == "L":
        arr = np.asarray(img, dtype=np.uint8)
        return arr[:, :, None]
    if mode == "LA":
        return np.asarray(img, dtype=np.uint8)[:, :, :1]
    if mode in ("P", "1"):
        img = img.convert("RGB")
        mode = "RGB"
    if mode == "RGBA":
        return np.asarray(img, dtype=np.uint8)[:, :, :3]
    if mode == "RGB":
        return np.asarray(img, dtype=np.uint8)
    raise DecodeError(f"unsupported PNG mode {mode}")


def _decode_ppm(data: bytes) -> np.ndarray:
    pos = 2  # past the b"P6" magic
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise DecodeError(f"truncated PPM header at offset {pos}")
        token = data[start:pos]
        if not token.isdigit():
            raise DecodeError(
                f"invalid PPM header token {token!r} at offset {start}"
            )
        fields.append(int(token))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise DecodeError(f"invalid PPM dimensions {width}x{height}")
    if maxval != 255:
        raise DecodeError(f"unsupported PPM maxval {maxval}; expected 255")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise DecodeError(
            f"truncated PPM pixel data at offset {pos + len(raw)}: "
            f"need {need} bytes, have {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)


def encode_image(img: np.ndarray) -> bytes:
    """Encode a 1- or 3-channel 8-bit raster as PNG.

    decode_image(encode_image(r)) round-trips bit-exactly.
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        raise ValueError(f"encode_image expects uint8 data, got {arr.dtype}")
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(
            f"encode_image supports 1 or 3 channels, got shape {arr.shape}"
        )
    mode = "L" if arr.shape[2] == 1 else "RGB"
    pil = Image.fromarray(arr[:, :, 0] if mode == "L" else arr, mode=mode)
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def save_image(img: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_image(img))


def save_label_map(labels: np.ndarray, path) -> None:
    """Write a region label map as 16-bit grayscale PNG (debug output)."""
    if labels.max() > 0xFFFF:
        raise ValueError("label map exceeds 16-bit range")
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def probability_to_gray(prob: np.ndarray) -> np.ndarray:
    """Map a [0,1] probability map to 8-bit gray, value = round(255*p)."""
    return np.rint(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """Convert an 8-bit sRGB image to CIELAB (D65).

    Output is float64 (H, W, 3) with L in [0, 100] and a, b in roughly
    [-128, 127].
    """
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("rgb_to_lab expects a (H, W, 3) uint8 array")
    srgb = arr.astype(np.float64) / 255.0
    linear = np.where(
        srgb > 0.04045, ((srgb + 0.055) / 1.055) ** 2.4, srgb / 12.92
    )
    xyz = linear @ _RGB_TO_XYZ.T
    t = xyz / _WHITE
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[:, :, 0] = 116.0 * f[:, :, 1] - 16.0
    lab[:, :, 1] = 500.0 * (f[:, :, 0] - f[:, :, 1])
    lab[:, :, 2] = 200.0 * (f[:, :, 1] - f[:, :, 2])
    return lab


def patch_origin(width: int, height: int, center) -> tuple:
    """Top-left corner of the 32x32 window centered at (x, y).

    Windows overhanging the border are shifted inward so every patch pixel
    is a real image pixel; the nominal center sits at patch-local (16, 16).
    """
    if width < PATCH_SIZE or height < PATCH_SIZE:
        raise ValueError(
            f"image {width}x{height} smaller than the {PATCH_SIZE}x{PATCH_SIZE} patch"
        )
    x, y = center
    half = PATCH_SIZE // 2
    ox = min(max(int(x) - half, 0), width - PATCH_SIZE)
    oy = min(max(int(y) - half, 0), height - PATCH_SIZE)
    return ox, oy


def extract_patch(img: np.ndarray, prior: np.ndarray, center) -> np.ndarray:
    """Cut the 32x32 RGBP window centered at (x, y).

    Returns (32, 32, 4) float64 with R, G, B scaled to [0, 1] and the
    prior map appended as the fourth channel.
    """
    height, width = img.shape[:2]
    x, y = center
    if not (0 <= x < width and 0 <= y < height):
        raise ValueError(f"patch center {center} outside {width}x{height} image")
    ox, oy = patch_origin(width, height, center)
    patch = np.empty((PATCH_SIZE, PATCH_SIZE, 4), dtype=np.float64)
    patch[:, :, :3] = (
        img[oy : oy + PATCH_SIZE, ox : ox + PATCH_SIZE, :3].astype(np.float64) / 255.0
    )
    patch[:, :, 3] = prior[oy : oy + PATCH_SIZE, ox : ox + PATCH_SIZE]
    return patch
