"""8-bit RGB image files (PNG via Pillow, binary PPM directly)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` in [0, 1] to ``[H, W, 3]`` bytes, rounding half up."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def _read_ppm(data: bytes, path) -> np.ndarray:
    fields, pos = [], 2
    while len(fields) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    w, h, maxval = fields
    if maxval != 255:
        raise OSError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    body = data[pos + 1:pos + 1 + 3 * w * h]
    if len(body) != 3 * w * h:
        raise OSError(f"{path}: truncated PPM")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def read_image(path) -> np.ndarray:
    """Load an 8-bit RGB PNG or P6 PPM as float32 ``[3, H, W]`` in [0, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    if data[:2] == b"P6":
        px = _read_ppm(data, path)
    else:
        try:
            with Image.open(path) as im:
                if im.mode not in ("RGB", "L", "P", "RGBA") or getattr(im, "bits", 8) != 8:
                    raise OSError(f"{path}: unsupported image mode {im.mode}")
                px = np.asarray(im.convert("RGB"))
        except (Image.UnidentifiedImageError, ValueError) as exc:
            raise OSError(f"{path}: unreadable image") from exc
    return (px.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_image(path, img: np.ndarray) -> None:
    """Write ``[3, H, W]`` in [0, 1]; the extension picks PNG or PPM."""
    path = Path(path)
    px = to_uint8(img)
    if path.suffix.lower() == ".ppm":
        h, w, _ = px.shape
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())
    else:
        Image.fromarray(px, "RGB").save(path, format="PNG")
