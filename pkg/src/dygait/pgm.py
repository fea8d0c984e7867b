"""8-bit PGM (P5 binary, P2 ascii) reading and P5 writing."""
import os

import numpy as np


class PGMFormatError(ValueError):
    """The file exists but is not a decodable 8-bit PGM."""


def _tokens(buf, start, count):
    out = []
    i = start
    n = len(buf)
    while len(out) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise PGMFormatError("truncated PGM header")
        out.append(buf[i:j])
        i = j
    return out, i


def decode_pgm(buf):
    if buf[:2] not in (b"P5", b"P2"):
        raise PGMFormatError("missing P5/P2 magic")
    (w, h, maxval), pos = _tokens(buf, 2, 3)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PGMFormatError(f"bad PGM header: {exc}") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise PGMFormatError(f"unsupported PGM geometry {w}x{h} maxval {maxval}")
    if buf[:2] == b"P5":
        data = buf[pos + 1 : pos + 1 + w * h]
        if len(data) != w * h:
            raise PGMFormatError(f"truncated PGM payload: expected {w * h} bytes, got {len(data)}")
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
    values, _ = _tokens(buf, pos, w * h)
    return np.array([int(v) for v in values], dtype=np.uint8).reshape(h, w)


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_pgm(buf)


def write_pgm(path, img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_image(path):
    """Grayscale image as uint8; PGM always, PNG and friends through Pillow when installed."""
    if path.lower().endswith(".pgm"):
        return read_pgm(path)
    try:
        from PIL import Image, UnidentifiedImageError
    except ImportError:  # pragma: no cover
        raise PGMFormatError(f"no decoder available for {path}") from None
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise PGMFormatError(f"cannot decode {path}: {exc}") from None
    except OSError as exc:
        if "truncated" in str(exc) or "broken" in str(exc):
            raise PGMFormatError(f"cannot decode {path}: {exc}") from None
        raise
