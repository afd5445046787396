"""Binary PGM (P5) I/O and deterministic bilinear resizing."""

import numpy as np

from .errors import FormatError


def save_pgm(image, path):
    """Write a uint8 grayscale matrix as binary PGM, maxval 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError(f"expected 2-D image, got shape {img.shape}")
    img = img.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def load_pgm(path):
    """Read a binary PGM (P5, maxval 255) into a uint8 matrix."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] == b"P2":
        raise FormatError("ASCII PGM (P2) is not supported, use binary P5")
    if data[:2] != b"P5":
        raise FormatError(f"not a PGM file: magic {data[:2]!r}")

    # header tokens: magic, width, height, maxval; '#' comments allowed
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval

    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise FormatError(f"bad PGM header token: {e}") from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    payload = data[pos:pos + w * h]
    if len(payload) != w * h:
        raise FormatError(f"payload has {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def bilinear_resize(image, out_h, out_w):
    """Bilinear resample with half-pixel-centre mapping; float64 in and out."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[y0[:, None], x0[None, :]] * (1 - wx) + img[y0[:, None], x1[None, :]] * wx
    bot = img[y1[:, None], x0[None, :]] * (1 - wx) + img[y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy
