"""Minimal binary PGM (P5) and PPM (P6) readers and writers.

Grayscale patches travel as 8-bit PGM; normalized texture maps are written
as 16-bit PGM (maxval 65535, big-endian samples per the netpbm format);
color overlays and heat maps are 8-bit PPM.
"""

import numpy as np


def _read_header(data, magic):
    if data[:2] != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos] in b" \t\r\n":
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        fields.append(int(data[start:pos]))
    return fields[0], fields[1], fields[2], pos + 1


def read_pgm(path):
    """Read a binary PGM. Returns uint8 or uint16 array of shape (H, W)."""
    data = np.fromfile(path, dtype=np.uint8).tobytes()
    width, height, maxval, offset = _read_header(data, b"P5")
    if maxval < 256:
        img = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=offset)
    else:
        img = np.frombuffer(data, dtype=">u2", count=width * height, offset=offset)
        img = img.astype(np.uint16)
    return img.reshape(height, width)


def write_pgm(path, image):
    """Write a 2-D uint8 or uint16 array as binary PGM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    if image.dtype == np.uint8:
        maxval, payload = 255, image.tobytes()
    elif image.dtype == np.uint16:
        maxval, payload = 65535, image.astype(">u2").tobytes()
    else:
        raise ValueError("PGM image must be uint8 or uint16")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_ppm(path):
    """Read a binary 8-bit PPM. Returns uint8 array of shape (H, W, 3)."""
    data = np.fromfile(path, dtype=np.uint8).tobytes()
    width, height, maxval, offset = _read_header(data, b"P6")
    if maxval > 255:
        raise ValueError("only 8-bit PPM supported")
    img = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=offset)
    return img.reshape(height, width, 3)


def write_ppm(path, image):
    """Write an (H, W, 3) uint8 array as binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("PPM image must be (H, W, 3) uint8")
    header = f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + image.tobytes())


def colormap_rgb(values):
    """Map values in [0, 1] through blue(0) -> green(0.5) -> red(1).

    Shared palette for heat matrices and activation overlays.  Returns
    uint8 RGB with one trailing channel axis added to the input shape.
    """
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    low = v <= 0.5
    t = np.where(low, 2.0 * v, 2.0 * v - 1.0)
    r = np.where(low, 0.0, t)
    g = np.where(low, t, 1.0 - t)
    b = np.where(low, 1.0 - t, 0.0)
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.round(255.0 * rgb), 0, 255).astype(np.uint8)
