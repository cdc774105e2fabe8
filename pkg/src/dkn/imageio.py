"""Netpbm (binary PGM/PPM) and PFM readers and writers.

Arrays are float (1, C, H, W) in [0, 1]. PGM/PPM samples are divided by the
header maxval on read; PFM floats pass through unchanged. 16-bit PGM is the
lossless default for depth maps.
"""

import os
import re

import numpy as np

from dkn.errors import MalformedHeaderError, UnexpectedEOFError, UnsupportedMaxvalError

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(data, count):
    """First ``count`` whitespace-separated header tokens and the offset after them."""
    tokens = []
    pos = 0
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if m is None:
            if len(data[pos:].strip()) == 0:
                raise UnexpectedEOFError("file ends inside the header")
            raise MalformedHeaderError("unreadable header")
        tokens.append(m.group(1))
        pos = m.end()
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data):
        raise UnexpectedEOFError("file ends after the header")
    if data[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise MalformedHeaderError("header not terminated by whitespace")
    return tokens, pos + 1


def _positive_int(token, what):
    if not token.isdigit():
        raise MalformedHeaderError(f"{what} is not a positive integer: {token[:20]!r}")
    value = int(token)
    if value <= 0:
        raise MalformedHeaderError(f"{what} must be positive")
    return value


def _raster(data, offset, nbytes):
    if len(data) - offset < nbytes:
        raise UnexpectedEOFError(f"raster needs {nbytes} bytes, found {len(data) - offset}")
    return data[offset:offset + nbytes]


def decode_netpbm(data):
    """Decode P5 (PGM) or P6 (PPM) bytes into a float32 (1, C, H, W) array."""
    if len(data) < 2:
        raise UnexpectedEOFError("empty file")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise MalformedHeaderError(f"not a binary PGM/PPM file (magic {magic!r})")
    channels = 1 if magic == b"P5" else 3
    (w, h, maxval), offset = _header_tokens(data[2:], 3)
    offset += 2
    w = _positive_int(w, "width")
    h = _positive_int(h, "height")
    maxval = _positive_int(maxval, "maxval")
    if maxval > 65535 or (channels == 3 and maxval > 255):
        raise UnsupportedMaxvalError(f"maxval {maxval} not supported for {magic.decode()}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    raw = _raster(data, offset, w * h * channels * dtype.itemsize)
    a = np.frombuffer(raw, dtype=dtype).reshape(h, w, channels)
    out = a.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(maxval)
    return out


def encode_netpbm(image, maxval=None):
    a = np.asarray(image)
    a = a.reshape(a.shape[-3:]) if a.ndim == 4 else a
    if a.ndim == 2:
        a = a[None]
    channels, h, w = a.shape
    if channels not in (1, 3):
        raise MalformedHeaderError(f"cannot store {channels} channels in PGM/PPM")
    if maxval is None:
        maxval = 65535 if channels == 1 else 255
    if maxval > 65535 or (channels == 3 and maxval > 255) or maxval < 1:
        raise UnsupportedMaxvalError(f"maxval {maxval} not supported")
    q = np.rint(np.clip(a, 0.0, 1.0) * maxval).astype(np.int64)
    dtype = ">u2" if maxval > 255 else "u1"
    magic = b"P5" if channels == 1 else b"P6"
    header = magic + f"\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + q.transpose(1, 2, 0).astype(dtype).tobytes()


def decode_pfm(data):
    """Decode PFM bytes; returns ``(array (1, C, H, W) float32, scale)``.

    A negative scale marks little-endian data. Rows are stored bottom-up.
    """
    m = re.match(rb"(P[Ff])\s", data)
    if m is None:
        if len(data) < 3:
            raise UnexpectedEOFError("empty file")
        raise MalformedHeaderError("not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    (w, h, scale), offset = _header_tokens(data[2:], 3)
    offset += 2
    w = _positive_int(w, "width")
    h = _positive_int(h, "height")
    try:
        scale = float(scale)
    except ValueError:
        raise MalformedHeaderError(f"bad PFM scale {scale[:20]!r}") from None
    if scale == 0 or not np.isfinite(scale):
        raise MalformedHeaderError("PFM scale must be finite and non-zero")
    dtype = np.dtype("<f4" if scale < 0 else ">f4")
    raw = _raster(data, offset, w * h * channels * 4)
    a = np.frombuffer(raw, dtype=dtype).reshape(h, w, channels)[::-1]
    return a.transpose(2, 0, 1)[None].astype(np.float32), abs(scale)


def encode_pfm(image, scale=1.0, little_endian=True):
    a = np.asarray(image, dtype=np.float32)
    a = a.reshape(a.shape[-3:]) if a.ndim == 4 else a
    if a.ndim == 2:
        a = a[None]
    channels, h, w = a.shape
    if channels not in (1, 3):
        raise MalformedHeaderError(f"cannot store {channels} channels in PFM")
    magic = b"Pf" if channels == 1 else b"PF"
    signed = -abs(scale) if little_endian else abs(scale)
    header = magic + f"\n{w} {h}\n{signed:g}\n".encode("ascii")
    body = a.transpose(1, 2, 0)[::-1].astype("<f4" if little_endian else ">f4")
    return header + body.tobytes()


def _extension(path):
    return os.path.splitext(str(path))[1].lower()


def read_pfm(path):
    with open(path, "rb") as f:
        return decode_pfm(f.read())


def read_image(path):
    """Read a .pgm, .ppm or .pfm file as a float32 (1, C, H, W) array."""
    ext = _extension(path)
    with open(path, "rb") as f:
        data = f.read()
    if ext == ".pfm":
        return decode_pfm(data)[0]
    if ext in (".pgm", ".ppm", ".pnm"):
        return decode_netpbm(data)
    raise MalformedHeaderError(f"unsupported image extension {ext!r}")


def write_image(image, path, maxval=None):
    """Write by extension; values are clipped to [0, 1] for PGM/PPM."""
    ext = _extension(path)
    if ext == ".pfm":
        data = encode_pfm(image)
    elif ext in (".pgm", ".ppm", ".pnm"):
        data = encode_netpbm(image, maxval)
    else:
        raise MalformedHeaderError(f"unsupported image extension {ext!r}")
    with open(path, "wb") as f:
        f.write(data)
