"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import os
from typing import Tuple, Union

import numpy as np

PathLike = Union[str, os.PathLike]


class PnmError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode_pnm(img: np.ndarray) -> bytes:
    """[H,W,3] uint8 -> P6 bytes, [H,W] uint8 -> P5 bytes."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def _token(buf: bytes, pos: int) -> Tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PnmError("unexpected end of header", start)
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> np.ndarray:
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise PnmError(f"bad magic {buf[:2]!r}, expected P5 or P6", 0)
    channels = 3 if buf[:2] == b"P6" else 1
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, end = _token(buf, pos)
        if not tok.isdigit():
            raise PnmError(f"invalid {name} {tok!r}", end - len(tok))
        fields.append(int(tok))
        pos = end
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise PnmError(f"invalid dimensions {w}x{h}", pos)
    if maxval != 255:
        raise PnmError(f"only maxval 255 is supported, got {maxval}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PnmError("missing whitespace after header", pos)
    pos += 1
    need = w * h * channels
    have = len(buf) - pos
    if have < need:
        raise PnmError(f"truncated pixel data: need {need} bytes, have {have}", len(buf))
    if have > need:
        raise PnmError(f"{have - need} trailing bytes after pixel data", pos + need)
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def write_pnm(path: PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))


def read_pnm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())
