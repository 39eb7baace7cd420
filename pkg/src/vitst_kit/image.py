"""RGB image buffer and binary PPM (P6, maxval 255) reader/writer."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ImageFormatError

BACKGROUND = (255, 255, 255)


@dataclass(eq=False)
class ImageBuffer:
    pixels: np.ndarray  # (H, W, 3) uint8, row-major

    def __post_init__(self):
        px = self.pixels
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise ImageFormatError(f"expected (H, W, 3) uint8 pixels, got {px.dtype} {px.shape}")

    @classmethod
    def blank(cls, height: int, width: int, color=BACKGROUND) -> "ImageBuffer":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = color
        return cls(px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.pixels.copy())

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.pixels).tobytes()

    def to_float(self) -> np.ndarray:
        """Pixels scaled to [0, 1]."""
        return self.pixels.astype(np.float32) / 255.0

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ImageBuffer)
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )


def encode_ppm(image: ImageBuffer, comment: str | None = None) -> bytes:
    header = b"P6\n"
    if comment:
        for line in comment.splitlines():
            header += b"# " + line.encode("utf-8") + b"\n"
    header += f"{image.width} {image.height}\n255\n".encode("ascii")
    return header + image.tobytes()


def write_image(image: ImageBuffer, path, comment: str | None = None) -> None:
    Path(path).write_bytes(encode_ppm(image, comment))


def decode_ppm(data: bytes) -> ImageBuffer:
    if data[:2] != b"P6":
        raise ImageFormatError(f"unsupported magic {data[:2]!r}; only binary P6 is supported")
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and '#' comments may separate header tokens
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("malformed header: truncated before width/height/maxval")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError("malformed header: unterminated comment")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise ImageFormatError(f"malformed header: expected integer, got {token!r}")
        fields.append(int(token))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("malformed header: missing whitespace after maxval")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}; only 255 is supported")
    if width < 1 or height < 1:
        raise ImageFormatError(f"malformed header: bad dimensions {width}x{height}")
    n = width * height * 3
    payload = data[pos : pos + n]
    if len(payload) < n:
        raise ImageFormatError(f"truncated payload: expected {n} bytes, got {len(payload)}")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()
    return ImageBuffer(px)


def read_image(path) -> ImageBuffer:
    return decode_ppm(Path(path).read_bytes())
