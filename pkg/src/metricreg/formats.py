"""On-disk formats: PGM images, velocity binaries, labels and matrix CSVs.

All formats are deliberately simple and byte-exact:

* images are binary PGM (P5), 8-bit or 16-bit big-endian samples per the
  format; intensities map linearly onto [0, 1];
* velocities use a small headered binary (magic, dims, spacing) with
  little-endian float64 payload so checkpoints round-trip bit-exactly;
* matrices are CSV with 17-significant-digit decimals, which round-trips
  float64 exactly.
"""

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .grid import GridSpec, ScalarImage, TimeVelocity

VELOCITY_MAGIC = b"MRVELO01"


def write_pgm(path, image, maxval=65535):
    """Write a ScalarImage with data in [0, 1] as a binary PGM."""
    if maxval not in (255, 65535):
        raise InputError("maxval must be 255 or 65535")
    data = image.data
    if data.min() < 0 or data.max() > 1:
        raise InputError("image data must lie in [0, 1] for PGM export")
    quant = np.rint(data * maxval)
    header = f"P5\n{image.grid.nx} {image.grid.ny}\n{maxval}\n".encode("ascii")
    if maxval == 255:
        payload = quant.astype(np.uint8).tobytes()
    else:
        payload = quant.astype(">u2").tobytes()
    Path(path).write_bytes(header + payload)


def read_pgm(path, hx=1.0, hy=1.0):
    """Read a binary PGM into a ScalarImage with intensities scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise InputError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval not in (255, 65535):
        raise InputError(f"{path}: unsupported PGM maxval {maxval}")
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    count = width * height
    try:
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    except ValueError as exc:
        raise InputError(f"{path}: truncated PGM payload") from exc
    grid = GridSpec(width, height, hx, hy)
    return ScalarImage(grid, data.reshape(height, width).astype(np.float64) / maxval)


def write_velocity(path, velocity):
    """Serialize a TimeVelocity: magic, nx, ny, T, hx, hy, float64 payload."""
    g = velocity.grid
    header = VELOCITY_MAGIC + struct.pack("<IIIdd", g.nx, g.ny, velocity.num_steps, g.hx, g.hy)
    payload = velocity.as_array().astype("<f8").tobytes()
    Path(path).write_bytes(header + payload)


def read_velocity(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(VELOCITY_MAGIC):
        raise InputError(f"{path}: not a velocity file (bad magic)")
    off = len(VELOCITY_MAGIC)
    nx, ny, steps, hx, hy = struct.unpack_from("<IIIdd", raw, off)
    off += struct.calcsize("<IIIdd")
    count = steps * 2 * ny * nx
    try:
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    except ValueError as exc:
        raise InputError(f"{path}: truncated velocity payload") from exc
    grid = GridSpec(nx, ny, hx, hy)
    return TimeVelocity.from_array(grid, data.reshape(steps, 2, ny, nx))


def write_matrix_csv(path, matrix):
    """Full matrix, row-major, one row per line, 17 significant digits."""
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow([f"{x:.17g}" for x in row])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    if not rows:
        raise InputError(f"{path}: empty matrix CSV")
    return np.array(rows)


def write_labels_csv(path, names, labels):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        for name, label in zip(names, labels):
            writer.writerow([name, int(label)])


def read_labels_csv(path):
    names = []
    labels = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["filename", "label"]:
            raise InputError(f"{path}: expected a 'filename,label' header")
        for row in reader:
            if not row:
                continue
            names.append(row[0])
            labels.append(int(row[1]))
    return names, np.array(labels, dtype=int)
