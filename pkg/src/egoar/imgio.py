"""Binary PGM/PPM, PNG and SVG writers for sequence artifacts.

Depth maps go to disk as 16-bit binary PGM with value = bin * 257
(mapping bins 0..255 onto the full 16-bit range exactly); binary masks
as 8-bit PGM holding 0/255; RGB frames as binary PPM. RGBA context
layers can be written as PNG or as a PPM + PGM pair.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

DEPTH_SCALE = 257  # 255 * 257 == 65535


def write_pgm8(path, values: np.ndarray) -> None:
    a = np.asarray(values, dtype=np.uint8)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + a.tobytes())


def write_pgm16(path, values: np.ndarray) -> None:
    a = np.asarray(values, dtype=np.uint16)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + a.astype(">u2").tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    a = np.asarray(rgb, dtype=np.uint8)
    header = f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + a.tobytes())


def _read_netpbm(path, magic: bytes):
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != magic:
        raise ValueError(f"expected {magic!r} file, got {fields[0]!r}")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    return data[pos:], width, height, maxval


def read_pgm(path) -> np.ndarray:
    """Read 8- or 16-bit binary PGM; returns uint8 or uint16 array."""
    raw, width, height, maxval = _read_netpbm(path, b"P5")
    if maxval > 255:
        return np.frombuffer(raw, dtype=">u2", count=width * height) \
            .reshape(height, width).astype(np.uint16)
    return np.frombuffer(raw, dtype=np.uint8, count=width * height) \
        .reshape(height, width)


def read_ppm(path) -> np.ndarray:
    raw, width, height, _ = _read_netpbm(path, b"P6")
    return np.frombuffer(raw, dtype=np.uint8, count=3 * width * height) \
        .reshape(height, width, 3)


def write_depth_pgm(path, bins: np.ndarray) -> None:
    write_pgm16(path, bins.astype(np.uint16) * DEPTH_SCALE)


def read_depth_pgm(path) -> np.ndarray:
    values = read_pgm(path)
    return (values // DEPTH_SCALE).astype(np.uint8)


def write_mask_pgm(path, mask: np.ndarray) -> None:
    write_pgm8(path, np.asarray(mask, dtype=bool) * np.uint8(255))


def read_mask_pgm(path) -> np.ndarray:
    return read_pgm(path) > 127


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(str(path), format="PNG")


def write_rgba(path_base, rgba: np.ndarray, image_format: str = "png") -> list[str]:
    """Write an RGBA layer as PNG or as a PPM + alpha-PGM pair."""
    base = Path(path_base)
    if image_format == "png":
        out = base.with_suffix(".png")
        write_png(out, rgba)
        return [out.name]
    rgb_path = base.with_suffix(".ppm")
    alpha_path = base.parent / (base.name + "_alpha.pgm")
    write_ppm(rgb_path, rgba[..., :3])
    write_pgm8(alpha_path, rgba[..., 3])
    return [rgb_path.name, alpha_path.name]


def sha256_of(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_svg_curve(path, xs, ys, *, title: str = "", width: int = 640,
                    height: int = 320, y_label: str = "px") -> None:
    """Minimal deterministic SVG polyline plot of one error curve."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    margin = 40
    x_span = max(float(xs.max() - xs.min()), 1e-12)
    y_max = max(float(ys.max()), 1e-12)
    px = margin + (xs - xs.min()) / x_span * (width - 2 * margin)
    py = height - margin - ys / y_max * (height - 2 * margin)
    points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<text x="{margin}" y="20" font-size="13">{title}</text>\n'
        f'<text x="4" y="{margin}" font-size="11">{y_max:.3g} {y_label}</text>\n'
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>\n'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.2" '
        f'points="{points}"/>\n</svg>\n'
    )
    Path(path).write_text(svg, encoding="ascii")
