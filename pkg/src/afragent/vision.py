"""Screens and the patch-based vision encoder.

A screen is raw RGB bytes with explicit geometry. The encoder cuts it into
square patches, linearly embeds them, adds learned positions, prepends one
learned global token, and runs pre-norm transformer blocks, ending with a
layer norm so downstream consumers see tokens at a tame scale.

High-resolution input arrives as horizontal bands of a taller capture; every
band must share the low-res geometry because crop tokens reuse the same
patch projection and position table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .layers import LayerNorm, Linear, TransformerBlock, prefixed
from .numerics import Tensor


@dataclass(frozen=True)
class Screen:
    """Row-major RGB8 image; pixels has exactly width*height*3 bytes."""

    width_px: int
    height_px: int
    pixels: bytes

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError(f"screen dims must be positive, got {self.width_px}x{self.height_px}")
        need = self.width_px * self.height_px * 3
        if len(self.pixels) != need:
            raise ValueError(
                f"pixel buffer has {len(self.pixels)} bytes, expected {need} "
                f"for {self.width_px}x{self.height_px} RGB"
            )


def screen_from_array(arr: np.ndarray) -> Screen:
    """Build a Screen from an (H, W, 3) uint8 array."""
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) array, got shape {arr.shape}")
    a = np.ascontiguousarray(arr, dtype=np.uint8)
    return Screen(width_px=a.shape[1], height_px=a.shape[0], pixels=a.tobytes())


def screen_to_array(screen: Screen) -> np.ndarray:
    """(H, W, 3) uint8 view of the pixel bytes."""
    return np.frombuffer(screen.pixels, dtype=np.uint8).reshape(
        screen.height_px, screen.width_px, 3
    )


def screen_to_float(screen: Screen) -> np.ndarray:
    """(H, W, 3) float64 in [0, 1]."""
    return screen_to_array(screen).astype(np.float64) / 255.0


def write_ppm(path: str, screen: Screen) -> None:
    with open(path, "wb") as f:
        f.write(f"P6\n{screen.width_px} {screen.height_px}\n255\n".encode("ascii"))
        f.write(screen.pixels)


def read_ppm(path: str) -> Screen:
    """Read a binary P6 PPM with maxval 255."""
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError(f"truncated PPM header in {path}")
        fields.append(data[start:i])
    if fields[0] != b"P6":
        raise ValueError(f"not a binary P6 PPM: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"unsupported PPM maxval {maxval}, need 255")
    i += 1  # single whitespace after maxval
    body = data[i : i + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"PPM body has {len(body)} bytes, expected {w * h * 3}")
    return Screen(width_px=w, height_px=h, pixels=body)


def crop_horizontal(screen: Screen, c: int) -> list[Screen]:
    """Split into c equal-height horizontal bands, top to bottom, bit-exact."""
    if c <= 0:
        raise ValueError(f"crop count must be positive, got {c}")
    if screen.height_px % c != 0:
        raise ValueError(f"screen height {screen.height_px} not divisible into {c} bands")
    band = screen.height_px // c
    arr = screen_to_array(screen)
    return [screen_from_array(arr[k * band : (k + 1) * band]) for k in range(c)]


def patch_grid(screen_h: int, screen_w: int, patch: int) -> tuple[int, int]:
    if patch <= 0:
        raise ValueError(f"patch size must be positive, got {patch}")
    if screen_h % patch or screen_w % patch:
        raise ValueError(f"screen {screen_h}x{screen_w} not divisible by patch {patch}")
    return screen_h // patch, screen_w // patch


def patchify(screen: Screen, patch: int) -> np.ndarray:
    """(N, 3*patch*patch) float64 rows, patches in row-major screen order."""
    gh, gw = patch_grid(screen.height_px, screen.width_px, patch)
    arr = screen_to_float(screen)
    out = arr.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4).reshape(gh * gw, -1)
    return np.ascontiguousarray(out)


class VisionEncoder:
    """Patch transformer over a fixed screen geometry.

    Token layout on output: row 0 is the global token, rows 1..N are patches
    in row-major screen order, all d_i wide.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        screen_h: int,
        screen_w: int,
        patch: int,
        d_i: int,
        layers: int,
        heads: int,
        ffn_mult: int,
    ):
        gh, gw = patch_grid(screen_h, screen_w, patch)
        self.screen_h = screen_h
        self.screen_w = screen_w
        self.patch = patch
        self.n_patches = gh * gw
        self.d_i = d_i
        self.proj = Linear(rng, 3 * patch * patch, d_i)
        self.pos = nm.tensor(nm.uniform_init(rng, (self.n_patches, d_i), fan_in=d_i), requires_grad=True)
        self.global_tok = nm.tensor(nm.uniform_init(rng, (1, d_i), fan_in=d_i), requires_grad=True)
        self.blocks = [TransformerBlock(rng, d_i, heads, ffn_mult * d_i) for _ in range(layers)]
        self.ln_out = LayerNorm(d_i)

    def _check_geometry(self, screen: Screen, what: str) -> None:
        if (screen.height_px, screen.width_px) != (self.screen_h, self.screen_w):
            raise ValueError(
                f"{what} is {screen.width_px}x{screen.height_px}, encoder expects "
                f"{self.screen_w}x{self.screen_h}"
            )

    def embed_patches(self, screen: Screen) -> Tensor:
        """Patch embeddings before positions; exposed for locality diagnostics."""
        self._check_geometry(screen, "screen")
        return self.proj(nm.tensor(patchify(screen, self.patch)))

    def encode_low(self, screen: Screen) -> Tensor:
        """(N+1, d_i) tokens: learned global token then positioned patches."""
        x = nm.add(self.embed_patches(screen), self.pos)
        x = nm.concat([self.global_tok, x], axis=0)
        for block in self.blocks:
            x = block(x)
        return self.ln_out(x)

    def encode_crops(self, crops: list[Screen]) -> Tensor:
        """(C*(N+1), d_i): each band encoded with shared weights, then stacked."""
        if not crops:
            raise ValueError("encode_crops needs at least one crop")
        for k, crop in enumerate(crops):
            self._check_geometry(crop, f"crop {k}")
        return nm.concat([self.encode_low(c) for c in crops], axis=0)

    def params(self) -> dict[str, Tensor]:
        out = {
            **prefixed("proj", self.proj.params()),
            "pos": self.pos,
            "global_tok": self.global_tok,
        }
        for i, b in enumerate(self.blocks):
            out.update(prefixed(f"blocks.{i}", b.params()))
        out.update(prefixed("ln_out", self.ln_out.params()))
        return out
