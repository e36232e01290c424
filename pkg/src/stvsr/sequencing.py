"""Token geometry: scan orders, register tokens, and position encodings.

Scan orders are permutations over flattened token sequences. The two-frame
alternating orders interleave tokens of a preceding frame A and a succeeding
frame B position by position along four raster traversals; at every visited
position the A token comes first. Register tokens are blank learnable rows
interleaved uniformly into a sequence and dropped again after mixing. The
rotary spatial encoding rotates channel pairs by angles proportional to each
token's (row, column) coordinate, so inner products between encoded tokens
depend only on coordinate differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ScanOrder:
    """A permutation of token indices and its inverse.

    ``gather`` reorders tokens into visit order (out[i] = x[forward[i]]);
    ``scatter`` undoes it.
    """

    forward: np.ndarray
    inverse: np.ndarray
    direction_tag: str

    @staticmethod
    def from_forward(forward, direction_tag: str) -> "ScanOrder":
        fwd = np.asarray(forward, dtype=np.int64)
        n = fwd.size
        if not np.array_equal(np.sort(fwd), np.arange(n)):
            raise ValueError("scan order is not a permutation")
        inv = np.empty(n, dtype=np.int64)
        inv[fwd] = np.arange(n)
        return ScanOrder(fwd, inv, direction_tag)

    def gather(self, x: Tensor) -> Tensor:
        return T.take_rows(x, self.forward)

    def scatter(self, x: Tensor) -> Tensor:
        return T.take_rows(x, self.inverse)


def gather_permute(x: Tensor, order: ScanOrder) -> Tensor:
    return order.gather(x)


def scatter_permute(x: Tensor, order: ScanOrder) -> Tensor:
    return order.scatter(x)


def _position_walks(h: int, w: int):
    rows = np.repeat(np.arange(h), w)
    cols = np.tile(np.arange(w), h)
    row_major = rows * w + cols
    col_major = (cols * h + rows)  # visit order down columns
    walks = {
        "row+": row_major,
        "row-": row_major[::-1],
        "col+": np.argsort(col_major, kind="stable"),
        "col-": np.argsort(col_major, kind="stable")[::-1],
    }
    return walks


def masm_orders(h: int, w: int) -> list[ScanOrder]:
    """Four alternating two-frame orders over L = 2*h*w tokens.

    Token layout is frame A raster-flattened then frame B; each order visits
    spatial positions along one raster direction and emits the A token then
    the B token at every position.
    """
    if h < 1 or w < 1:
        raise ValueError(f"grid extents must be positive, got {(h, w)}")
    hw = h * w
    orders = []
    for tag, walk in _position_walks(h, w).items():
        fwd = np.empty(2 * hw, dtype=np.int64)
        fwd[0::2] = walk
        fwd[1::2] = walk + hw
        orders.append(ScanOrder.from_forward(fwd, tag))
    return orders


def vim_order(h: int, w: int) -> ScanOrder:
    """Row-major raster order over a single frame's h*w tokens."""
    if h < 1 or w < 1:
        raise ValueError(f"grid extents must be positive, got {(h, w)}")
    return ScanOrder.from_forward(np.arange(h * w), "row+")


# -- register tokens ---------------------------------------------------------


@dataclass(frozen=True)
class RegisterLayout:
    """Placement of n register rows inside an augmented sequence.

    Registers are interleaved after every ceil(L/n) content tokens; positions
    index the augmented sequence of length L + n.
    """

    content_len: int
    register_count: int
    positions: np.ndarray = field(repr=False)
    content_positions: np.ndarray = field(repr=False)

    @staticmethod
    def uniform(content_len: int, register_count: int) -> "RegisterLayout":
        if register_count < 0 or content_len < 0:
            raise ValueError("lengths must be non-negative")
        n = register_count
        if n == 0:
            return RegisterLayout(content_len, 0, np.empty(0, np.int64),
                                  np.arange(content_len, dtype=np.int64))
        group = -(-content_len // n)  # ceil
        positions = np.array(
            [min((k + 1) * group, content_len) + k for k in range(n)],
            dtype=np.int64,
        )
        total = content_len + n
        mask = np.ones(total, dtype=bool)
        mask[positions] = False
        content_positions = np.nonzero(mask)[0].astype(np.int64)
        return RegisterLayout(content_len, n, positions, content_positions)


def insert_registers(x: Tensor, layout: RegisterLayout, registers: Tensor) -> Tensor:
    """Interleave register rows into ``x[L,C]`` per the layout.

    ``registers`` must carry exactly ``layout.register_count`` rows; content
    rows keep their relative order.
    """
    if x.shape[0] != layout.content_len:
        raise ValueError(
            f"layout expects {layout.content_len} content rows, got {x.shape[0]}"
        )
    if layout.register_count == 0:
        return x
    if registers.shape[0] != layout.register_count:
        raise ValueError(
            f"layout expects {layout.register_count} register rows, "
            f"got {registers.shape[0]}"
        )
    combined = T.concat([x, registers], axis=0)
    total = layout.content_len + layout.register_count
    source = np.empty(total, dtype=np.int64)
    source[layout.content_positions] = np.arange(layout.content_len)
    source[layout.positions] = layout.content_len + np.arange(layout.register_count)
    return T.take_rows(combined, source)


def remove_registers(x: Tensor, layout: RegisterLayout) -> Tensor:
    """Drop register rows, exact inverse of :func:`insert_registers`."""
    expected = layout.content_len + layout.register_count
    if x.shape[0] != expected:
        raise ValueError(f"layout expects {expected} rows, got {x.shape[0]}")
    if layout.register_count == 0:
        return x
    return T.take_rows(x, layout.content_positions)


# -- rotary spatial encoding ---------------------------------------------------


class SpatialPositionEncoding:
    """Per-position rotation angles for a h x w grid of width-d tokens.

    Channel pairs (2j, 2j+1) with j < d/4 rotate by u * freq[j]; the remaining
    pairs rotate by v * freq[j - d/4]. The angle table has shape [h, w, d]
    with each pair angle stored on both channels of its pair, so the first
    d/2 channels carry height angles and the last d/2 carry width angles.
    The table depends only on (h, w, d), never on training state.
    """

    def __init__(self, h: int, w: int, d: int, floor_freqs: bool = False):
        if d % 4 != 0:
            raise ValueError(f"encoding width must be divisible by 4, got {d}")
        self.h, self.w, self.d = h, w, d
        freqs = np.pi * np.arange(1, d // 2 + 1) / 2.0
        if floor_freqs:
            freqs = np.floor(freqs)
        self.frequencies = freqs
        quarter = d // 4
        u = np.arange(h, dtype=np.float64)
        v = np.arange(w, dtype=np.float64)
        height_angles = u[:, None] * freqs[:quarter]          # [h, d/4]
        width_angles = v[:, None] * freqs[:quarter]           # [w, d/4]
        pair_angles = np.zeros((h, w, d // 2))
        pair_angles[:, :, :quarter] = height_angles[:, None, :]
        pair_angles[:, :, quarter:] = width_angles[None, :, :]
        self.pair_angles = pair_angles
        self.table = np.repeat(pair_angles, 2, axis=2)        # [h, w, d]

    def token_angles(self, coords: np.ndarray) -> np.ndarray:
        """Pair angles [L, d/2] for integer coords [L, 2]; rows with a
        negative coordinate (register tokens) get zero angles."""
        coords = np.asarray(coords)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError("coords must have shape [L, 2]")
        angles = np.zeros((coords.shape[0], self.d // 2))
        content = (coords[:, 0] >= 0) & (coords[:, 1] >= 0)
        angles[content] = self.pair_angles[coords[content, 0], coords[content, 1]]
        return angles


def build_spe(h: int, w: int, d: int, floor_freqs: bool = False) -> SpatialPositionEncoding:
    return SpatialPositionEncoding(h, w, d, floor_freqs)


def apply_spe(x: Tensor, spe: SpatialPositionEncoding, coords) -> Tensor:
    """Rotate each token's channel pairs by its positional angles.

    ``coords[L, 2]`` gives (u, v) per token; negative coordinates mark rows
    to pass through unrotated (register tokens). Norms are preserved.
    """
    length, c = x.shape
    if c != spe.d:
        raise ValueError(f"token width {c} does not match encoding width {spe.d}")
    coords = np.asarray(coords)
    if coords.shape[0] != length:
        raise ValueError(
            f"{length} tokens but {coords.shape[0]} coordinate rows; "
            "every content token needs coordinates"
        )
    angles = spe.token_angles(coords)
    cos = Tensor(np.cos(angles))
    sin = Tensor(np.sin(angles))
    even = x[:, 0::2]
    odd = x[:, 1::2]
    rot_even = even * cos - odd * sin
    rot_odd = even * sin + odd * cos
    return T.reshape(T.stack([rot_even, rot_odd], axis=2), (length, c))


class TemporalPositionEmbedding:
    """Learned additive per-time-step code, table shape [t_max, channels]."""

    def __init__(self, t_max: int, channels: int):
        self.t_max = t_max
        self.channels = channels
        self.table = Tensor(np.zeros((t_max, channels)), requires_grad=True)

    def add_to(self, x: Tensor, times) -> Tensor:
        """Add the code for each token's time index; negative indices (register
        rows) receive nothing."""
        times = np.asarray(times, dtype=np.int64)
        if times.shape[0] != x.shape[0]:
            raise ValueError(f"{x.shape[0]} tokens but {times.shape[0]} time indices")
        if times.size and times.max() >= self.t_max:
            raise ValueError(f"time index {times.max()} outside table of {self.t_max}")
        mask = (times >= 0).astype(self.table.dtype)[:, None]
        rows = T.take_rows(self.table, np.maximum(times, 0))
        return x + rows * Tensor(mask)
