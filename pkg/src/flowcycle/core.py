"""Canonical frame/clip/flow/mask types and lossless file I/O.

Conventions used throughout the package:

* Frames are H x W x 3 float arrays in [-1, 1] (tanh-compatible net range).
* Indexing is row-major (y, x); flow channel order is (u, v) = (dx, dy),
  in pixels.
* Flow fields are *backward*: ``output(p)`` samples ``input(p + f(p))``.
  ``clip.flows[t - 1]`` maps frame ``t`` onto frame ``t - 1``, so warping
  frame ``t - 1`` by it reconstructs frame ``t`` wherever the
  correspondence is valid.

On-disk clip layout (one directory per clip)::

    clipdir/frame_0000.png ... frame_<L-1>.png   8-bit RGB
    clipdir/sem_0000.png   ... (optional)        8-bit single-channel ids
    clipdir/flow_0001.flo  ... (optional, t>=1)  Middlebury format

The .flo format is the Middlebury layout: little-endian float32 magic
202021.25, int32 width, int32 height, then row-major interleaved
float32 (u, v) pairs.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    CorruptFlowError,
    DataError,
    DimensionMismatchError,
    MissingFrameError,
)

FLO_MAGIC = 202021.25


def _check_canvas(height: int, width: int) -> None:
    if height < 8 or width < 8 or height % 4 or width % 4:
        raise ValueError(
            f"frame size must be >= 8 and divisible by 4, got {height}x{width}"
        )


@dataclass
class Frame:
    """One H x W x 3 image in [-1, 1], the unit of all net I/O."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"frame must be HxWx3, got shape {self.data.shape}")
        _check_canvas(*self.data.shape[:2])
        if not np.isfinite(self.data).all():
            raise ValueError("frame contains non-finite values")
        if self.data.min() < -1.0 or self.data.max() > 1.0:
            raise ValueError("frame values must lie in [-1, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class FlowField:
    """Backward optical flow in pixels; ``output(p)`` samples ``input(p + f(p))``."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError(f"flow must be HxWx2, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("flow contains non-finite values")
        h, w = self.data.shape[:2]
        if np.abs(self.data[..., 0]).max() >= w or np.abs(self.data[..., 1]).max() >= h:
            raise ValueError("flow magnitude exceeds frame extent")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class Mask:
    """One H x W x 1 map in [0, 1] (occlusion confidence or fusion weight)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[..., None]
        if self.data.ndim != 3 or self.data.shape[2] != 1:
            raise ValueError(f"mask must be HxWx1, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("mask contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")


@dataclass
class VideoClip:
    """Ordered frames plus optional aligned semantics and flow.

    ``flows`` has length ``len(frames) - 1``; ``flows[t - 1]`` maps frame
    ``t`` to frame ``t - 1``.  ``semantics`` holds one HxW int class-id map
    per frame.
    """

    frames: list[Frame]
    semantics: list[np.ndarray] | None = None
    flows: list[FlowField] | None = None
    domain_tag: str = "S"

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("clip must contain at least one frame")
        if self.domain_tag not in ("S", "T"):
            raise ValueError(f"domain_tag must be 'S' or 'T', got {self.domain_tag!r}")
        h, w = self.frames[0].data.shape[:2]
        for f in self.frames:
            if f.data.shape[:2] != (h, w):
                raise DimensionMismatchError("frames disagree on spatial size")
        if self.semantics is not None:
            if len(self.semantics) != len(self.frames):
                raise ValueError("need one semantic map per frame")
            for s in self.semantics:
                if s.shape != (h, w):
                    raise DimensionMismatchError("semantic map size mismatch")
        if self.flows is not None:
            if len(self.flows) != len(self.frames) - 1:
                raise ValueError("need len(frames) - 1 flow fields")
            for fl in self.flows:
                if fl.data.shape[:2] != (h, w):
                    raise DimensionMismatchError("flow field size mismatch")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def flow_to_prev(self, t: int) -> FlowField:
        """Flow mapping frame ``t`` onto frame ``t - 1`` (t >= 1)."""
        if self.flows is None:
            raise DataError("clip carries no flow fields")
        if not 1 <= t < len(self.frames):
            raise IndexError(f"flow index {t} out of range")
        return self.flows[t - 1]


def to_normalized(raw: np.ndarray) -> Frame:
    """Map an 8-bit [0, 255] image affinely onto [-1, 1]."""
    raw = np.asarray(raw)
    if not np.isfinite(np.asarray(raw, dtype=np.float64)).all():
        raise ValueError("raw image contains non-finite values")
    if raw.min() < 0 or raw.max() > 255:
        raise ValueError("raw image values must lie in [0, 255]")
    data = (np.asarray(raw, dtype=np.float64) / 127.5 - 1.0).astype(np.float32)
    return Frame(data)


def from_normalized(frame: Frame) -> np.ndarray:
    """Invert :func:`to_normalized` up to 8-bit rounding; clamps first."""
    x = np.clip(frame.data.astype(np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


def write_flo(path: str | Path, flow: np.ndarray) -> None:
    """Write an HxWx2 float32 flow array in the Middlebury .flo layout."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be HxWx2, got shape {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        flow.astype("<f4").tofile(f)


def read_flo(path: str | Path) -> np.ndarray:
    """Read a Middlebury .flo file into an HxWx2 float32 array."""
    with open(path, "rb") as f:
        magic = np.fromfile(f, dtype="<f4", count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise CorruptFlowError(f"corrupt flow file (bad magic): {path}")
        dims = np.fromfile(f, dtype="<i4", count=2)
        if dims.size != 2 or dims.min() <= 0:
            raise CorruptFlowError(f"corrupt flow file (bad dims): {path}")
        w, h = int(dims[0]), int(dims[1])
        data = np.fromfile(f, dtype="<f4", count=2 * w * h)
        if data.size != 2 * w * h:
            raise CorruptFlowError(f"corrupt flow file (truncated): {path}")
    return data.reshape(h, w, 2)


_FRAME_RE = re.compile(r"frame_(\d{4})\.png$")


def save_clip(clip: VideoClip, dir_path: str | Path) -> None:
    """Write a clip directory; lossless for 8-bit frames, ids and flows."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        Image.fromarray(from_normalized(frame), mode="RGB").save(
            dir_path / f"frame_{t:04d}.png"
        )
    if clip.semantics is not None:
        for t, sem in enumerate(clip.semantics):
            if sem.min() < 0 or sem.max() > 255:
                raise ValueError("semantic ids must fit in 8 bits")
            Image.fromarray(sem.astype(np.uint8), mode="L").save(
                dir_path / f"sem_{t:04d}.png"
            )
    if clip.flows is not None:
        for t, flow in enumerate(clip.flows, start=1):
            write_flo(dir_path / f"flow_{t:04d}.flo", flow.data)


def load_clip(dir_path: str | Path, domain_tag: str = "S") -> VideoClip:
    """Load a clip directory written by :func:`save_clip`.

    Raises a distinct error for a gap in the frame sequence, inconsistent
    dimensions, and a corrupt flow file.
    """
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise DataError(f"clip directory not found: {dir_path}")
    indices = sorted(
        int(m.group(1))
        for name in os.listdir(dir_path)
        if (m := _FRAME_RE.search(name))
    )
    if not indices:
        raise DataError(f"no frame files in {dir_path}")
    expected = list(range(len(indices)))
    if indices != expected:
        missing = sorted(set(range(indices[-1] + 1)) - set(indices))
        raise MissingFrameError(
            f"missing frame index {missing[0]:04d} in {dir_path}"
        )

    frames = []
    for t in expected:
        img = Image.open(dir_path / f"frame_{t:04d}.png").convert("RGB")
        frames.append(to_normalized(np.asarray(img, dtype=np.uint8)))
    h, w = frames[0].data.shape[:2]
    for t, frame in enumerate(frames):
        if frame.data.shape[:2] != (h, w):
            raise DimensionMismatchError(
                f"frame_{t:04d}.png is {frame.data.shape[:2]}, expected {(h, w)}"
            )

    semantics = None
    if (dir_path / "sem_0000.png").exists():
        semantics = []
        for t in expected:
            p = dir_path / f"sem_{t:04d}.png"
            if not p.exists():
                raise MissingFrameError(f"missing semantic map {p.name}")
            sem = np.asarray(Image.open(p).convert("L"), dtype=np.int64)
            if sem.shape != (h, w):
                raise DimensionMismatchError(f"{p.name} is {sem.shape}, expected {(h, w)}")
            semantics.append(sem)

    flows = None
    if (dir_path / "flow_0001.flo").exists():
        flows = []
        for t in range(1, len(expected)):
            p = dir_path / f"flow_{t:04d}.flo"
            if not p.exists():
                raise MissingFrameError(f"missing flow file {p.name}")
            data = read_flo(p)
            if data.shape[:2] != (h, w):
                raise DimensionMismatchError(f"{p.name} is {data.shape[:2]}, expected {(h, w)}")
            flows.append(FlowField(data))

    return VideoClip(frames=frames, semantics=semantics, flows=flows, domain_tag=domain_tag)
