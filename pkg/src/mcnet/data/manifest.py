"""Sequence manifests and training-pair sampling.

A manifest is a text file with one frame path per line and a blank line
between sequences. Relative paths resolve against the manifest's folder.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import ImageFormatError, read_rgb

MODES = ("same", "cross")


class ManifestError(ValueError):
    pass


def write_manifest(path: str | Path, sequences: Sequence[Sequence[str | Path]]) -> None:
    blocks = ["\n".join(str(p) for p in seq) for seq in sequences if len(seq)]
    Path(path).write_text("\n\n".join(blocks) + "\n")


def read_manifest(path: str | Path) -> list[list[Path]]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    sequences: list[list[Path]] = []
    current: list[Path] = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            if current:
                sequences.append(current)
                current = []
            continue
        p = Path(line)
        current.append(p if p.is_absolute() else root / p)
    if current:
        sequences.append(current)
    return sequences


@dataclass
class FrameDataset:
    """All frames of a manifest decoded into memory, ``[F,3,H,W]`` per sequence."""

    sequences: list[np.ndarray]

    @classmethod
    def from_manifest(cls, path: str | Path) -> "FrameDataset":
        seqs = []
        for paths in read_manifest(path):
            frames = []
            for p in paths:
                if not p.is_file():
                    raise ManifestError(f"listed frame does not exist: {p}")
                try:
                    frames.append(read_rgb(p))
                except ImageFormatError as e:
                    raise ManifestError(f"{p}: {e}") from None
            seqs.append(np.stack(frames))
        if not seqs:
            raise ManifestError(f"manifest {path} lists no frames")
        shapes = {s.shape[1:] for s in seqs}
        if len(shapes) > 1:
            raise ManifestError(f"frames differ in size: {sorted(shapes)}")
        return cls(seqs)

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return self.sequences[0].shape[1:]

    def __len__(self) -> int:
        return len(self.sequences)


@dataclass
class Pair:
    source: np.ndarray
    driving: np.ndarray
    source_id: tuple[int, int]
    driving_id: tuple[int, int]


def sample_pair(data: FrameDataset, mode: str, rng: np.random.Generator) -> Pair:
    """Draw a (source, driving) pair.

    ``same``: two distinct frames of one sequence, the driving frame being
    the reconstruction target. ``cross``: frames from two different
    sequences, with no ground truth.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    seqs = data.sequences
    if not seqs:
        raise ManifestError("empty dataset")
    if mode == "same":
        i = int(rng.integers(len(seqs)))
        n = len(seqs[i])
        if n < 2:
            raise ManifestError(f"sequence {i} has {n} frame(s); same-sequence pairs need 2")
        a, b = rng.choice(n, size=2, replace=False)
        return Pair(seqs[i][a], seqs[i][b], (i, int(a)), (i, int(b)))
    if len(seqs) < 2:
        raise ManifestError("cross-sequence pairs need at least 2 sequences")
    i, j = rng.choice(len(seqs), size=2, replace=False)
    a = int(rng.integers(len(seqs[i])))
    b = int(rng.integers(len(seqs[j])))
    return Pair(seqs[i][a], seqs[j][b], (int(i), a), (int(j), b))


def sample_batch(data: FrameDataset, mode: str, rng: np.random.Generator, batch: int):
    pairs = [sample_pair(data, mode, rng) for _ in range(batch)]
    return np.stack([p.source for p in pairs]), np.stack([p.driving for p in pairs]), pairs
