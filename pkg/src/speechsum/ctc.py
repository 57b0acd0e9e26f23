"""CTC label-path utilities and word-aligned segment pooling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import torch

from .encoder import FrameSequence, pool_uniform

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CtcLabelPath:
    labels: tuple
    blank: int = 0
    frame_rate: float = 50.0

    def __init__(self, labels: Iterable[int], blank: int = 0, frame_rate: float = 50.0):
        object.__setattr__(self, "labels", tuple(int(x) for x in labels))
        object.__setattr__(self, "blank", int(blank))
        object.__setattr__(self, "frame_rate", float(frame_rate))

    def __len__(self):
        return len(self.labels)


def ctc_greedy_collapse(path: CtcLabelPath) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for label in path.labels:
        if label != prev and label != path.blank:
            out.append(label)
        prev = label
    return out


def _emissions(path: CtcLabelPath) -> list[tuple[int, int]]:
    """(label, onset frame) for every emission surviving the collapse."""
    out = []
    prev = None
    for i, label in enumerate(path.labels):
        if label != prev and label != path.blank:
            out.append((label, i))
        prev = label
    return out


def word_start_indices(path: CtcLabelPath, delimiter_label: Optional[int] = None) -> list[int]:
    """Onset frame of the first emission of each word.

    Words are maximal runs of non-delimiter emissions. With ``delimiter_label``
    set to None every emission is its own word (word-level label sets).
    """
    starts = []
    in_word = False
    for label, onset in _emissions(path):
        if delimiter_label is not None and label == delimiter_label:
            in_word = False
            continue
        if delimiter_label is None or not in_word:
            starts.append(onset)
            in_word = True
    return starts


def words_with_starts(
    path: CtcLabelPath, delimiter_label: Optional[int] = None
) -> list[tuple[list[int], int]]:
    """Group emissions into words: [(labels_of_word, start_frame), ...]."""
    words: list[tuple[list[int], int]] = []
    in_word = False
    for label, onset in _emissions(path):
        if delimiter_label is not None and label == delimiter_label:
            in_word = False
            continue
        if delimiter_label is None or not in_word:
            words.append(([label], onset))
            in_word = True
        else:
            words[-1][0].append(label)
    return words


def validate_boundaries(boundaries: Sequence[int], n_frames: int) -> None:
    prev = -1
    for b in boundaries:
        if b <= prev:
            raise ValueError(f"word boundaries must be strictly increasing, got {list(boundaries)}")
        prev = b
    if boundaries and (boundaries[0] < 0 or boundaries[-1] >= n_frames):
        raise ValueError(f"word boundaries {list(boundaries)} out of range for {n_frames} frames")


def segments(boundaries: Sequence[int], n_frames: int) -> list[tuple[int, int]]:
    ends = list(boundaries[1:]) + [n_frames]
    return list(zip(boundaries, ends))


def pool_ctc_aligned(
    frames: FrameSequence, boundaries: Sequence[int], kernel: int, stride: int
) -> FrameSequence:
    """Uniform pooling applied independently inside each word segment.

    Segments are ``[s_i, s_{i+1})`` plus ``[s_last, N)``; frames before the
    first start are not pooled. An empty boundary set falls back to uniform
    pooling over the whole sequence.
    """
    boundaries = [int(b) for b in boundaries]
    n = len(frames)
    if not boundaries:
        logger.info("no word boundaries; falling back to uniform pooling over %d frames", n)
        return pool_uniform(frames, kernel, stride)
    validate_boundaries(boundaries, n)
    pieces = [
        pool_uniform(FrameSequence(frames.frames[a:b], frames.frame_rate), kernel, stride).frames
        for a, b in segments(boundaries, n)
    ]
    # rate is nominal: per-segment pooling makes the true token rate data dependent
    return FrameSequence(torch.cat(pieces, dim=0), frames.frame_rate / stride)


def boundary_dump_record(utt_id: str, words: Sequence[str], starts: Sequence[int]) -> str:
    """One JSON line of (word, start_frame) pairs for alignment debugging."""
    return json.dumps(
        {"id": utt_id, "words": [[w, int(s)] for w, s in zip(words, starts)]}, sort_keys=True
    )
