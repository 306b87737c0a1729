"""Streaming mp4 writer for episode animations (Pillow frames in, OpenCV out)."""

import importlib.util
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import PlannerError

logger = logging.getLogger(__name__)

CV2_AVAILABLE = importlib.util.find_spec("cv2") is not None

if CV2_AVAILABLE:
    import cv2
else:
    cv2 = None


class EpisodeVideoWriter:
    """
    Append frames one at a time while an episode is replayed.

    The first frame fixes the video size; later frames of another size are
    resized. On close the last frame is repeated for ``hold_seconds`` so the
    final scene stays readable.

    Usage:
        with EpisodeVideoWriter(path, fps=5) as video:
            for frame in frames:
                video.add(frame)
    """

    def __init__(self, output_path: Path, fps: int = 5, hold_seconds: float = 1.0):
        if not CV2_AVAILABLE:
            raise PlannerError("opencv-python is required for video output")
        if fps <= 0:
            raise PlannerError(f"video fps must be positive, got {fps}")
        self.output_path = Path(output_path).with_suffix(".mp4")
        self.fps = fps
        self.hold_frames = max(0, round(hold_seconds * fps))
        self.frame_count = 0
        self._size: Optional[tuple[int, int]] = None
        self._writer = None
        self._last: Optional[np.ndarray] = None

    def _open(self, size: tuple[int, int]) -> None:
        self.output_path.parent.mkdir(parents=True, exist_ok=True)
        writer = cv2.VideoWriter(str(self.output_path), cv2.VideoWriter_fourcc(*"mp4v"), self.fps, size)
        if not writer.isOpened():
            raise PlannerError(f"cannot open video writer for {self.output_path}")
        self._size = size
        self._writer = writer

    def add(self, frame: Image.Image) -> None:
        if self._writer is None:
            self._open(frame.size)
        if frame.size != self._size:
            frame = frame.resize(self._size, Image.Resampling.LANCZOS)
        self._last = cv2.cvtColor(np.array(frame.convert("RGB")), cv2.COLOR_RGB2BGR)
        self._writer.write(self._last)
        self.frame_count += 1

    def close(self) -> Path:
        if self._writer is None:
            raise PlannerError(f"no frames were written to {self.output_path}")
        for _ in range(self.hold_frames):
            self._writer.write(self._last)
        self._writer.release()
        self._writer = None
        logger.info("wrote %d frames (+%d hold) to %s", self.frame_count, self.hold_frames, self.output_path)
        return self.output_path

    def __enter__(self) -> "EpisodeVideoWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        elif self._writer is not None:
            self._writer.release()
