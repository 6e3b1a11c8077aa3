"""
Video sources and view sampling.

Raw frame files, frame directories, the synthetic moving-square and
static-texture generators, and the temporal/spatial view samplers used for
zero-shot inference.
"""
import logging
import os
import struct

import numpy as np

from .errors import DimensionError, ReportIOError

logger = logging.getLogger(__name__)

FRAME_SUFFIX = ".rgb"
SYNTHETIC_CLASSES = ("moving square", "static texture")


def write_frame_file(path, frame):
    """
    Write one frame as u32 width, u32 height (little-endian) then RGB8 rows.

    Args:
        path (str): Destination
        frame (np.ndarray): [H, W, 3] values in [0, 1] or uint8
    """
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DimensionError(f"frame must be [H, W, 3], got {frame.shape}")
    if frame.dtype != np.uint8:
        frame = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    height, width = frame.shape[:2]
    try:
        with open(path, "wb") as handle:
            handle.write(struct.pack("<II", width, height))
            handle.write(np.ascontiguousarray(frame).tobytes())
    except OSError as exc:
        raise ReportIOError(f"cannot write frame {path}: {exc}")


def read_frame_file(path):
    """
    Read a frame file.

    Returns:
        np.ndarray: [H, W, 3] float64 in [0, 1]
    """
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as exc:
        raise ReportIOError(f"cannot read frame {path}: {exc}")
    if len(blob) < 8:
        raise ReportIOError(f"{path}: missing frame header")
    width, height = struct.unpack("<II", blob[:8])
    payload = blob[8:]
    if len(payload) != width * height * 3:
        raise ReportIOError(f"{path}: expected {width * height * 3} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3) / 255.0


def load_frame_directory(directory):
    """
    Load every frame file of a directory in file-name order.

    Returns:
        np.ndarray: [F, H, W, 3]

    Raises:
        ReportIOError: If the directory holds no frames or frames differ in size
    """
    try:
        names = sorted(n for n in os.listdir(directory) if n.endswith(FRAME_SUFFIX))
    except OSError as exc:
        raise ReportIOError(f"cannot list {directory}: {exc}")
    if not names:
        raise ReportIOError(f"{directory} contains no {FRAME_SUFFIX} frames")
    frames = [read_frame_file(os.path.join(directory, n)) for n in names]
    if len({f.shape for f in frames}) != 1:
        raise ReportIOError(f"{directory}: frames have differing sizes")
    logger.debug("loaded %d frames from %s", len(frames), directory)
    return np.stack(frames)


def save_frame_directory(directory, video):
    os.makedirs(directory, exist_ok=True)
    for i, frame in enumerate(video):
        write_frame_file(os.path.join(directory, f"frame_{i:05d}{FRAME_SUFFIX}"), frame)


def moving_square(frames, height, width, seed=0, size=None, noise=0.05):
    """
    A bright square sliding across a dim noisy background.

    The start position, direction and colour are drawn from `seed`; the square
    moves one step of roughly width / frames pixels per frame and wraps around.
    """
    rng = np.random.default_rng(seed)
    size = size or max(2, min(height, width) // 4)
    video = rng.uniform(0.0, noise, size=(frames, height, width, 3))
    color = rng.uniform(0.6, 1.0, size=3)
    row = int(rng.integers(0, height - size + 1))
    col0 = int(rng.integers(0, width))
    step = max(1, width // max(frames, 1)) * (1 if rng.random() < 0.5 else -1)
    for t in range(frames):
        cols = (col0 + t * step + np.arange(size)) % width
        video[t, row:row + size, cols, :] = color
    return video


def static_texture(frames, height, width, seed=0):
    """A random smooth texture repeated unchanged in every frame."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.0, 1.0, size=(max(1, height // 4), max(1, width // 4), 3))
    texture = np.kron(coarse, np.ones((4, 4, 1)))[:height, :width]
    texture = np.pad(texture, ((0, height - texture.shape[0]), (0, width - texture.shape[1]), (0, 0)), mode="edge")
    return np.broadcast_to(texture, (frames, height, width, 3)).copy()


def synthetic_video(class_name, frames, height, width, seed=0):
    """Generate one video of a synthetic class by name."""
    if class_name == "moving square":
        return moving_square(frames, height, width, seed=seed)
    if class_name == "static texture":
        return static_texture(frames, height, width, seed=seed)
    raise ValueError(f"unknown synthetic class '{class_name}'")


def temporal_view_indices(total_frames, clip_frames, views, seed=0):
    """
    Frame indices of uniformly strided clips, one phase offset per view.

    View v samples floor((i + (v + u) / views) * total / clip) for i < clip,
    where u in [0, 1) is drawn once from `seed`. Short videos repeat frames.

    Returns:
        list[np.ndarray]: `views` index arrays of length `clip_frames`
    """
    if total_frames < 1 or clip_frames < 1 or views < 1:
        raise DimensionError("temporal views need at least one frame, clip frame and view")
    rng = np.random.default_rng(seed)
    jitter = rng.random()
    stride = total_frames / clip_frames
    out = []
    for v in range(views):
        phase = (v + jitter) / views
        idx = np.floor((np.arange(clip_frames) + phase) * stride).astype(np.int64)
        out.append(np.clip(idx, 0, total_frames - 1))
    return out


def spatial_view_crops(video, height, width, views):
    """
    Crops of size height x width spread evenly along each axis with room to move.

    Returns:
        list[np.ndarray]: `views` arrays [F, height, width, 3]
    """
    src_h, src_w = video.shape[1:3]
    if src_h < height or src_w < width:
        raise DimensionError(f"cannot crop {height}x{width} from {src_h}x{src_w} frames")
    crops = []
    for v in range(views):
        frac = 0.5 if views == 1 else v / (views - 1)
        top = int(round(frac * (src_h - height)))
        left = int(round(frac * (src_w - width)))
        crops.append(video[:, top:top + height, left:left + width, :])
    return crops


def sample_views(video, clip_frames, height, width, temporal_views=3, spatial_views=1, seed=0):
    """All temporal x spatial views of a video, each [clip_frames, height, width, 3]."""
    views = []
    for idx in temporal_view_indices(video.shape[0], clip_frames, temporal_views, seed):
        views.extend(spatial_view_crops(video[idx], height, width, spatial_views))
    return views
