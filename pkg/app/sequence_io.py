import io
import logging
import os
import re
import struct
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from core import Frame, LabelMap, ProbMap, ValidationError, VideoSequence

log = logging.getLogger('sequence_io')

PROB_MAGIC = b'VSPM'
_HEADER = struct.Struct('<4sII')
_FRAME_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp')
_NUMBERED = re.compile(r'^(\d+)$')


class SequenceError(ValidationError):
    """Raised when an image sequence on disk is malformed."""


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f'{path}.tmp'
    with open(tmp_path, 'wb') as fh:
        fh.write(data)
    os.replace(tmp_path, path)


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode('utf-8'))


def davis_palette(size: int = 256) -> List[int]:
    """Indexed-label palette: label k is drawn with entry k, 0 is black."""
    palette: List[int] = []
    for label in range(size):
        code = label
        r = g = b = 0
        for bit in range(8):
            r |= ((code >> 0) & 1) << (7 - bit)
            g |= ((code >> 1) & 1) << (7 - bit)
            b |= ((code >> 2) & 1) << (7 - bit)
            code >>= 3
        palette.extend((r, g, b))
    return palette


def frame_name(index: int, ext: str = '.png') -> str:
    return f'{index:05d}{ext}'


def _numbered_files(directory: str, extensions: Sequence[str]) -> List[str]:
    if not os.path.isdir(directory):
        raise SequenceError(f'Directory "{directory}" not found')
    numbered: Dict[int, str] = {}
    for name in os.listdir(directory):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in extensions:
            continue
        match = _NUMBERED.match(stem)
        if not match:
            continue
        index = int(match.group(1))
        if index in numbered:
            raise SequenceError(f'Duplicate frame number {index:05d} in "{directory}"')
        numbered[index] = os.path.join(directory, name)
    if not numbered:
        raise SequenceError(f'No numbered images found in "{directory}"')
    paths = []
    for expected in range(max(numbered) + 1):
        if expected not in numbered:
            raise SequenceError(f'Missing image {expected:05d} in "{directory}" (numbering gap)')
        paths.append(numbered[expected])
    return paths


def open_image(path: str) -> Image.Image:
    try:
        image = Image.open(path)
        image.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise SequenceError(f'Cannot read image "{os.path.basename(path)}": {exc}') from exc
    return image


def load_frame(path: str, index: Optional[int] = None) -> Frame:
    with open_image(path) as image:
        rgb = np.asarray(image.convert('RGB'))
    return Frame.from_uint8(rgb, index=index)


def load_sequence(directory: str) -> VideoSequence:
    frames: List[Frame] = []
    for index, path in enumerate(_numbered_files(directory, _FRAME_EXTENSIONS)):
        frame = load_frame(path, index)
        if frames and frame.shape != frames[0].shape:
            raise SequenceError(
                f'Frame "{os.path.basename(path)}" is {frame.width}x{frame.height}, '
                f'expected {frames[0].width}x{frames[0].height}'
            )
        frames.append(frame)
    log.info('Loaded %d frames from %s', len(frames), directory)
    return VideoSequence(frames)


def save_frames(sequence: VideoSequence, directory: str) -> None:
    for frame in sequence:
        rgb = np.round(frame.pixels * 255.0).astype(np.uint8)
        buffer = io.BytesIO()
        Image.fromarray(rgb).save(buffer, format='PNG')
        atomic_write_bytes(os.path.join(directory, frame_name(frame.index)), buffer.getvalue())


def load_label_map(path: str) -> LabelMap:
    with open_image(path) as image:
        if image.mode not in ('P', 'L'):
            raise SequenceError(f'Mask "{os.path.basename(path)}" must be an indexed image, got mode {image.mode}')
        return np.asarray(image, dtype=np.uint8).astype(np.int32)


def encode_label_map(labels: LabelMap) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise SequenceError(f'Label map must be 2-D, got shape {labels.shape}')
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise SequenceError('Label values must lie in 0..255 to fit an indexed palette')
    image = Image.fromarray(labels.astype(np.uint8))
    image.putpalette(davis_palette())
    buffer = io.BytesIO()
    image.save(buffer, format='PNG')
    return buffer.getvalue()


def save_label_map(path: str, labels: LabelMap) -> None:
    atomic_write_bytes(path, encode_label_map(labels))


def load_masks(directory: str) -> List[LabelMap]:
    masks: List[LabelMap] = []
    for path in _numbered_files(directory, ('.png',)):
        mask = load_label_map(path)
        if masks and mask.shape != masks[0].shape:
            raise SequenceError(f'Mask "{os.path.basename(path)}" differs in size from the first mask')
        masks.append(mask)
    return masks


def save_masks(labels: Sequence[LabelMap], directory: str) -> None:
    for index, label_map in enumerate(labels):
        save_label_map(os.path.join(directory, frame_name(index)), label_map)


def overlay(frame: Frame, labels: LabelMap, alpha: float = 0.5) -> np.ndarray:
    colors = np.array(davis_palette(), dtype=np.float32).reshape(-1, 3) / 255.0
    labels = np.asarray(labels, dtype=np.int64)
    blended = frame.pixels.astype(np.float32).copy()
    fg = labels > 0
    blended[fg] = (1.0 - alpha) * blended[fg] + alpha * colors[labels[fg]]
    return np.round(np.clip(blended, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_overlays(sequence: VideoSequence, labels: Sequence[LabelMap], directory: str, alpha: float = 0.5) -> None:
    for frame, label_map in zip(sequence, labels):
        buffer = io.BytesIO()
        Image.fromarray(overlay(frame, label_map, alpha)).save(buffer, format='PNG')
        atomic_write_bytes(os.path.join(directory, frame_name(frame.index)), buffer.getvalue())


def encode_prob_map(prob: ProbMap) -> bytes:
    height, width = prob.shape
    return _HEADER.pack(PROB_MAGIC, width, height) + np.ascontiguousarray(prob, dtype='<f4').tobytes()


def decode_prob_map(data: bytes) -> ProbMap:
    if len(data) < _HEADER.size:
        raise SequenceError('Probability dump is truncated')
    magic, width, height = _HEADER.unpack_from(data)
    if magic != PROB_MAGIC:
        raise SequenceError(f'Not a probability dump (magic {magic!r})')
    expected = _HEADER.size + width * height * 4
    if len(data) != expected:
        raise SequenceError(f'Probability dump has {len(data)} bytes, expected {expected}')
    return np.frombuffer(data, dtype='<f4', offset=_HEADER.size).reshape(height, width).astype(np.float32)


def write_prob_map(path: str, prob: ProbMap) -> None:
    atomic_write_bytes(path, encode_prob_map(prob))


def read_prob_map(path: str) -> ProbMap:
    with open(path, 'rb') as fh:
        return decode_prob_map(fh.read())
