import numpy as np
import pytest
from PIL import Image

from core import Frame, VideoSequence
from sequence_io import (
    SequenceError,
    davis_palette,
    decode_prob_map,
    encode_prob_map,
    frame_name,
    load_masks,
    load_sequence,
    overlay,
    read_prob_map,
    save_frames,
    save_label_map,
    save_masks,
    write_prob_map,
)
from synthetic import generate, occlusion_scene


def write_rgb(path, height=6, width=8, value=100):
    Image.fromarray(np.full((height, width, 3), value, dtype=np.uint8)).save(path)


def test_frame_name_is_zero_padded():
    assert frame_name(3) == '00003.png'
    assert frame_name(12, '.vspm') == '00012.vspm'


def test_palette_starts_with_standard_colours():
    palette = davis_palette()
    assert len(palette) == 768
    assert palette[:12] == [0, 0, 0, 128, 0, 0, 0, 128, 0, 128, 128, 0]


def test_frames_survive_save_and_load(tmp_path):
    video = generate(occlusion_scene(), seed=0)
    save_frames(video.sequence, str(tmp_path))
    loaded = load_sequence(str(tmp_path))
    assert len(loaded) == len(video.sequence)
    for original, restored in zip(video.sequence, loaded):
        assert np.array_equal(original.pixels, restored.pixels)
        assert original.index == restored.index


def test_masks_are_indexed_pngs(tmp_path):
    labels = [np.array([[0, 1], [2, 3]], dtype=np.int32), np.zeros((2, 2), dtype=np.int32)]
    save_masks(labels, str(tmp_path))
    with Image.open(tmp_path / '00000.png') as image:
        assert image.mode == 'P'
        assert image.getpalette()[:6] == [0, 0, 0, 128, 0, 0]
    loaded = load_masks(str(tmp_path))
    assert all(np.array_equal(a, b) for a, b in zip(labels, loaded))
    assert not list(tmp_path.glob('*.tmp'))


def test_label_values_must_fit_palette(tmp_path):
    with pytest.raises(SequenceError):
        save_label_map(str(tmp_path / 'x.png'), np.full((2, 2), 300, dtype=np.int32))


def test_rgb_mask_is_rejected(tmp_path):
    write_rgb(tmp_path / '00000.png')
    with pytest.raises(SequenceError, match='indexed'):
        load_masks(str(tmp_path))


def test_corrupt_image_names_the_file(tmp_path):
    write_rgb(tmp_path / '00000.png')
    (tmp_path / '00001.png').write_bytes(b'not an image')
    with pytest.raises(SequenceError, match='00001.png'):
        load_sequence(str(tmp_path))
    with pytest.raises(SequenceError, match='00001.png'):
        load_masks(str(tmp_path))


def test_numbering_gap_is_reported(tmp_path):
    for index in (0, 1, 3):
        write_rgb(tmp_path / frame_name(index))
    with pytest.raises(SequenceError, match='00002'):
        load_sequence(str(tmp_path))


def test_size_mismatch_names_the_file(tmp_path):
    write_rgb(tmp_path / '00000.png')
    write_rgb(tmp_path / '00001.png', height=7)
    with pytest.raises(SequenceError, match='00001.png'):
        load_sequence(str(tmp_path))


def test_unnumbered_files_are_ignored(tmp_path):
    write_rgb(tmp_path / '00000.png')
    write_rgb(tmp_path / '00001.jpg')
    write_rgb(tmp_path / 'thumbnail.png')
    (tmp_path / 'notes.txt').write_text('x')
    assert len(load_sequence(str(tmp_path))) == 2


def test_missing_directory_and_empty_directory(tmp_path):
    with pytest.raises(SequenceError, match='not found'):
        load_sequence(str(tmp_path / 'absent'))
    with pytest.raises(SequenceError, match='No numbered'):
        load_sequence(str(tmp_path))


def test_overlay_leaves_background_untouched():
    frame = Frame(np.full((2, 2, 3), 0.2, dtype=np.float32))
    labels = np.array([[0, 1], [0, 0]])
    out = overlay(frame, labels, alpha=0.5)
    assert out.dtype == np.uint8
    assert out[0, 0].tolist() == [51, 51, 51]
    expected = np.array([0.1 + 0.5 * 128 / 255, 0.1, 0.1]) * 255
    assert np.abs(out[0, 1] - expected).max() <= 1.0


def test_prob_map_file_layout(tmp_path):
    prob = np.linspace(0.0, 1.0, 12, dtype=np.float32).reshape(3, 4)
    path = tmp_path / 'p.vspm'
    write_prob_map(str(path), prob)
    data = path.read_bytes()
    assert data[:4] == b'VSPM'
    assert int.from_bytes(data[4:8], 'little') == 4
    assert int.from_bytes(data[8:12], 'little') == 3
    assert len(data) == 12 + 12 * 4
    assert np.array_equal(read_prob_map(str(path)), prob)


def test_prob_map_decode_errors():
    data = encode_prob_map(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(SequenceError, match='truncated'):
        decode_prob_map(data[:5])
    with pytest.raises(SequenceError, match='bytes'):
        decode_prob_map(data[:-1])
    with pytest.raises(SequenceError, match='magic'):
        decode_prob_map(b'NOPE' + data[4:])


def test_save_frames_writes_numbered_pngs(tmp_path):
    save_frames(VideoSequence([Frame(np.zeros((3, 3, 3), np.float32)), Frame(np.zeros((3, 3, 3), np.float32))]),
                str(tmp_path))
    assert sorted(p.name for p in tmp_path.iterdir()) == ['00000.png', '00001.png']
