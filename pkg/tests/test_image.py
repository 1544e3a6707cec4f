import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from compface.image import FaceImage, PgmError, decode_pgm, decode_pgm_raw, encode_pgm, load_image, save_image


def test_face_image_rejects_bad_shapes():
    with pytest.raises(ValueError):
        FaceImage(np.zeros((0, 4), np.uint8))
    with pytest.raises(ValueError):
        FaceImage(np.zeros(16, np.uint8))
    with pytest.raises(TypeError):
        FaceImage(np.zeros((4, 4), np.float64))


def test_face_image_is_read_only_copy():
    src = np.arange(12, dtype=np.uint8).reshape(3, 4)
    img = FaceImage(src)
    src[0, 0] = 99
    assert img.pixels[0, 0] == 0
    assert (img.width, img.height) == (4, 3)
    with pytest.raises(ValueError):
        img.pixels[0, 0] = 1


def test_from_float_rounds_and_clips():
    img = FaceImage.from_float(np.array([[-3.0, 0.4, 0.6, 254.5, 300.0]]))
    assert img.pixels.tolist() == [[0, 0, 1, 254, 255]]


def test_sha256_depends_on_shape():
    flat = FaceImage(np.zeros((2, 8), np.uint8))
    tall = FaceImage(np.zeros((8, 2), np.uint8))
    assert flat.sha256() != tall.sha256()
    assert flat == FaceImage(np.zeros((2, 8), np.uint8))
    assert hash(flat) == hash(FaceImage(np.zeros((2, 8), np.uint8)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_pgm_round_trip(pixels):
    assert np.array_equal(decode_pgm(encode_pgm(pixels)), pixels)


def test_pgm_header_with_comments():
    data = b"P5\n# a comment\n3 1\n# another\n255\n\x01\x02\x03"
    assert decode_pgm(data).tolist() == [[1, 2, 3]]


def test_pgm_errors():
    with pytest.raises(PgmError):
        decode_pgm(b"P2\n1 1\n255\n0")
    with pytest.raises(PgmError):
        decode_pgm(b"P5\n2 2\n255\n\x00")
    with pytest.raises(PgmError):
        decode_pgm(b"P5\n1 1\n15\n\x00")  # only maxval 255 for images
    pixels, maxval = decode_pgm_raw(b"P5\n1 1\n15\n\x07")
    assert maxval == 15 and pixels.tolist() == [[7]]


def test_save_and_load(tmp_path):
    img = FaceImage(np.arange(20, dtype=np.uint8).reshape(4, 5))
    save_image(tmp_path / "x.pgm", img)
    assert load_image(tmp_path / "x.pgm") == img
