import numpy as np
import pytest

from pyretalk.exceptions import (BadWindow, DegenerateAnchors, DimensionMismatch, NonInvertibleTransform,
                                 RatioOutOfRange)
from pyretalk.face_geometry import (CANONICAL_ANCHORS, LEFT_EYE, NOSE_TIP, RIGHT_EYE, AlignmentTransform,
                                    CoeffSequence, ExpressionTemplate, LandmarkTrack, align_face, anchors,
                                    estimate_alignment, interpolate_templates, load_template, replace_expression,
                                    save_template, smooth_landmarks, track_faces)
from pyretalk.toy import ToyLandmarkProvider, make_toy_sample


def _landmarks_with_anchors(points: np.ndarray) -> np.ndarray:
    landmarks = np.random.default_rng(0).uniform(0, 200, size=(68, 2))
    landmarks[LEFT_EYE] = points[0]
    landmarks[RIGHT_EYE] = points[1]
    landmarks[NOSE_TIP] = points[2]
    return landmarks


@pytest.fixture
def coeffs() -> CoeffSequence:
    rng = np.random.default_rng(1)
    return CoeffSequence(rng.normal(size=(12, 64)), rng.normal(size=(12, 6)))


@pytest.mark.parametrize('degree', [0, 1, 2])
def test_smoothing_reproduces_polynomials(degree):
    t = np.arange(30, dtype=np.float64)
    rng = np.random.default_rng(degree)
    coefficients = rng.normal(size=(degree + 1, 5, 2))
    points = sum(c * (t[:, None, None] / 10.0) ** power for power, c in enumerate(coefficients))
    smoothed = smooth_landmarks(LandmarkTrack(points), window=7, polyorder=2)
    assert np.max(np.abs(smoothed.points - points)) <= 1e-6


def test_smoothing_fits_truncated_window_at_the_ends():
    rng = np.random.default_rng(3)
    points = rng.normal(size=(12, 4, 2))
    smoothed = smooth_landmarks(LandmarkTrack(points), window=7, polyorder=2).points
    t = np.arange(12, dtype=np.float64)
    for frame, span in ((0, slice(0, 4)), (2, slice(0, 6)), (11, slice(8, 12)), (10, slice(7, 12))):
        for point in range(4):
            for axis in range(2):
                fit = np.polyfit(t[span], points[span, point, axis], 2)
                assert smoothed[frame, point, axis] == pytest.approx(np.polyval(fit, t[frame]), abs=1e-9)


def test_smoothing_lowers_degree_on_short_edge_windows():
    points = np.random.default_rng(4).normal(size=(9, 2, 2))
    smoothed = smooth_landmarks(LandmarkTrack(points), window=5, polyorder=3).points
    # three frames cannot carry a cubic; the quadratic through them interpolates
    assert np.allclose(smoothed[0], points[0])
    assert np.allclose(smoothed[-1], points[-1])
    assert np.all(np.isfinite(smoothed))


def test_smoothing_rejects_bad_windows():
    track = LandmarkTrack(np.zeros((10, 68, 2)))
    with pytest.raises(BadWindow):
        smooth_landmarks(track, window=6)
    with pytest.raises(BadWindow):
        smooth_landmarks(track, window=5, polyorder=5)
    with pytest.raises(BadWindow):
        smooth_landmarks(track, window=11)


def test_landmark_track_shape():
    with pytest.raises(DimensionMismatch):
        LandmarkTrack(np.zeros((10, 68)))
    track = LandmarkTrack(np.full((2, 68, 2), 5.0))
    assert track.within((10, 10))
    assert not track.within((4, 4))


@pytest.mark.parametrize('scale, rotation', [(1.0, 0.0), (0.5, 0.3), (2.0, -1.0)])
def test_alignment_maps_anchors_to_canonical(scale, rotation):
    size = 256
    canonical = CANONICAL_ANCHORS * size
    forward = AlignmentTransform(scale, rotation, 12.0, -7.0, size)
    source = forward.invert(canonical)
    transform = estimate_alignment(_landmarks_with_anchors(source), size)
    assert np.allclose(transform.apply(anchors(_landmarks_with_anchors(source))), canonical, atol=1e-6)
    assert transform.scale == pytest.approx(scale)
    assert transform.rotation == pytest.approx(rotation)


def test_alignment_rejects_degenerate_anchors():
    with pytest.raises(DegenerateAnchors):
        estimate_alignment(np.zeros((68, 2)))
    with pytest.raises(DegenerateAnchors):
        estimate_alignment(np.zeros((20, 2)))


def test_transform_round_trip():
    transform = AlignmentTransform(1.7, 0.4, 3.0, 9.0)
    points = np.random.default_rng(2).uniform(0, 100, size=(10, 2))
    assert np.allclose(transform.invert(transform.apply(points)), points)
    with pytest.raises(NonInvertibleTransform):
        AlignmentTransform(0.0, 0.0, 0.0, 0.0)


def test_align_face_crop_size():
    landmarks = _landmarks_with_anchors(np.array([[40.0, 50.0], [80.0, 50.0], [60.0, 75.0]]))
    crop, transform = align_face(np.zeros((120, 140, 3), np.uint8), landmarks, 64)
    assert crop.shape == (64, 64, 3)
    assert transform.size == 64


def test_windows(coeffs):
    windows = coeffs.windows(5)
    assert windows.shape == (12, 5, 70)
    assert np.array_equal(windows[0, 0], coeffs.stacked()[0])
    assert np.array_equal(windows[0, 2], coeffs.stacked()[0])
    assert np.array_equal(windows[-1, -1], coeffs.stacked()[-1])
    assert np.array_equal(windows[6, 2], coeffs.stacked()[6])
    with pytest.raises(BadWindow):
        coeffs.windows(4)


def test_coefficients_must_be_finite():
    with pytest.raises(DimensionMismatch):
        CoeffSequence(np.full((2, 4), np.inf), np.zeros((2, 6)))
    with pytest.raises(DimensionMismatch):
        CoeffSequence(np.zeros((2, 4)), np.zeros((3, 6)))


def test_replace_expression_keeps_pose(coeffs):
    template = ExpressionTemplate(np.linspace(0, 1, 64), 'ramp')
    replaced = replace_expression(coeffs, template)
    assert np.array_equal(replaced.pose, coeffs.pose)
    assert np.all(replaced.expression == template.expression)

    with pytest.raises(DimensionMismatch):
        replace_expression(coeffs, ExpressionTemplate(np.zeros(10)))


def test_interpolation_endpoints():
    neutral = load_template('neutral')
    smile = load_template('smile')
    assert np.array_equal(interpolate_templates(neutral, smile, 0.0).expression, neutral.expression)
    assert np.array_equal(interpolate_templates(neutral, smile, 1.0).expression, smile.expression)
    assert interpolate_templates(neutral, smile, 0.5).expression[1] == pytest.approx(0.5)
    with pytest.raises(RatioOutOfRange):
        interpolate_templates(neutral, smile, 1.5)
    with pytest.raises(DimensionMismatch):
        interpolate_templates(neutral, ExpressionTemplate(np.zeros(3)), 0.5)


def test_bundled_templates():
    neutral = load_template('neutral')
    assert neutral.label == 'neutral'
    assert neutral.expression.shape == (64,)
    assert not neutral.expression.any()
    assert load_template('smile').expression[1] == 1.0


def test_template_file(tmp_path):
    template = ExpressionTemplate(np.arange(4.0), 'custom', 'four values')
    path = tmp_path / 'custom.json'
    save_template(template, path)
    loaded = load_template(path)
    assert loaded.label == 'custom'
    assert np.array_equal(loaded.expression, template.expression)
    assert load_template(str(path)).description == 'four values'


def test_track_faces_on_toy_clip():
    sample = make_toy_sample(0, 0, seconds=0.4)
    track = track_faces(sample.video.frames, ToyLandmarkProvider(), size=128, window=7)
    assert len(track) == len(sample)
    assert track.crops.shape == (len(sample), 128, 128, 3)
    assert track.landmarks.points.shape == (len(sample), 68, 2)


def test_track_faces_short_clip(caplog):
    sample = make_toy_sample(0, 1, seconds=0.2)
    track = track_faces(sample.video.frames, ToyLandmarkProvider(), size=64, window=7)
    assert track.smoothed is track.landmarks
    assert 'shorter than the smoothing window' in caplog.text
