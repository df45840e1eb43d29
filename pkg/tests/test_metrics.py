import math

import numpy as np
import pytest

from volsr.metrics import (
    EVAL_FIELDS,
    FEATURE_DISTANCE_NOTE,
    MetricsError,
    MetricsReport,
    default_data_range,
    eval_row,
    evaluate_pair,
    feature_distance,
    psnr,
    ssim3d,
)
from volsr.models import FeatureExtractor2D
from volsr.volume import Volume

from oracles import direct_psnr, direct_ssim3d


class TestSsim:
    def test_matches_direct_formula_oracle(self, rng):
        for _ in range(3):
            a = rng.normal(size=(16, 16, 16))
            b = a + rng.normal(scale=0.1, size=a.shape)
            dr = float(max(a.max() - a.min(), b.max() - b.min()))
            assert abs(ssim3d(a, b, dr) - direct_ssim3d(a, b, dr)) < 1e-8

    def test_identity_is_exactly_one(self, rng):
        a = rng.normal(size=(16, 16, 16))
        assert ssim3d(a, a, float(a.max() - a.min())) == 1.0

    def test_scale_covariance(self, rng):
        # Scaling both inputs and the dynamic range together leaves every
        # term of the SSIM map invariant.
        a = rng.normal(size=(12, 12, 12))
        b = a + rng.normal(scale=0.2, size=a.shape)
        dr = float(a.max() - a.min())
        base = ssim3d(a, b, dr)
        scaled = ssim3d(3.0 * a, 3.0 * b, 3.0 * dr)
        assert scaled == pytest.approx(base, abs=1e-12)

    def test_decreases_with_noise(self, rng):
        a = rng.normal(size=(14, 14, 14))
        dr = float(a.max() - a.min())
        light = ssim3d(a, a + rng.normal(scale=0.01, size=a.shape), dr)
        heavy = ssim3d(a, a + rng.normal(scale=0.5, size=a.shape), dr)
        assert heavy < light < 1.0

    def test_accepts_volume_inputs(self, rng):
        data = rng.normal(size=(12, 12, 12)).astype(np.float32)
        v = Volume(data)
        assert ssim3d(v, v, 1.0) == 1.0

    def test_rejects_small_volumes(self, rng):
        small = rng.normal(size=(8, 16, 16))
        with pytest.raises(MetricsError):
            ssim3d(small, small, 1.0)

    def test_rejects_shape_mismatch(self, rng):
        with pytest.raises(MetricsError):
            ssim3d(rng.normal(size=(12, 12, 12)), rng.normal(size=(12, 12, 14)), 1.0)

    def test_rejects_bad_data_range(self, rng):
        a = rng.normal(size=(12, 12, 12))
        with pytest.raises(MetricsError):
            ssim3d(a, a, 0.0)


class TestPsnr:
    def test_matches_direct_formula(self, rng):
        a = rng.normal(size=(16, 16, 16))
        b = a + rng.normal(scale=0.05, size=a.shape)
        dr = float(a.max() - a.min())
        assert abs(psnr(a, b, dr) - direct_psnr(a, b, dr)) < 1e-9

    def test_hand_computed_value(self):
        a = np.zeros((4, 4, 4))
        b = np.full((4, 4, 4), 0.2)
        # mse = 0.04, range = 2: psnr = 10*log10(4 / 0.04) = 20 dB.
        assert psnr(a, b, 2.0) == pytest.approx(20.0, abs=1e-9)

    def test_identity_is_infinite(self, rng):
        a = rng.normal(size=(8, 8, 8))
        assert math.isinf(psnr(a, a, 1.0))

    def test_more_noise_is_lower(self, rng):
        a = rng.normal(size=(8, 8, 8))
        assert psnr(a, a + 0.3, 1.0) < psnr(a, a + 0.1, 1.0)


class TestFeatureDistance:
    def test_zero_on_identical(self, rng):
        fx = FeatureExtractor2D.create(seed=0)
        a = rng.normal(size=(8, 8, 8))
        assert feature_distance(a, a.copy(), fx) == 0.0

    def test_positive_on_different(self, rng):
        fx = FeatureExtractor2D.create(seed=0)
        a = rng.normal(size=(8, 8, 8))
        b = rng.normal(size=(8, 8, 8))
        assert feature_distance(a, b, fx) > 0.0

    def test_note_names_what_it_is_not(self):
        assert "not LPIPS" in FEATURE_DISTANCE_NOTE
        assert "FID" in FEATURE_DISTANCE_NOTE


class TestEvaluatePair:
    def test_report_fields(self, rng):
        hr = Volume(rng.uniform(0, 1, size=(16, 16, 16)))
        sr = Volume(np.clip(hr.data + rng.normal(scale=0.05, size=hr.shape), 0, 1))
        rep = evaluate_pair(sr, hr)
        assert isinstance(rep, MetricsReport)
        assert 0 < rep.ssim < 1
        assert rep.psnr > 10
        assert rep.data_range == pytest.approx(default_data_range(hr))
        assert rep.feature_distance is None

    def test_with_feature_extractor(self, rng):
        fx = FeatureExtractor2D.create(seed=0)
        hr = Volume(rng.uniform(0, 1, size=(12, 12, 12)))
        rep = evaluate_pair(hr, hr, fx=fx)
        assert rep.feature_distance == 0.0
        assert rep.ssim == 1.0

    def test_eval_row_layout(self, rng):
        hr = Volume(rng.uniform(0, 1, size=(12, 12, 12)))
        rep = evaluate_pair(hr, hr)
        row = eval_row("vol7", "model", rep)
        assert len(row) == len(EVAL_FIELDS)
        assert row[0] == "vol7"
        assert row[1] == "model"
        assert row[4] == ""  # absent feature distance stays blank in CSV
        assert EVAL_FIELDS == (
            "volume_id", "method", "ssim", "psnr", "feature_distance", "data_range"
        )

    def test_explicit_data_range_overrides_default(self, rng):
        hr = Volume(rng.uniform(0, 1, size=(12, 12, 12)))
        sr = Volume(hr.data + 0.01)
        rep = evaluate_pair(sr, hr, data_range=5.0)
        assert rep.data_range == 5.0
