import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clshead.errors import ValidationError
from clshead.features import FeatureSet, Manifest
from clshead.layers import make_rng
from clshead.similarity import build_similarity_report, class_similarity


def logits_with_max_prob(p: float, n_images: int = 1, hot: int = 0) -> np.ndarray:
    """1000-way logits whose softmax maximum is exactly p (one runner-up,
    everything else pushed to effectively zero probability)."""
    out = np.full((n_images, 1000), -1e9, dtype=np.float32)
    out[:, hot] = math.log(p / (1.0 - p))
    out[:, (hot + 1) % 1000] = 0.0
    return out


class TestClassSimilarity:
    def test_saturated_one_hot(self):
        logits = np.zeros((3, 1000), dtype=np.float32)
        logits[:, 7] = 1e6
        pct, nearest = class_similarity(logits)
        assert pct == pytest.approx(100.0, abs=1e-6)
        assert nearest == 7

    def test_uniform_logits_floor(self):
        pct, nearest = class_similarity(np.zeros((2, 1000), dtype=np.float32))
        assert pct == pytest.approx(0.1, abs=1e-9)
        assert nearest == 0  # tie broken toward the lowest index

    def test_mean_of_two_maxima(self):
        # per-image maxima 0.8 and 0.6 average to 70%
        logits = np.concatenate(
            [logits_with_max_prob(0.8), logits_with_max_prob(0.6)]
        )
        pct, _ = class_similarity(logits)
        assert pct == pytest.approx(70.0, abs=1e-4)

    def test_wrong_dim_rejected(self):
        with pytest.raises(ValidationError):
            class_similarity(np.zeros((2, 512), dtype=np.float32))

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            class_similarity(np.zeros((0, 1000), dtype=np.float32))

    def test_accepts_featureset(self):
        fs = FeatureSet(
            "logits",
            np.zeros((2, 1, 1000), dtype=np.float32),
            [0, 0],
            ["a"],
        )
        pct, _ = class_similarity(fs)
        assert pct == pytest.approx(0.1, abs=1e-9)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=20)
    def test_bounds(self, seed):
        logits = (10 * make_rng(seed).standard_normal((4, 1000))).astype(np.float32)
        pct, nearest = class_similarity(logits)
        assert 0.1 <= pct <= 100.0
        assert 0 <= nearest < 1000

    @given(shift=st.floats(-50.0, 50.0))
    @settings(max_examples=20)
    def test_shift_invariance(self, shift):
        logits = make_rng(3).standard_normal((5, 1000)).astype(np.float32)
        base, _ = class_similarity(logits)
        shifted, _ = class_similarity(logits + np.float32(shift))
        assert shifted == pytest.approx(base, abs=1e-3)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=20)
    def test_permutation_invariance(self, seed):
        logits = make_rng(4).standard_normal((6, 1000)).astype(np.float32)
        perm = make_rng(seed).permutation(6)
        assert class_similarity(logits)[0] == pytest.approx(
            class_similarity(logits[perm])[0], abs=1e-12
        )


class TestReport:
    def make_logits_fs(self):
        rng = make_rng(5)
        data = np.zeros((6, 1, 1000), dtype=np.float32)
        # class a: confident on pretrained class 3; class b: uniform
        data[:3, 0, :] = logits_with_max_prob(0.9, 3, hot=3)[:, None, :].reshape(3, 1000)
        labels = np.array([0, 0, 0, 1, 1, 1])
        fs = FeatureSet("logits", data, labels, ["a", "b"])
        manifest = Manifest(class_names=["a", "b"], species={"S1": ["a"], "S2": ["b"]})
        return fs, manifest

    def test_species_mean_is_arithmetic_mean(self):
        fs, manifest = self.make_logits_fs()
        manifest = Manifest(class_names=["a", "b"], species={"S": ["a", "b"]})
        rep = build_similarity_report(fs, manifest)
        expected = np.mean([rep.classes["a"].similarity_pct, rep.classes["b"].similarity_pct])
        assert rep.species_mean["S"] == pytest.approx(expected, abs=1e-12)

    def test_report_fields(self):
        fs, manifest = self.make_logits_fs()
        rep = build_similarity_report(fs, manifest)
        assert rep.classes["a"].similarity_pct == pytest.approx(90.0, abs=1e-3)
        assert rep.classes["a"].nearest_pretrained_class == 3
        assert rep.classes["b"].similarity_pct == pytest.approx(0.1, abs=1e-9)
        assert sum(rep.classes["a"].histogram) == 3
        doc = rep.to_dict()
        assert set(doc) == {"classes", "species_mean"}
