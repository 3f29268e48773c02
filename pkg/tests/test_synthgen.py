import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixc import synthgen as sg
from mixc.synthgen import SprayParams, class_of, render_spray


def ridge_count(profile: np.ndarray, rel_height: float = 0.5) -> int:
    """Number of local maxima (plateaus count once) at or above rel_height * peak."""
    vals = [profile[0]]
    for v in profile[1:]:
        if v != vals[-1]:
            vals.append(v)
    floor = rel_height * max(vals)
    peaks = 0
    for i, v in enumerate(vals):
        left = vals[i - 1] if i > 0 else -np.inf
        right = vals[i + 1] if i + 1 < len(vals) else -np.inf
        if v > left and v > right and v >= floor:
            peaks += 1
    return peaks


def mid_profile(img):
    return img[img.shape[0] // 2, :, 0]


def test_ridge_oracle_on_handmade_profiles():
    assert ridge_count(np.array([0, 1, 0, 1, 0, 1, 0.0])) == 3
    assert ridge_count(np.array([0, 1, 1, 1, 0.0])) == 1
    assert ridge_count(np.array([0, 0.2, 0, 1, 0.0])) == 1


@pytest.mark.parametrize("seed", range(5))
def test_no_collapse_shows_discernible_plumes(seed):
    img = render_spray(SprayParams(collapse=0.0, n_plumes=6, noise_sigma=0.0), 64, seed)
    assert ridge_count(mid_profile(img), rel_height=0.0) >= 3


@pytest.mark.parametrize("seed", range(5))
def test_full_collapse_is_single_plume(seed):
    img = render_spray(SprayParams(collapse=1.0, n_plumes=6, noise_sigma=0.0), 64, seed)
    assert ridge_count(mid_profile(img)) == 1


def test_pre_post_frames_are_dark():
    # 99.9th-percentile-free bound: max over 200 rendered frames, both sizes
    peaks = [render_spray(SprayParams(phase="pre_post", noise_sigma=0.02), size, seed).max()
             for size in (64, 224) for seed in range(100)]
    assert max(peaks) < 0.15


def test_render_values_and_determinism():
    p = SprayParams(collapse=0.4, annotate="white_dotted_box")
    a, b = render_spray(p, 64, 5), render_spray(p, 64, 5)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (64, 64, 1)
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, render_spray(p, 64, 6))


def test_render_rejects_small_size():
    with pytest.raises(ValueError, match="size < 16"):
        render_spray(SprayParams(), 8, 0)


def test_red_box_only_in_first_channel():
    img = render_spray(SprayParams(annotate="red_solid_box", noise_sigma=0.0), 64, 1, channels=3)
    diff = img[:, :, 0] - img[:, :, 1]
    assert np.any(diff > 0.5)
    assert np.array_equal(img[:, :, 1], img[:, :, 2])
    plain = render_spray(SprayParams(noise_sigma=0.0), 64, 1, channels=3)
    assert np.array_equal(plain[:, :, 0], plain[:, :, 1])


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 10), st.floats(5, 60), st.floats(-10, 10))
def test_angular_spread_non_increasing_in_collapse(c1, c2, n, half, tilt):
    lo, hi = sorted((c1, c2))
    a = sg.angular_spread(SprayParams(n_plumes=n, collapse=lo, cone_half_angle=half, tilt=tilt))
    b = sg.angular_spread(SprayParams(n_plumes=n, collapse=hi, cone_half_angle=half, tilt=tilt))
    assert b <= a + 1e-12


@pytest.mark.parametrize("c, expected", [
    (0.0, sg.NO_COLLAPSE), (0.3499, sg.NO_COLLAPSE), (0.35, sg.TRANSITIONAL),
    (0.6999, sg.TRANSITIONAL), (0.7, sg.COLLAPSE), (1.0, sg.COLLAPSE),
])
def test_class_of(c, expected):
    assert class_of(c) == expected


def test_class_of_pre_post_ignores_c():
    assert class_of(0.9, "pre_post") == sg.PRE_POST


# ---------------------------------------------------------------------------
# datasets


def test_default_split_sizes():
    sizes = sg.split_counts(sg.DEFAULT_COUNTS)
    totals = {k: sum(v) for k, v in sizes.items()}
    # 878 = 658 + 132 + 88 (largest-remainder rounding of 75/15/10)
    assert totals == {"train": 658, "val": 132, "test": 88}
    assert sum(totals.values()) == 878


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 400), min_size=4, max_size=4))
def test_split_counts_reconcile(counts):
    sizes = sg.split_counts(counts)
    for k in range(4):
        assert sum(sizes[s][k] for s in sizes) == counts[k]
        for name, frac in sg.SPLIT_FRACTIONS:
            assert sizes[name][k] >= 0
    total = sum(counts)
    expected = sg.apportion(total, [f for _, f in sg.SPLIT_FRACTIONS])
    assert [sum(sizes[n]) for n, _ in sg.SPLIT_FRACTIONS] == expected
    for k in range(4):
        assert abs(sizes["test"][k] - 0.10 * counts[k]) < 1 + 1e-9
        assert abs(sizes["train"][k] - 0.75 * counts[k]) < 1 + 1e-9


def test_test_split_stratification_default_counts():
    test = sg.split_counts(sg.DEFAULT_COUNTS)["test"]
    assert sum(test) == 88
    for n, t in zip(sg.DEFAULT_COUNTS, test):
        assert abs(t - 0.1 * n) <= 1


@pytest.fixture(scope="module")
def small():
    return sg.build_dataset((12, 12, 12, 12), 32, seed=3)


def test_build_dataset_contract(small):
    manifest, images = small
    assert images.shape == (48, 32, 32)
    assert manifest.class_counts() == [12, 12, 12, 12]
    assert sum(manifest.split_sizes().values()) == 48
    for e in manifest.entries:
        m = e.meta
        assert not m.corrupted
        assert m.assigned_class == class_of(m.true_collapse, m.phase)
        assert sum(e.label) == 1.0
        if m.phase == "active":
            lo, hi = sg.CLASS_INTERVALS[m.assigned_class]
            assert lo <= m.true_collapse <= hi
    n_annot = sum(e.meta.annotate != "none" for e in manifest.entries)
    assert n_annot == round(0.3 * 48)


def test_build_dataset_deterministic(small):
    manifest, images = sg.build_dataset((12, 12, 12, 12), 32, seed=3)
    assert images.tobytes() == small[1].tobytes()
    assert manifest.to_dict() == small[0].to_dict()


def test_build_dataset_validation():
    with pytest.raises(ValueError):
        sg.build_dataset((0, 1, 1, 1), 32, 0)
    with pytest.raises(ValueError, match="size < 16"):
        sg.build_dataset((1, 1, 1, 1), 8, 0)


def test_samples_rendered_independently_of_order():
    # sample k's stream depends only on (seed, k)
    m1, im1 = sg.build_dataset((3, 3, 3, 3), 32, seed=9)
    rng = np.random.default_rng(sg.sample_seed(9, 5))
    kind = m1.entries[5].meta.annotate
    annotated = kind != "none"
    if annotated:
        rng.integers(0, 3)
    params = sg.sample_params(m1.entries[5].meta.original_class, rng, kind)
    assert np.array_equal(render_spray(params, 32, rng)[:, :, 0], im1[5])


# ---------------------------------------------------------------------------
# corruption


@pytest.fixture(scope="module")
def full_manifest():
    # labels only; images are not needed for corruption
    return sg.build_dataset(sg.DEFAULT_COUNTS, 16, seed=0)[0]


def test_zero_fraction_only_adds_provenance(full_manifest):
    out = sg.corrupt_labels(full_manifest, "random", 0.0, seed=1)
    assert len(out.provenance) == len(full_manifest.provenance) + 1
    out.provenance = full_manifest.provenance
    assert out.to_dict() == full_manifest.to_dict()


def test_random_corruption_80_percent(full_manifest):
    out = sg.corrupt_labels(full_manifest, "random", 0.8, seed=2)
    flipped = [e for e in out.entries if e.meta.corrupted]
    assert len(flipped) in (702, 703)
    for e in flipped:
        assert e.meta.assigned_class != e.meta.original_class
        assert e.label[e.meta.assigned_class] == 1.0
    assert all(e.meta.assigned_class == e.meta.original_class for e in out.entries if not e.meta.corrupted)


def test_boundary_corruption_adjacent(full_manifest):
    out = sg.corrupt_labels(full_manifest, "boundary", 0.2, seed=3, delta=0.05)
    flipped = [e for e in out.entries if e.meta.corrupted]
    assert flipped
    adjacent = {(1, 2), (2, 1), (2, 3), (3, 2)}
    for e in flipped:
        assert (e.meta.original_class, e.meta.assigned_class) in adjacent
        assert min(abs(e.meta.true_collapse - t) for t in sg.THRESHOLDS) < 0.05
    active = sum(e.meta.phase == "active" for e in out.entries)
    eligible = sum(e.meta.phase == "active" and min(abs(e.meta.true_collapse - t) for t in sg.THRESHOLDS) < 0.05
                   for e in out.entries)
    assert len(flipped) == min(round(0.2 * active), eligible)


def test_boundary_corruption_reports_exhaustion(full_manifest):
    out = sg.corrupt_labels(full_manifest, "boundary", 1.0, seed=3, delta=0.01)
    assert "exhausted" in out.provenance[-1]


def test_corruption_restricted_to_splits(full_manifest):
    out = sg.corrupt_labels(full_manifest, "boundary", 0.2, seed=4, splits=("train",))
    assert all(e.split == "train" for e in out.entries if e.meta.corrupted)
    assert not any(e.meta.corrupted for e in full_manifest.entries)


def test_corruption_validation(full_manifest):
    with pytest.raises(ValueError):
        sg.corrupt_labels(full_manifest, "random", 1.5, seed=0)
    with pytest.raises(ValueError):
        sg.corrupt_labels(full_manifest, "boundary", 0.1, seed=0, delta=0)
    with pytest.raises(ValueError):
        sg.corrupt_labels(full_manifest, "sideways", 0.1, seed=0)
