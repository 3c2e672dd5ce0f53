"""ProfileSet invariants, centering, and post-calibration tests."""
import numpy as np
import pytest

from gpcalib.model import (
    CalibrationFactors,
    ProfileSet,
    center_profiles,
    post_calibrate,
    uncenter_profiles,
    validate,
)


def make_ps(n=5, m=3, seed=0):
    rng = np.random.default_rng(seed)
    return ProfileSet(
        positions=np.linspace(0, 1, n),
        data=rng.normal(size=(n, m)),
        mask=np.ones((n, m), dtype=bool),
        channel_ids=[f"c{i}" for i in range(n)],
        profile_ids=[f"p{j}" for j in range(m)],
    )


def test_validate_clean_set_is_empty():
    assert validate(make_ps()) == []


def test_validate_flags_duplicate_positions():
    ps = make_ps()
    pos = ps.positions.copy()
    pos[1] = pos[0]
    bad = ProfileSet(positions=pos, data=ps.data,
                     mask=ps.mask, channel_ids=ps.channel_ids,
                     profile_ids=ps.profile_ids)
    assert any("non-increasing positions" in v for v in validate(bad))


def test_validate_flags_non_finite_values():
    ps = make_ps()
    data = ps.data.copy()
    data[2, 1] = np.nan
    bad = ProfileSet(positions=ps.positions, data=data, mask=ps.mask,
                     channel_ids=ps.channel_ids, profile_ids=ps.profile_ids)
    msgs = validate(bad)
    assert msgs and any("c2" in v and "p1" in v for v in msgs)


def test_validate_flags_underpopulated_profile():
    ps = make_ps()
    mask = ps.mask.copy()
    mask[:, 0] = False
    mask[0, 0] = True
    bad = ProfileSet(positions=ps.positions, data=ps.data, mask=mask,
                     channel_ids=ps.channel_ids, profile_ids=ps.profile_ids)
    assert any("p0" in v for v in validate(bad))


def test_center_profiles_zeroes_masked_means():
    ps = make_ps(6, 4, seed=1)
    mask = ps.mask.copy()
    mask[0, 2] = False
    ps = ProfileSet(positions=ps.positions, data=ps.data, mask=mask,
                    channel_ids=ps.channel_ids, profile_ids=ps.profile_ids)
    centered, means = center_profiles(ps)
    for j in range(4):
        active = centered.mask[:, j]
        assert centered.data[active, j].mean() == pytest.approx(0.0, abs=1e-14)
        assert means[j] == pytest.approx(ps.data[active, j].mean())


def test_center_uncenter_round_trip():
    # [TRIVIAL] uncenter(center(ps)) == ps on masked-in entries
    ps = make_ps(6, 4, seed=2)
    centered, means = center_profiles(ps)
    back = uncenter_profiles(centered, means)
    assert np.allclose(back.data[ps.mask], ps.data[ps.mask])


def test_post_calibrate_divides_by_gain():
    # [TRIVIAL] calibrated value = raw value / a_i
    ps = make_ps(4, 2, seed=3)
    cf = CalibrationFactors(np.log(np.array([0.5, 1.0, 2.0, 1.25])))
    out = post_calibrate(ps, cf)
    assert np.allclose(out.data, ps.data / cf.a[:, None])


def test_calibration_factors_inverse():
    cf = CalibrationFactors(np.array([0.2, -0.3]))
    assert np.allclose(cf.inverse().a * cf.a, 1.0)


def test_profile_set_exposes_counts():
    ps = make_ps(7, 2)
    assert ps.n_channels == 7
    assert ps.n_profiles == 2
