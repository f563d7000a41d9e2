import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from presched import channel as ch
from presched import scene as scn

GEOM = ch.ArrayGeometry(8, 8, 28e9)


class TestArrayResponse:
    def test_zero_angles_all_ones(self):
        a = ch.array_response(GEOM, 0.0, 0.0)
        np.testing.assert_allclose(a, np.ones(64))

    @settings(max_examples=100, deadline=None, derandomize=True)
    @given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
    def test_norm_is_sqrt_nt(self, az, el):
        a = ch.array_response(GEOM, az, el)
        assert math.isclose(np.linalg.norm(a) ** 2, 64.0, rel_tol=1e-12)

    def test_hand_evaluated_ordering(self):
        # 2x2 array, endfire azimuth: u = 1, v = 0 -> [1, 1, -1, -1]
        geom = ch.ArrayGeometry(2, 2, 28e9)
        a = ch.array_response(geom, math.pi / 2, 0.0)
        np.testing.assert_allclose(a, [1, 1, -1, -1], atol=1e-12)


class TestLargeScaleGain:
    def test_one_meter_one_ghz(self):
        amp = ch.large_scale_gain(1.0, 1e9, 0.0)
        assert math.isclose(-20 * math.log10(amp), 31.84, rel_tol=1e-12)

    def test_ten_meters_28ghz(self):
        # 31.84 + 21.5 + 19 log10(28) = 80.836..., frozen independently
        amp = ch.large_scale_gain(10.0, 28e9, 0.0)
        assert math.isclose(-20 * math.log10(amp), 80.83600259550217, rel_tol=1e-12)

    def test_doubling_distance_costs_6_47_db(self):
        for f_c in (1e9, 6e9, 28e9):
            a1 = ch.large_scale_gain(7.0, f_c, 0.0)
            a2 = ch.large_scale_gain(14.0, f_c, 0.0)
            delta_db = 20 * math.log10(a1 / a2)
            assert math.isclose(delta_db, 21.5 * math.log10(2), rel_tol=1e-12)

    def test_monotone_in_distance(self):
        amps = [ch.large_scale_gain(r, 28e9, 0.3) for r in np.linspace(1, 50, 40)]
        assert all(a > b for a, b in zip(amps, amps[1:]))

    def test_rejects_nonpositive_distance(self):
        with pytest.raises(ValueError):
            ch.large_scale_gain(0.0, 28e9, 0.0)


class TestScattererField:
    def test_collinear_path_distance(self):
        bounds = np.array([[0.0, 20.0], [0.0, 20.0]])
        field = ch.NlosScattererField(bounds, l_max=1, p_keep=1.0, p_birth=0.0)
        bs = scn.vec3(0, 0, 2)
        user = scn.vec3(0, 10, 2)
        beyond = scn.vec3(0, 14, 2)  # collinear, 4 m past the user
        field._scatterers = [ch._Scatterer(beyond, 0)]
        paths = field.advance(bs, user, 28e9, 0.0, np.random.default_rng(0))
        assert len(paths) == 1
        assert math.isclose(paths[0].distance, 10.0 + 2 * 4.0, rel_tol=1e-12)

    def test_persistent_geometry_fresh_gains(self):
        bounds = np.array([[0.0, 20.0], [0.0, 20.0]])
        field = ch.NlosScattererField(bounds, l_max=3, p_keep=1.0, p_birth=0.0)
        rng = np.random.default_rng(1)
        bs, user = scn.vec3(0, 0, 3), scn.vec3(6, 7, 1.5)
        first = field.advance(bs, user, 28e9, 0.0, rng)
        second = field.advance(bs, user, 28e9, 0.0, rng)
        assert [p.azimuth for p in first] == [p.azimuth for p in second]
        assert [p.distance for p in first] == [p.distance for p in second]
        assert all(p1.gain != p2.gain for p1, p2 in zip(first, second))

    def test_population_census_against_markov_oracle(self):
        # path counts stay in [1, L_max]; the mean matches an independent
        # simulation of the birth/death integer chain
        bounds = np.array([[0.0, 20.0], [0.0, 20.0]])
        p_keep, p_birth, l_max = 0.85, 0.4, 3
        field = ch.NlosScattererField(bounds, l_max, p_keep, p_birth)
        rng = np.random.default_rng(2)
        bs, user = scn.vec3(0, 0, 3), scn.vec3(5, 5, 1.5)
        counts = []
        for _ in range(10_000):
            counts.append(len(field.advance(bs, user, 28e9, 0.0, rng)))
        counts = np.array(counts)
        assert counts.min() >= 1 and counts.max() <= l_max

        oracle_rng = np.random.default_rng(3)
        level, oracle_counts = 1, []
        for _ in range(200_000):
            level = int(np.sum(oracle_rng.uniform(size=level) < p_keep))
            if level < l_max and oracle_rng.uniform() < p_birth:
                level += 1
            if level == 0:
                level = 1
            oracle_counts.append(level)
        assert abs(counts.mean() - np.mean(oracle_counts)) < 0.05


class TestComposeChannel:
    def test_no_paths_zero_vector(self):
        params = ch.ChannelParams(0, 0, None, [])
        np.testing.assert_array_equal(ch.compose_channel(params, GEOM), np.zeros(64))

    def test_unit_gain_phase_free_path(self):
        # distance chosen so the propagation phase is a whole number of turns
        geom = ch.ArrayGeometry(4, 4, 1e9)
        r = ch.SPEED_OF_LIGHT / 1e9 * 50
        path = ch.PathParams(1.0 + 0.0j, r, 0.4, -0.1)
        h = ch.compose_channel(ch.ChannelParams(0, 1, path, []), geom)
        np.testing.assert_allclose(h, ch.array_response(geom, 0.4, -0.1), atol=1e-9)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        los = ch.PathParams(0.5 + 0.2j, 12.0, 0.3, 0.05)
        nlos = [ch.PathParams(0.1 - 0.3j, 18.0, -0.4, 0.1),
                ch.PathParams(0.02 + 0.07j, 25.0, 0.9, -0.2)]
        full = ch.compose_channel(ch.ChannelParams(0, 1, los, nlos), GEOM)
        los_only = ch.compose_channel(ch.ChannelParams(0, 1, los, []), GEOM)
        nlos_only = ch.compose_channel(ch.ChannelParams(0, 0, None, nlos), GEOM)
        np.testing.assert_allclose(full, los_only + nlos_only, rtol=1e-12)

    def test_los_flag_gates_los_term(self):
        los = ch.PathParams(0.5 + 0.2j, 12.0, 0.3, 0.05)
        nlos = [ch.PathParams(0.1j, 15.0, 0.0, 0.0)]
        gated = ch.compose_channel(ch.ChannelParams(0, 0, None, nlos), GEOM)
        nlos_only = ch.compose_channel(ch.ChannelParams(0, 0, None, nlos), GEOM)
        np.testing.assert_array_equal(gated, nlos_only)


def test_channel_csv_dump(tmp_path):
    rows = [(0, 0, ch.ChannelParams(0, 1, ch.PathParams(1 + 1j, 10.0, 0.1, 0.0),
                                    [ch.PathParams(0.1j, 14.0, -0.2, 0.1)]))]
    path = tmp_path / "chan.csv"
    ch.dump_channel_csv(rows, str(path))
    text = path.read_text().splitlines()
    assert text[0].startswith("slot,user,los,path")
    assert len(text) == 3  # header + LoS row + one NLoS row
