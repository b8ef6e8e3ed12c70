"""Access scheme tests: reference layouts, disjointness, cardinality."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddlink.access import (
    ddma_mask,
    ddodma_mask,
    ddoidma_mask,
    dodma_mask,
    mask_to_csv,
    oma_mask,
    uniform_power,
)
from ddlink.grid import FrameParams

P44 = FrameParams(M=4, N=4, delta_f=15e3)


def test_ddma_reference_layout():
    mask = ddma_mask(P44, 4)
    for i in range(4):
        expected = np.zeros((4, 4))
        expected[i, :] = 1
        assert np.array_equal(mask.s[:, :, i], expected)


def test_ddma_single_user_full_grid():
    assert np.all(ddma_mask(P44, 1).s[:, :, 0] == 1)


def test_ddma_counting_m64():
    params = FrameParams(M=64, N=16, delta_f=15e3)
    mask = ddma_mask(params, 4)
    assert np.all(mask.blocks_per_user() == 16 * 16)
    assert np.all(mask.s.sum(axis=2) == 1)


def test_ddma_divisibility_error():
    with pytest.raises(ValueError, match="DDMA"):
        ddma_mask(FrameParams(M=6, N=4, delta_f=15e3), 4)


def test_dodma_reference_layout_and_errors():
    mask = dodma_mask(P44, 4)
    for i in range(4):
        expected = np.zeros((4, 4))
        expected[:, i] = 1
        assert np.array_equal(mask.s[:, :, i], expected)
    assert np.all(dodma_mask(P44, 1).s == 1)
    with pytest.raises(ValueError, match="DoDMA"):
        dodma_mask(FrameParams(M=4, N=6, delta_f=15e3), 4)


def test_ddodma_quadrants():
    mask = ddodma_mask(P44, 4)
    # user 0 top-left tile, user 3 bottom-right tile
    assert np.all(mask.s[:2, :2, 0] == 1) and mask.blocks_per_user()[0] == 4
    assert np.all(mask.s[2:, 2:, 3] == 1)
    assert np.all(mask.s.sum(axis=2) == 1)
    with pytest.raises(ValueError, match="square"):
        ddodma_mask(P44, 2)


def test_ddodma_single_user():
    assert np.all(ddodma_mask(P44, 1).s == 1)


def test_ddoidma_interleaved_pattern():
    mask = ddoidma_mask(P44, 4, g1=2, g2=2)
    # user 0: even rows, even columns; user 1 shifts along delay; user 2 along Doppler
    assert np.array_equal(np.argwhere(mask.s[:, :, 0]), [[0, 0], [0, 2], [2, 0], [2, 2]])
    assert np.array_equal(np.argwhere(mask.s[:, :, 1]), [[1, 0], [1, 2], [3, 0], [3, 2]])
    assert np.array_equal(np.argwhere(mask.s[:, :, 2]), [[0, 1], [0, 3], [2, 1], [2, 3]])
    assert np.all(mask.s.sum(axis=2) == 1)
    assert np.all(mask.blocks_per_user() == 4)


def test_ddoidma_delay_comb_specialization():
    mask = ddoidma_mask(P44, 4, g1=4, g2=1)
    for i in range(4):
        expected = np.zeros((4, 4))
        expected[i, :] = 1  # one delay row per user, interleaved with period 4
        assert np.array_equal(mask.s[:, :, i], expected)


def test_ddoidma_requires_factors_for_nonsquare_k():
    with pytest.raises(ValueError, match="g1"):
        ddoidma_mask(FrameParams(M=6, N=4, delta_f=15e3), 6)
    mask = ddoidma_mask(FrameParams(M=6, N=4, delta_f=15e3), 6, g1=3, g2=2)
    assert np.all(mask.blocks_per_user() == 4)


def test_oma_mask_by_name():
    assert np.array_equal(oma_mask("DDMA", P44, 4).s, ddma_mask(P44, 4).s)
    with pytest.raises(ValueError, match="unknown access scheme"):
        oma_mask("tdma", P44, 4)


def test_uniform_power_levels_and_total():
    p22 = FrameParams(M=2, N=2, delta_f=15e3)
    grid = uniform_power(ddma_mask(p22, 1), 4.0)
    assert np.all(grid.rho == 1.0)
    grid = uniform_power(ddma_mask(P44, 4), 16.0)
    assert np.all(grid.rho[ddma_mask(P44, 4).s == 1] == 1.0)
    assert grid.total() == pytest.approx(16.0, abs=1e-12)


def test_mask_csv_export(tmp_path):
    path = tmp_path / "mask.csv"
    mask_to_csv(ddma_mask(P44, 4), path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "l,k,user"
    assert len(lines) == 1 + 16
    assert "0,0,0" in lines


@given(
    mk=st.sampled_from([(4, 4, 1), (4, 4, 2), (4, 4, 4), (8, 4, 4), (16, 8, 4), (8, 8, 4)]),
    scheme=st.sampled_from(["ddma", "dodma", "ddodma", "ddoidma"]),
)
@settings(max_examples=30, deadline=None)
def test_property_partition_and_determinism(mk, scheme):
    M, N, K = mk
    params = FrameParams(M=M, N=N, delta_f=15e3)
    if scheme in ("ddodma", "ddoidma") and int(np.sqrt(K)) ** 2 != K:
        return
    mask = oma_mask(scheme, params, K)
    again = oma_mask(scheme, params, K)
    assert np.array_equal(mask.s, again.s)
    assert np.all(mask.s.sum(axis=2) == 1)  # exact partition for divisible setups
    assert np.all(mask.blocks_per_user() == M * N // K)
