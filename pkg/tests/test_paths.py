import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quasisure.errors import InvalidArgument
from quasisure.paths import (
    Grid,
    Path,
    PathEnsemble,
    make_grid,
    path_rng,
    read_binary,
    read_csv,
    restrict,
    sample_brownian,
    write_binary,
    write_csv,
)


def test_make_grid_examples():
    assert make_grid(1.0, 4).times.tolist() == [0, 0.25, 0.5, 0.75, 1.0]
    assert make_grid(1.0, 1).times.tolist() == [0, 1.0]
    g = make_grid(2.0, 8)
    assert np.allclose(g.dt, 0.25) and g.T == 2.0 and g.uniform


@pytest.mark.parametrize("T,N", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5), (math.inf, 3)])
def test_make_grid_rejects(T, N):
    with pytest.raises(InvalidArgument):
        make_grid(T, N)


def test_grid_validation():
    with pytest.raises(InvalidArgument):
        Grid([0.1, 0.2])
    with pytest.raises(InvalidArgument):
        Grid([0.0, 0.5, 0.5])
    g = Grid([0.0, 0.1, 0.3])
    assert not g.uniform
    with pytest.raises(InvalidArgument):
        g.index_of(0.2)
    assert g.index_of(0.3) == 2


def test_brownian_moments():
    g = make_grid(1.0, 1)
    n = 100_000
    BT = sample_brownian(g, 1, n, seed=11).terminal()[:, 0]
    assert abs(BT.mean()) <= 3 / math.sqrt(n)
    assert abs(BT.var() - 1.0) <= 0.03


def test_brownian_determinism_and_threads():
    g = make_grid(1.0, 50)
    a = sample_brownian(g, 2, 37, seed=5)
    b = sample_brownian(g, 2, 37, seed=5, threads=4)
    assert np.array_equal(a.values, b.values)
    # path i depends only on (seed, i)
    c = sample_brownian(g, 2, 7, seed=5, start=30)
    assert np.array_equal(a.values[30:], c.values)
    assert not np.array_equal(a.values, sample_brownian(g, 2, 37, seed=6).values)


def test_increment_independence():
    g = make_grid(1.0, 64)
    n = 4000
    dB = np.diff(sample_brownian(g, 1, n, seed=2).values[..., 0], axis=1)
    rng = np.random.default_rng(0)
    for _ in range(20):
        i, j = rng.choice(64, 2, replace=False)
        r = np.corrcoef(dB[:, i], dB[:, j])[0, 1]
        assert abs(r) <= 4 / math.sqrt(n)


def test_path_rng_streams_differ():
    a = path_rng(1, 2).standard_normal(4)
    b = path_rng(1, 2, stream=1).standard_normal(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, path_rng(1, 2).standard_normal(4))


def test_ensemble_weights():
    g = make_grid(1.0, 3)
    v = np.zeros((3, 4, 1))
    e = PathEnsemble(g, v)
    assert np.allclose(e.weights, 1 / 3)
    e2 = e.with_weights([1, 1, 2])
    assert abs(e2.weights.sum() - 1) < 1e-12 and e2.weights[2] == 0.5
    with pytest.raises(InvalidArgument):
        e.with_weights([1, -1, 1])


def test_restrict_examples():
    g = make_grid(1.0, 10)
    p = sample_brownian(g, 1, 1, seed=0)[0]
    r0 = restrict(p, 0.0)
    assert r0.values.shape == (1, 1) and r0.values[0, 0] == 0.0
    assert np.array_equal(restrict(p, 1.0).values, p.values)
    assert np.array_equal(restrict(restrict(p, 0.6), 0.3).values, restrict(p, 0.3).values)
    with pytest.raises(InvalidArgument):
        restrict(p, 0.33)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.data())
def test_restrict_projection(N, data):
    g = make_grid(1.0, N)
    p = sample_brownian(g, 2, 1, seed=N)[0]
    k = data.draw(st.integers(0, N))
    t = float(g.times[k])
    once = restrict(p, t)
    assert np.array_equal(restrict(once, t).values, once.values)
    assert np.array_equal(once.values, p.values[: k + 1])


def test_canonical_flag():
    g = make_grid(1.0, 2)
    assert Path(g, [0.0, 1.0, 2.0]).canonical
    assert not Path(g, [1.0, 1.0, 2.0]).canonical


def test_csv_roundtrip(tmp_path):
    g = make_grid(1.0, 5)
    e = sample_brownian(g, 2, 3, seed=9)
    f = tmp_path / "e.csv"
    write_csv(e, f)
    back = read_csv(f)
    assert np.array_equal(back.values, e.values) and np.array_equal(back.grid.times, g.times)
    header = f.read_text().splitlines()[0]
    assert header == "path_id,t,x_1,x_2"


def test_binary_roundtrip(tmp_path):
    g = make_grid(2.0, 7)
    e = sample_brownian(g, 3, 4, seed=12).with_weights([1, 2, 3, 4])
    f = tmp_path / "e.bin"
    write_binary(e, f)
    back = read_binary(f)
    assert np.array_equal(back.values, e.values)
    assert np.array_equal(back.weights, e.weights)
    assert back.provenance["seed"] == 12
