import numpy as np
import pytest

from fbmiso import fbm as F
from fbmiso import kernel as K

P4 = K.ModelParams(0.4)


@pytest.fixture(scope="module")
def big():
    g = F.GridSpec(1.0, 256)
    return F.sample_circulant(g, P4, 10_000, seed=11)


def test_grid_validation():
    with pytest.raises(K.DomainError):
        F.GridSpec(1.0, 300)
    with pytest.raises(K.DomainError):
        F.GridSpec(1.0, 256, eps_max=0.001)
    g = F.GridSpec(1.0, 256, eps_max=2**-5)
    assert g.ext_cells == 8 and g.n_steps == 264
    assert g.horizon == pytest.approx(1.0 + 2**-5)
    assert g.cells(2**-6) == 4
    with pytest.raises(K.DomainError):
        g.cells(0.003)
    with pytest.raises(K.DomainError):
        g.index(0.0031)


def test_fgn_lag_one():
    assert F.fgn_autocovariance(1, 0.4) == pytest.approx(0.5 * (2**0.8 - 2), rel=1e-14)
    assert F.fgn_autocovariance(1, 0.4) == pytest.approx(-0.129449, abs=5e-7)


def test_embedding_is_nonnegative():
    lam = F.circulant_eigenvalues(4096, 0.26, 1 / 4096)
    assert lam.min() >= 0


def test_origin_is_zero(big):
    assert np.all(big.data[:, :, 0] == 0.0)


def test_terminal_variance(big):
    x = big.at(1.0)[:, 0] ** 2
    se = x.std(ddof=1) / np.sqrt(x.size)
    assert abs(x.mean() - 1.0) <= 3 * se


def test_covariance_probe(big):
    rep = F.validate_ensemble(big, [(0.5, 1.0)])
    assert abs(rep.probes[0].z) <= 3


def test_cross_coordinate_independence():
    p = K.ModelParams(0.4, d=2)
    e = F.sample_circulant(F.GridSpec(1.0, 256), p, 10_000, seed=3)
    rep = F.validate_ensemble(e, [(0.5, 1.0), (1.0, 1.0)])
    cross = [r for r in rep.probes if r.coord == (0, 1)]
    assert cross and all(abs(r.z) <= 4 for r in cross)
    assert rep.passed


def test_seed_reproducibility_and_slicing():
    g = F.GridSpec(1.0, 256)
    a = F.sample_circulant(g, P4, 8, seed=5)
    b = F.sample_circulant(g, P4, 8, seed=5)
    assert np.array_equal(a.data, b.data)
    # every path owns its stream: a slice equals the matching rows
    c = F.sample_circulant(g, P4, 3, seed=5, first_path=4, batch=2)
    assert np.array_equal(c.data, a.data[4:7])
    d = F.sample_circulant(g, P4, 8, seed=6)
    assert not np.array_equal(a.data, d.data)


def test_cholesky_matches_covariance_and_circulant():
    g = F.GridSpec(1.0, 256)
    ch = F.sample_cholesky(g, P4, 10_000, seed=1)
    rep = F.validate_ensemble(ch, [(0.25, 0.5), (0.5, 1.0), (1.0, 1.0)])
    assert rep.passed, rep.max_abs_z
    ci = F.sample_circulant(g, P4, 10_000, seed=2)
    assert F.ks_terminal(ch, ci) > 0.01


def test_cholesky_size_limit():
    with pytest.raises(K.DomainError):
        F.sample_cholesky(F.GridSpec(1.0, 2**13), P4, 1, seed=0)


def test_unknown_method():
    with pytest.raises(K.DomainError):
        F.sample("EULER", F.GridSpec(1.0, 256), P4, 1, 0)


def test_dump_and_load_roundtrip(tmp_path):
    p = K.ModelParams(0.35, d=2)
    e = F.sample_circulant(F.GridSpec(1.0, 256, 2**-5), p, 5, seed=9)
    path = tmp_path / "ens.bin"
    F.dump_ensemble(e, path)
    f = F.load_ensemble(path)
    assert np.array_equal(e.data, f.data)
    assert f.grid == e.grid and f.params == e.params and f.seed == 9


def test_export_csv(tmp_path):
    e = F.sample_circulant(F.GridSpec(1.0, 256), P4, 2, seed=0)
    path = tmp_path / "paths.csv"
    F.export_paths_csv(e, path, paths=(0, 1))
    rows = path.read_text().splitlines()
    assert rows[0] == "t,path0_x0,path1_x0"
    assert len(rows) == 258
    assert float(rows[-1].split(",")[1]) == e.data[0, 0, -1]
