import numpy as np
import pytest

from cardassim.errors import ConfigurationError
from cardassim.pod import SnapshotSet, build_pod, electrical_gram, project, reconstruction_error
from oracles import pod_tail_energy


@pytest.fixture
def toy(rng):
    # 10-dimensional snapshots with a decaying spectrum
    S = rng.standard_normal((10, 30)) * np.logspace(0, -3, 10)[:, None]
    gram = rng.uniform(0.5, 2.0, 10)
    return SnapshotSet(S), gram


@pytest.mark.parametrize("r", [1, 3, 6, 9])
def test_tail_error_matches_eigen_oracle(toy, r):
    snaps, gram = toy
    basis = build_pod(snaps, r, gram)
    assert abs(reconstruction_error(snaps, basis) - pod_tail_energy(snaps.columns, gram, r)) <= 1e-8


def test_orthonormal_in_gram(toy):
    snaps, gram = toy
    for r in range(1, 11):
        assert build_pod(snaps, r, gram).orthonormality_error() <= 1e-10


def test_repeated_vector_gives_single_mode():
    e1 = np.eye(5)[:, 0]
    basis = build_pod(SnapshotSet.stack([e1, e1]), 1)
    assert not basis.rank_deficient
    assert np.allclose(np.abs(basis.phi[:, 0]), e1, atol=1e-14)


def test_orthonormal_snapshots_reconstruct_exactly(rng):
    q = np.linalg.qr(rng.standard_normal((6, 6)))[0]
    snaps = SnapshotSet(q)
    assert reconstruction_error(snaps, build_pod(snaps, 6)) <= 1e-24


def test_rank_deficient_flag():
    S = np.outer(np.arange(1.0, 5.0), [1.0, 2.0, 3.0])
    with pytest.warns(RuntimeWarning):
        basis = build_pod(SnapshotSet(S), 3)
    assert basis.rank == 1 and basis.requested_rank == 3 and basis.rank_deficient


def test_rank_too_large(toy):
    snaps, gram = toy
    with pytest.raises(ConfigurationError):
        build_pod(snaps, 11, gram)
    with pytest.raises(ConfigurationError):
        build_pod(snaps, 0, gram)


def test_projection_cases(toy, rng):
    snaps, gram = toy
    basis = build_pod(snaps, 4, gram)
    c = rng.standard_normal(4)
    alpha, perp = project(basis.phi @ c, basis)
    assert np.allclose(alpha, c, atol=1e-12) and np.max(np.abs(perp)) <= 1e-12
    # a vector gram-orthogonal to the span
    v = rng.standard_normal(10)
    v -= basis.phi @ basis.coefficients(v)
    alpha, perp = project(v, basis)
    assert np.max(np.abs(alpha)) <= 1e-12 and np.allclose(perp, v, atol=1e-14)


def test_projection_round_trip(toy, rng):
    snaps, gram = toy
    basis = build_pod(snaps, 5, gram)
    for _ in range(100):
        x = rng.standard_normal(10)
        alpha, perp = project(x, basis)
        assert np.linalg.norm(basis.phi @ alpha + perp - x) <= 1e-12 * np.linalg.norm(x)


def test_gram_validation():
    with pytest.raises(ConfigurationError):
        build_pod(SnapshotSet(np.eye(3)), 2, gram=[1.0, -1.0, 1.0])
    with pytest.raises(ConfigurationError):
        build_pod(SnapshotSet(np.eye(3)), 2, gram=np.ones((3, 3)))
    with pytest.raises(ConfigurationError):
        electrical_gram(np.ones(3), kind="h1")


def test_electrical_gram_blocks():
    g = electrical_gram(np.array([0.5, 1.0, 0.5]), "mass", w_scale=10.0)
    assert g.tolist() == [0.5, 1.0, 0.5, 50.0, 100.0, 50.0]
    assert electrical_gram(np.array([0.5, 1.0]), "l2", 1.0).tolist() == [1.0] * 4


@pytest.mark.slow
def test_held_out_error_decreases_with_rank():
    from cardassim.harness import build_basis
    from cardassim.scenario import load_scenario, simulate_truth

    scn = load_scenario("tau_inout")
    truth = simulate_truth(scn)
    n = scn.cable().n_nodes
    X = truth.states[::5, : 2 * n].T
    errs = []
    for r in (2, 5, 10, 20):
        basis = build_basis(scn, r)
        assert basis.orthonormality_error() <= 1e-10
        errs.append(reconstruction_error(SnapshotSet(X), basis) / float(np.sum(basis.gram[:, None] * X**2)))
    assert all(a > b for a, b in zip(errs, errs[1:]))
