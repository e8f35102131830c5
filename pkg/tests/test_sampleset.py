import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acvtune.errors import ConstraintError
from acvtune.sampleset import (AllocationProfile, build_profile, compute_fF, eval_counts, scheme_fF, star_tree)
from acvtune.allocation import enumerate_trees

from oracles import brute_force_fF, explicit_sets, feasible

TABLE_SCHEMES = ("MLMC", "MFMC", "ACV-IS", "ACV-MF")


def _matches_oracle(scheme, N, n, tree=None):
    prof = build_profile(scheme, N, n, tree)
    got = compute_fF(prof, exact=True)
    f, F = brute_force_fF(*explicit_sets(scheme, N, n, tree))
    return list(got.f) == f and [list(row) for row in got.F] == F


def test_acvmf_worked_example():
    prof = build_profile("ACV-MF", 10, [20, 40])
    m = compute_fF(prof, exact=True)
    assert list(m.f) == [Fraction(1, 2), Fraction(3, 4)]
    assert [list(r) for r in m.F] == [[Fraction(1, 2), Fraction(1, 2)], [Fraction(1, 2), Fraction(3, 4)]]
    assert prof.z1 == (prof.z, prof.z)
    assert prof.size(prof.z2[0]) == 20 and prof.size(prof.z2[1]) == 40
    assert prof.z2[0] < prof.z2[1]


def test_mlmc_worked_example():
    prof = build_profile("MLMC", 10, [10, 30])
    assert prof.z1[0] == prof.z
    assert prof.z1[1] == prof.z2[0]
    assert not prof.z & prof.z2[1]
    assert prof.size(prof.z2[0]) == 10 and prof.size(prof.z2[1]) == 30
    assert _matches_oracle("MLMC", 10, [10, 30])
    assert list(eval_counts("MLMC", 10, [10, 30])) == [20, 40]


@pytest.mark.parametrize("scheme,N,n", [("ACV-MF", 10, [10, 40]), ("ACV-IS", 5, [5]), ("MFMC", 4, [6, 6]),
                                        ("MLMC", 3, [0, 2]), ("ACV-MF", 0, [4])])
def test_degenerate_profiles_rejected(scheme, N, n):
    with pytest.raises(ConstraintError):
        build_profile(scheme, N, n)


def test_unknown_scheme():
    with pytest.raises(ConstraintError):
        build_profile("CVMC", 3, [4])


def test_profile_json_round_trip():
    prof = build_profile("GMF", 4, [6, 9, 12], (0, 1, 1))
    again = AllocationProfile.from_dict(prof.to_dict())
    assert again == prof
    assert again.to_json() == prof.to_json()


@pytest.mark.parametrize("tree", [t.parents for t in enumerate_trees(3)])
def test_gmf_all_trees_match_oracle(tree):
    for N in (2, 3):
        for n in itertools.product(range(2, 8), repeat=3):
            if feasible("GMF", N, n, tree):
                assert _matches_oracle("GMF", N, n, tree), (N, n)


def test_gmf_star_and_chain_reduce_to_named_schemes():
    a = compute_fF(build_profile("GMF", 3, [5, 8], (0, 0)), exact=True)
    b = compute_fF(build_profile("ACV-MF", 3, [5, 8]), exact=True)
    c = compute_fF(build_profile("GMF", 3, [5, 8], (0, 1)), exact=True)
    d = compute_fF(build_profile("MFMC", 3, [5, 8]), exact=True)
    assert (a.F == b.F).all() and (a.f == b.f).all()
    assert (c.F == d.F).all() and (c.f == d.f).all()


@st.composite
def _profiles(draw):
    scheme = draw(st.sampled_from(TABLE_SCHEMES + ("GMF",)))
    M = draw(st.integers(1, 4))
    N = draw(st.integers(1, 30))
    tree = None
    if scheme == "GMF":
        tree = draw(st.sampled_from([t.parents for t in enumerate_trees(M)]))
    if scheme == "MLMC":
        n = draw(st.lists(st.integers(1, 60), min_size=M, max_size=M))
    elif scheme == "MFMC":
        steps = draw(st.lists(st.integers(1, 20), min_size=M, max_size=M))
        n = list(np.cumsum(steps) + N)
    elif scheme == "GMF":
        n = [0] * M
        sizes = [N] + n
        # assign in an order where parents come first
        done = {0}
        while len(done) < M + 1:
            for i in range(1, M + 1):
                if i not in done and tree[i - 1] in done:
                    sizes[i] = sizes[tree[i - 1]] + draw(st.integers(1, 20))
                    done.add(i)
        n = sizes[1:]
    else:
        n = draw(st.lists(st.integers(N + 1, N + 60), min_size=M, max_size=M))
    return scheme, N, [int(k) for k in n], tree


@settings(max_examples=150, deadline=None)
@given(_profiles())
def test_partition_and_matrix_properties(case):
    scheme, N, n, tree = case
    prof = build_profile(scheme, N, n, tree)
    assert sum(prof.group_sizes) == prof.total_points()
    assert all(s > 0 for s in prof.group_sizes)
    assert prof.size(prof.z) == N
    for i in range(prof.M):
        assert prof.size(prof.z1[i]) > 0 and prof.size(prof.z2[i]) > 0
        assert prof.z1[i] != prof.z2[i]
    m = compute_fF(prof)
    assert np.all(np.isfinite(m.f)) and np.all(np.isfinite(m.F))
    assert np.array_equal(m.F, m.F.T)
    assert np.min(np.linalg.eigvalsh(m.F)) >= -1e-10
    assert np.all(np.diag(m.F) >= 0)
    # fast closed forms agree with exact counting
    f, F = scheme_fF(scheme, N, n, tree)
    np.testing.assert_allclose(f, m.f, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(F, m.F, rtol=1e-12, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(_profiles())
def test_unnormalized_covariance_identity(case):
    """Raw cardinality sums equal F/N and f/N."""
    scheme, N, n, tree = case
    z, z1, z2 = explicit_sets(scheme, N, n, tree)
    m = compute_fF(build_profile(scheme, N, n, tree), exact=True)
    for i in range(len(n)):
        g = (Fraction(len(z1[i] & z), len(z1[i]) * N) - Fraction(len(z2[i] & z), len(z2[i]) * N))
        assert g == m.f[i] / N
        for j in range(len(n)):
            G = (Fraction(len(z1[i] & z1[j]), len(z1[i]) * len(z1[j]))
                 - Fraction(len(z1[i] & z2[j]), len(z1[i]) * len(z2[j]))
                 - Fraction(len(z2[i] & z1[j]), len(z2[i]) * len(z1[j]))
                 + Fraction(len(z2[i] & z2[j]), len(z2[i]) * len(z2[j])))
            assert G == m.F[i, j] / N


def test_acvmf_boundary_vanishes():
    f, F = scheme_fF("ACV-MF", 1.0, [1.0 + 1e-12, 3.0])
    assert abs(f[0]) < 1e-11 and abs(F[0, 0]) < 1e-11


def test_profile_cost_counts_every_evaluation():
    prof = build_profile("MLMC", 10, [10, 30])
    assert prof.cost([0.5, 0.1]) == pytest.approx(10 + 0.5 * 20 + 0.1 * 40)
    prof = build_profile("ACV-MF", 10, [20, 40])
    assert prof.cost([0.5, 0.1]) == pytest.approx(10 + 0.5 * 20 + 0.1 * 40)
    assert star_tree(2) == (0, 0)
