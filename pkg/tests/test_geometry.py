import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chiraldet.errors import AnnotationError
from chiraldet.geometry import (
    AtomPartition,
    ChiralUnit,
    ChiralityMatrix,
    Configuration,
    Molecule,
    UnitKind,
    assign_configuration,
    chirality_matrix,
    chirality_matrix_coord_grad,
    chirality_product,
    mirror,
    order_substituents,
    partition_atoms,
    random_reflection,
    random_rotation,
    reference_point,
    transform,
    unit_products,
)
from chiraldet.numerics import finite_diff_grad


def make_molecule(coords, units=(), blade=None):
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    return Molecule(
        coords=coords,
        atomic_numbers=np.full(n, 6),
        features=np.zeros((n, 4)),
        chiral_units=tuple(units),
        blade=blade,
    ).validate()


def center_unit(center, related):
    return ChiralUnit(kind=UnitKind.CENTER, center_atoms=(center,), related=tuple(related))


CANONICAL_COORDS = [
    (0.0, 0.0, 0.0),  # center
    (1.0, 0.0, 0.0),  # r1
    (0.0, 1.0, 0.0),  # r2
    (0.0, 0.0, -0.5),  # r3
    (0.0, 0.0, 0.5),  # r4
]


def canonical_molecule():
    return make_molecule(CANONICAL_COORDS, [center_unit(0, (1, 2, 3, 4))])


def random_chiral_molecule(rng, min_product=0.1):
    while True:
        coords = rng.uniform(-2.0, 2.0, size=(5, 3))
        mol = make_molecule(coords, [center_unit(0, (1, 2, 3, 4))])
        if abs(unit_products(mol)[0]) >= min_product:
            return mol


class TestPartition:
    def test_five_atom_center(self):
        part = partition_atoms(canonical_molecule())
        assert part == AtomPartition(chiral=(0,), related=(1, 2, 3, 4), nonchiral=())

    def test_no_units(self):
        part = partition_atoms(make_molecule(np.zeros((3, 3))))
        assert part == AtomPartition(chiral=(), related=(), nonchiral=(0, 1, 2))

    def test_two_units_shared_related_atom(self):
        units = [center_unit(0, (2, 3, 4, 5)), center_unit(1, (2, 5, 6, 7))]
        mol = make_molecule(np.arange(24.0).reshape(8, 3), units)
        part = partition_atoms(mol)
        # set-arithmetic oracle over the explicit index lists
        chiral = {0, 1}
        related = ({2, 3, 4, 5} | {2, 5, 6, 7}) - chiral
        nonchiral = set(range(8)) - chiral - related
        assert set(part.chiral) == chiral
        assert set(part.related) == related
        assert set(part.nonchiral) == nonchiral

    def test_related_atom_that_centers_another_unit_goes_chiral(self):
        units = [center_unit(0, (1, 2, 3, 4)), center_unit(1, (2, 5, 6, 7))]
        mol = make_molecule(np.arange(24.0).reshape(8, 3), units)
        part = partition_atoms(mol)
        assert 1 in part.chiral and 1 not in part.related

    def test_overlapping_centers_rejected(self):
        units = [center_unit(0, (1, 2, 3, 4)), center_unit(0, (1, 2, 3, 5))]
        mol = Molecule(
            coords=np.zeros((6, 3)),
            atomic_numbers=np.full(6, 6),
            features=np.zeros((6, 4)),
            chiral_units=tuple(units),
        )
        with pytest.raises(AnnotationError):
            partition_atoms(mol)


class TestReferencePoint:
    def test_center_identity(self):
        unit = center_unit(0, (1, 2, 3, 4))
        coords = np.array([[1.0, 2.0, 3.0]] + [[0.0, 0.0, 0.0]] * 4)
        assert np.array_equal(reference_point(unit, coords), [1.0, 2.0, 3.0])

    def test_axis_midpoint(self):
        unit = ChiralUnit(kind=UnitKind.AXIS, center_atoms=(0, 1), related=(2, 3, 4, 5))
        coords = np.zeros((6, 3))
        coords[1] = [2.0, 0.0, 0.0]
        assert np.array_equal(reference_point(unit, coords), [1.0, 0.0, 0.0])

    def test_axis_mean_oracle(self):
        unit = ChiralUnit(kind=UnitKind.AXIS, center_atoms=(0, 1), related=(2, 3, 4, 5))
        coords = np.zeros((6, 3))
        coords[0] = [-1.0, 4.0, 2.0]
        coords[1] = [3.0, -2.0, 0.0]
        expect = (coords[0] + coords[1]) / 2.0
        assert np.array_equal(reference_point(unit, coords), expect)
        assert np.array_equal(expect, [1.0, 1.0, 1.0])


class TestChiralityMatrix:
    def test_canonical_frame(self):
        mc = chirality_matrix(center_unit(0, (1, 2, 3, 4)), CANONICAL_COORDS)
        assert np.array_equal(mc.m, np.eye(3))

    def test_translation_cancels(self):
        shifted = np.asarray(CANONICAL_COORDS) + 5.0
        mc = chirality_matrix(center_unit(0, (1, 2, 3, 4)), shifted)
        assert np.allclose(mc.m, np.eye(3), atol=1e-12)

    def test_rowwise_subtraction_oracle(self):
        rng = np.random.default_rng(7)
        coords = rng.uniform(-3.0, 3.0, size=(5, 3))
        unit = center_unit(0, (1, 2, 3, 4))
        mc = chirality_matrix(unit, coords)
        expect = np.array(
            [coords[1] - coords[0], coords[2] - coords[0], coords[4] - coords[3]]
        )
        assert np.array_equal(mc.m, expect)


def cofactor_det(m):
    return (
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    )


class TestChiralityProduct:
    def test_identity_rows(self):
        assert chirality_product(ChiralityMatrix(m=np.eye(3))) == 1.0

    def test_single_reflection(self):
        assert chirality_product(ChiralityMatrix(m=np.diag([1.0, 1.0, -1.0]))) == -1.0

    def test_cross_dot_matches_cofactor_seed11(self):
        rng = np.random.default_rng(11)
        m = rng.standard_normal((3, 3))
        p = chirality_product(ChiralityMatrix(m=m))
        expect = cofactor_det(m)
        assert abs(p - expect) <= 1e-12 * abs(expect)

    @given(st.integers(0, 100_000))
    @settings(max_examples=100, deadline=None)
    def test_cross_dot_vs_cofactor_property(self, seed):
        m = np.random.default_rng(seed).standard_normal((3, 3))
        p = chirality_product(ChiralityMatrix(m=m))
        assert abs(p - cofactor_det(m)) <= 1e-12 * max(1.0, abs(p))


class TestAssignConfiguration:
    def test_positive_is_r(self):
        assert assign_configuration(2.5, 1e-9) is Configuration.R

    def test_negative_is_s(self):
        assert assign_configuration(-0.3, 1e-9) is Configuration.S

    def test_below_tolerance_degenerate(self):
        assert assign_configuration(1e-12, 1e-9) is Configuration.DEGENERATE

    def test_negative_tol_rejected(self):
        with pytest.raises(ValueError):
            assign_configuration(1.0, -1.0)


class TestTransform:
    def test_identity_bitwise(self):
        mol = canonical_molecule()
        out = transform(mol, np.eye(3), np.zeros(3))
        assert np.array_equal(out.coords, mol.coords)

    def test_reflection_flips_product(self):
        mol = canonical_molecule()
        out = transform(mol, np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        assert unit_products(mol)[0] == 1.0
        assert unit_products(out)[0] == -1.0

    def test_rigid_motion_preserves_product_seed3(self):
        rng = np.random.default_rng(3)
        rot = random_rotation(rng)
        t = rng.uniform(-10.0, 10.0, size=3)
        mol = random_chiral_molecule(rng)
        p0 = unit_products(mol)[0]
        p1 = unit_products(transform(mol, rot, t))[0]
        assert abs(p1 - p0) / abs(p0) < 1e-10

    def test_nonorthogonal_rejected(self):
        with pytest.raises(ValueError):
            transform(canonical_molecule(), np.eye(3) * 1.5, np.zeros(3))

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_invariance_property(self, seed):
        rng = np.random.default_rng(seed)
        mol = random_chiral_molecule(rng)
        rot = random_rotation(rng)
        t = rng.uniform(-20.0, 20.0, size=3)
        p0 = unit_products(mol)[0]
        p1 = unit_products(transform(mol, rot, t))[0]
        assert abs(p1 - p0) / abs(p0) < 1e-10

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_reflection_flip_property(self, seed):
        rng = np.random.default_rng(seed)
        mol = random_chiral_molecule(rng)
        refl = random_reflection(rng)
        p0 = unit_products(mol)[0]
        p1 = unit_products(transform(mol, refl, np.zeros(3)))[0]
        assert abs(p1 + p0) <= 1e-12 * abs(p0)


class TestBulkInvariance:
    def test_thousand_units_thousand_rigid_pairs(self):
        # vectorized: each unit gets its own random rotation + translation
        rng = np.random.default_rng(77)
        coords = np.empty((1000, 5, 3))
        n = 0
        while n < 1000:
            c = rng.uniform(-2.0, 2.0, size=(5, 3))
            p = np.dot(np.cross(c[1] - c[0], c[2] - c[0]), c[4] - c[3])
            if abs(p) >= 0.1:
                coords[n] = c
                n += 1
        base = np.einsum(
            "ni,ni->n",
            np.cross(coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0]),
            coords[:, 4] - coords[:, 3],
        )
        rots = np.stack([random_rotation(rng) for _ in range(1000)])
        trans = rng.uniform(-10.0, 10.0, size=(1000, 1, 3))
        moved = np.einsum("nij,nkj->nki", rots, coords) + trans
        prods = np.einsum(
            "ni,ni->n",
            np.cross(moved[:, 1] - moved[:, 0], moved[:, 2] - moved[:, 0]),
            moved[:, 4] - moved[:, 3],
        )
        assert np.max(np.abs(prods - base) / np.abs(base)) < 1e-10


class TestMirror:
    def test_canonical_flips_to_minus_one(self):
        assert unit_products(mirror(canonical_molecule()))[0] == -1.0

    def test_involution(self):
        mol = random_chiral_molecule(np.random.default_rng(44))
        assert np.array_equal(mirror(mirror(mol)).coords, mol.coords)

    def test_products_negate_exactly_seed5(self):
        rng = np.random.default_rng(5)
        units = [center_unit(0, (1, 2, 3, 4)), center_unit(5, (6, 7, 8, 9))]
        mol = make_molecule(rng.uniform(-2.0, 2.0, size=(10, 3)), units)
        orig = unit_products(mol)
        flipped = unit_products(mirror(mol))
        for a, b in zip(orig, flipped):
            assert b == -a  # exact negation, 0 ulp

    def test_labels_flip_when_nondegenerate(self):
        rng = np.random.default_rng(21)
        for _ in range(25):
            mol = random_chiral_molecule(rng)
            lab = assign_configuration(unit_products(mol)[0])
            lab_m = assign_configuration(unit_products(mirror(mol))[0])
            assert {lab, lab_m} == {Configuration.R, Configuration.S}


class TestOrderSubstituents:
    def test_cip_example(self):
        # indices (A, B, C, D) = (10, 11, 12, 13) with priorities (1, 4, 2, 5)
        assert order_substituents((10, 11, 12, 13), (1.0, 4.0, 2.0, 5.0)) == (10, 12, 11, 13)

    def test_already_ascending(self):
        assert order_substituents((3, 1, 4, 2), (0.1, 0.2, 0.3, 0.4)) == (3, 1, 4, 2)

    def test_all_24_input_orderings_agree(self):
        import itertools

        indices = (7, 3, 9, 5)
        priorities = (2.0, 8.0, 1.0, 4.0)
        expected = order_substituents(indices, priorities)
        for perm in itertools.permutations(range(4)):
            shuffled_idx = tuple(indices[i] for i in perm)
            shuffled_pri = tuple(priorities[i] for i in perm)
            assert order_substituents(shuffled_idx, shuffled_pri) == expected

    @given(st.permutations(list(range(4))), st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_permutation_invariant_random_priorities(self, perm, seed):
        rng = np.random.default_rng(seed)
        indices = tuple(int(i) for i in rng.choice(50, size=4, replace=False))
        priorities = tuple(float(p) for p in rng.standard_normal(4))
        shuffled_idx = tuple(indices[i] for i in perm)
        shuffled_pri = tuple(priorities[i] for i in perm)
        assert order_substituents(shuffled_idx, shuffled_pri) == order_substituents(
            indices, priorities
        )

    def test_tie_broken_by_index(self):
        assert order_substituents((9, 2, 5, 7), (1.0, 1.0, 0.5, 2.0)) == (5, 2, 9, 7)

    def test_duplicate_index_rejected(self):
        with pytest.raises(AnnotationError):
            order_substituents((1, 1, 2, 3), (1.0, 1.0, 2.0, 3.0))


class TestCoordGrad:
    @pytest.mark.parametrize("kind", [UnitKind.CENTER, UnitKind.AXIS])
    def test_matches_finite_differences(self, kind):
        rng = np.random.default_rng(31)
        n = 7
        if kind is UnitKind.CENTER:
            unit = ChiralUnit(kind=kind, center_atoms=(0,), related=(1, 2, 3, 4))
        else:
            unit = ChiralUnit(kind=kind, center_atoms=(0, 5), related=(1, 2, 3, 4))
        coords = rng.uniform(-2.0, 2.0, size=(n, 3))
        weights = rng.standard_normal((3, 3))

        def f(theta):
            mc = chirality_matrix(unit, theta.reshape(n, 3))
            return float((weights * mc.m).sum())

        numeric = finite_diff_grad(f, coords.ravel())
        grad = np.zeros((n, 3))
        chirality_matrix_coord_grad(unit, weights, grad)
        assert np.allclose(grad.ravel(), numeric, atol=1e-7)
