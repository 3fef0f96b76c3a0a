import numpy as np
import pytest
from numpy.testing import assert_array_equal

from core import FixationSet, PixelDistribution, area_resize, softmax
from errors import EmptyFixationsError, InvalidInputError, ShapeMismatchError, UndefinedMetricError
from metrics import (
    ShuffleBank,
    aggregate,
    auc_borji,
    auc_judd,
    cc,
    emd,
    emd_bruteforce,
    evaluate_batch,
    evaluate_map,
    image_seed,
    nss,
    pairwise_auc,
    sauc,
    sim,
)
from models import MetricReport


def fixations(points, height, width):
    return FixationSet(points=points, image_height=height, image_width=width)


def dist(values):
    return PixelDistribution(values=np.asarray(values, dtype=float))


def random_dist(rng, shape):
    return softmax(2.0 * rng.standard_normal(shape))


def center_fixations(rng, n, size, sigma):
    points = []
    while len(points) < n:
        r, c = np.rint(rng.normal(size / 2, sigma, size=2)).astype(int)
        if 0 <= r < size and 0 <= c < size:
            points.append((int(r), int(c)))
    return fixations(points, size, size)


@pytest.fixture
def ramp():
    return np.array([[1.0, 2.0], [3.0, 4.0]])


class TestPairwiseAuc:
    def test_ties_count_half(self):
        assert pairwise_auc(np.ones(3), np.ones(5)) == 0.5

    def test_perfect_separation(self):
        assert pairwise_auc(np.array([5.0, 6.0]), np.array([1.0, 2.0, 3.0])) == 1.0


class TestAucJudd:
    def test_constant_map_is_chance(self):
        fix = fixations([(0, 0), (2, 1)], 3, 3)
        assert auc_judd(np.full((3, 3), 0.7), fix) == pytest.approx(0.5)

    def test_single_fixation_at_maximum(self):
        sal = np.arange(1.0, 10.0).reshape(3, 3)
        fix = fixations([(2, 2)], 3, 3)
        # Curve (0, 0) -> (1/9, 1) -> (1, 1)
        assert auc_judd(sal, fix) == pytest.approx(17 / 18, abs=1e-12)

    def test_top_k_values(self):
        rng = np.random.default_rng(0)
        sal = rng.permutation(100).reshape(10, 10).astype(float)
        top = np.argsort(sal.ravel())[-5:]
        fix = fixations([divmod(int(i), 10) for i in top], 10, 10)
        assert auc_judd(sal, fix) >= 1.0 - 5 / 100

    def test_duplicates_do_not_change_score(self):
        sal = np.random.default_rng(1).random((4, 4))
        once = fixations([(0, 1), (3, 3)], 4, 4)
        twice = fixations([(0, 1), (0, 1), (3, 3)], 4, 4)
        assert auc_judd(sal, once) == auc_judd(sal, twice)

    def test_empty_fixations(self):
        with pytest.raises(EmptyFixationsError):
            auc_judd(np.zeros((2, 2)), fixations([], 2, 2))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            auc_judd(np.zeros((3, 3)), fixations([(0, 0)], 2, 2))


class TestAucBorji:
    def test_constant_map_is_exactly_half(self):
        fix = fixations([(1, 1), (0, 3)], 4, 4)
        assert auc_borji(np.full((4, 4), 2.0), fix, n_splits=10, seed=3) == 0.5

    def test_perfect_map_converges(self):
        rng = np.random.default_rng(2)
        sal = rng.uniform(0.0, 0.9, size=(64, 64))
        points = [(int(r), int(c)) for r, c in rng.integers(0, 64, size=(10, 2))]
        for k, (r, c) in enumerate(points):
            sal[r, c] = 1.0 + 0.1 * k
        value = auc_borji(sal, fixations(points, 64, 64), n_splits=20, n_neg=1000, seed=0)
        assert value == pytest.approx(1.0, abs=0.02)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        sal = rng.random((16, 16))
        fix = fixations([(1, 2), (8, 8), (15, 0)], 16, 16)
        first = auc_borji(sal, fix, n_splits=5, n_neg=20, seed=11)
        second = auc_borji(sal, fix, n_splits=5, n_neg=20, seed=11)
        assert first == second

    @pytest.mark.parametrize("kwargs", [{"n_splits": 0}, {"n_neg": 0}])
    def test_rejects_bad_counts(self, kwargs):
        with pytest.raises(InvalidInputError):
            auc_borji(np.random.default_rng(0).random((3, 3)), fixations([(0, 0)], 3, 3), **kwargs)


class TestShuffledAuc:
    def test_bank_excludes_current_image(self):
        sets = [fixations([(i, i)], 4, 4) for i in range(4)]
        bank = ShuffleBank.excluding(sets, 2)
        assert len(bank.fixation_sets) == 3
        assert sets[2] not in bank.fixation_sets

    def test_bank_rescales_other_sizes(self):
        bank = ShuffleBank(fixation_sets=[fixations([(7, 3)], 8, 8)])
        assert_array_equal(bank.flat_indices(4, 4), [3 * 4 + 1])

    def test_center_bias_is_neutralized(self):
        rng = np.random.default_rng(4)
        size, sigma = 64, 16.0
        fix = center_fixations(rng, 100, size, sigma)
        bank = ShuffleBank(fixation_sets=[center_fixations(rng, 100, size, sigma) for _ in range(5)])
        rows, cols = np.mgrid[0:size, 0:size]
        density = np.exp(-((rows - size / 2) ** 2 + (cols - size / 2) ** 2) / (2 * sigma**2))
        assert sauc(density, fix, bank, n_splits=20, seed=0) == pytest.approx(0.5, abs=0.05)

    def test_perfect_separation(self):
        sal = np.zeros((5, 5))
        sal[0, :] = 1.0
        fix = fixations([(0, 1), (0, 3)], 5, 5)
        bank = ShuffleBank(fixation_sets=[fixations([(2, 2), (4, 0), (3, 3)], 5, 5)])
        assert sauc(sal, fix, bank, n_splits=3) == 1.0

    def test_constant_map(self):
        fix = fixations([(0, 1)], 3, 3)
        bank = ShuffleBank(fixation_sets=[fixations([(2, 2), (1, 1)], 3, 3)])
        assert sauc(np.ones((3, 3)), fix, bank, n_splits=4) == 0.5

    def test_empty_bank(self):
        with pytest.raises(EmptyFixationsError):
            sauc(np.random.default_rng(0).random((3, 3)), fixations([(0, 0)], 3, 3), ShuffleBank())


class TestMonotoneInvariance:
    @pytest.mark.parametrize("transform", [np.exp, lambda x: 2.0 * x + 3.0])
    def test_auc_variants(self, transform):
        rng = np.random.default_rng(5)
        sal = rng.standard_normal((12, 12))
        fix = fixations([(int(r), int(c)) for r, c in rng.integers(0, 12, size=(15, 2))], 12, 12)
        bank = ShuffleBank(
            fixation_sets=[
                fixations([(int(r), int(c)) for r, c in rng.integers(0, 12, size=(15, 2))], 12, 12)
            ]
        )
        moved = transform(sal)
        assert auc_judd(moved, fix) == pytest.approx(auc_judd(sal, fix), abs=1e-10)
        assert auc_borji(moved, fix, n_splits=5, seed=9) == pytest.approx(
            auc_borji(sal, fix, n_splits=5, seed=9), abs=1e-10
        )
        assert sauc(moved, fix, bank, n_splits=5, seed=9) == pytest.approx(
            sauc(sal, fix, bank, n_splits=5, seed=9), abs=1e-10
        )


class TestCorrelation:
    def test_self_and_negation(self, ramp):
        assert cc(ramp, ramp) == pytest.approx(1.0)
        assert cc(ramp, 7.0 - ramp) == pytest.approx(-1.0)

    def test_hand_evaluated(self):
        value = cc(np.array([[1.0, 2.0, 3.0, 4.0]]), np.array([[1.0, 2.0, 3.0, 5.0]]))
        assert value == pytest.approx(6.5 / np.sqrt(43.75), abs=1e-12)

    def test_affine_invariance(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((6, 6)), rng.random((6, 6))
        assert cc(3.0 * a + 1.0, 0.5 * b - 2.0) == pytest.approx(cc(a, b), abs=1e-10)

    def test_constant_input_is_undefined(self, ramp):
        with pytest.raises(UndefinedMetricError):
            cc(np.ones((2, 2)), ramp)

    def test_shape_mismatch(self, ramp):
        with pytest.raises(ShapeMismatchError):
            cc(ramp, np.ones((1, 4)))


class TestNss:
    def test_hand_evaluated(self, ramp):
        assert nss(ramp, fixations([(1, 1)], 2, 2)) == pytest.approx(1.161895, abs=1e-6)
        assert nss(ramp, fixations([(0, 0)], 2, 2)) == pytest.approx(-1.161895, abs=1e-6)

    def test_every_pixel_once_is_zero(self):
        sal = np.random.default_rng(7).random((4, 5))
        fix = fixations([(r, c) for r in range(4) for c in range(5)], 4, 5)
        assert abs(nss(sal, fix)) <= 1e-12

    def test_affine_invariance(self):
        rng = np.random.default_rng(8)
        sal = rng.random((8, 8))
        fix = fixations([(1, 1), (4, 6), (7, 2)], 8, 8)
        assert nss(5.0 * sal - 2.0, fix) == pytest.approx(nss(sal, fix), abs=1e-10)

    def test_constant_map_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            nss(np.ones((3, 3)), fixations([(0, 0)], 3, 3))


class TestSimilarity:
    def test_examples(self):
        assert sim(dist([[0.5, 0.5]]), dist([[1.0, 0.0]])) == pytest.approx(0.5)
        assert sim(dist([[1.0, 0.0]]), dist([[0.0, 1.0]])) == 0.0

    def test_self_and_symmetry(self):
        rng = np.random.default_rng(9)
        p, g = random_dist(rng, (5, 5)), random_dist(rng, (5, 5))
        assert sim(p, p) == pytest.approx(1.0, abs=1e-12)
        assert sim(p, g) == sim(g, p)


class TestEmd:
    def test_identity(self):
        p = random_dist(np.random.default_rng(10), (4, 4))
        assert emd(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_one_pixel_move(self):
        p, g = dist([[1.0, 0.0]]), dist([[0.0, 1.0]])
        assert emd(p, g) == pytest.approx(1.0, abs=1e-12)
        assert emd_bruteforce(p, g) == pytest.approx(1.0, abs=1e-10)

    def test_single_source_single_sink(self):
        p = dist([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        g = dist([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        assert emd_bruteforce(p, g) == pytest.approx(np.hypot(2.0, 2.0), abs=1e-10)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(11)
        shapes = [(1, 2), (2, 2), (3, 3), (2, 5), (4, 4), (1, 16)]
        for trial in range(200):
            shape = shapes[trial % len(shapes)]
            p, g = random_dist(rng, shape), random_dist(rng, shape)
            assert emd(p, g) == pytest.approx(emd_bruteforce(p, g), abs=1e-8)

    def test_symmetry_and_triangle_inequality(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            a, b, c = (random_dist(rng, (3, 3)) for _ in range(3))
            assert emd(a, b) == pytest.approx(emd(b, a), abs=1e-8)
            assert emd(a, c) <= emd(a, b) + emd(b, c) + 1e-8

    @staticmethod
    def point_mass(shape, row, col):
        values = np.zeros(shape)
        values[row, col] = 1.0
        return dist(values)

    def test_large_maps_are_solved_on_the_limit_grid(self):
        # 40x40 -> 8x8: pixels (2, 2) and (37, 37) fill blocks (0, 0) and (7, 7)
        p = self.point_mass((40, 40), 2, 2)
        g = self.point_mass((40, 40), 37, 37)
        assert emd(p, g, grid_limit=8) == pytest.approx(7.0 * np.sqrt(2.0), abs=1e-9)

    def test_each_side_is_capped_separately(self):
        # 40x20 -> 8x8: column blocks are 2.5 pixels wide, column 16 lies inside block 6
        p = self.point_mass((40, 20), 2, 1)
        g = self.point_mass((40, 20), 37, 16)
        assert emd(p, g, grid_limit=8) == pytest.approx(np.sqrt(85.0), abs=1e-9)

    def test_downsampling_matches_area_resized_inputs(self):
        rng = np.random.default_rng(13)
        p, g = random_dist(rng, (40, 40)), random_dist(rng, (40, 40))
        small_p, small_g = (area_resize(d.values, 8, 8) for d in (p, g))
        expected = emd(dist(small_p / small_p.sum()), dist(small_g / small_g.sum()))
        assert emd(p, g, grid_limit=8) == pytest.approx(expected, abs=1e-9)

    def test_small_maps_are_not_resized(self):
        p = self.point_mass((8, 8), 0, 0)
        g = self.point_mass((8, 8), 7, 7)
        assert emd(p, g, grid_limit=8) == pytest.approx(7.0 * np.sqrt(2.0), abs=1e-9)

    def test_bruteforce_grid_limit(self):
        p = random_dist(np.random.default_rng(14), (5, 5))
        with pytest.raises(InvalidInputError):
            emd_bruteforce(p, p)


class TestEvaluateMap:
    def test_self_prediction(self):
        rng = np.random.default_rng(15)
        g = random_dist(rng, (8, 8))
        fix = fixations([(2, 3), (5, 5)], 8, 8)
        report = evaluate_map(g.values, fix, gt=g, n_splits=5, emd_grid=8)
        assert report.cc == pytest.approx(1.0)
        assert report.sim == pytest.approx(1.0)
        assert report.emd == pytest.approx(0.0, abs=1e-10)
        assert report.sauc is None

    def test_constant_map(self):
        fix = fixations([(0, 0), (2, 2)], 3, 3)
        bank = ShuffleBank(fixation_sets=[fixations([(1, 1)], 3, 3)])
        report = evaluate_map(np.ones((3, 3)), fix, gt=dist(np.full((3, 3), 1 / 9)), bank=bank, n_splits=3)
        assert report.auc_judd == pytest.approx(0.5)
        assert report.auc_borji == 0.5
        assert report.sauc == 0.5
        assert report.nss is None
        assert report.cc is None

    def test_parameters_echoed(self):
        fix = fixations([(0, 0)], 2, 2)
        report = evaluate_map(np.eye(2), fix, n_splits=7, n_neg=3, seed=4, emd_grid=None, image="a")
        assert (report.image, report.n_splits, report.n_neg, report.seed) == ("a", 7, 3, 4)
        assert report.emd is None


class TestEvaluateBatch:
    @pytest.fixture
    def batch(self):
        rng = np.random.default_rng(16)
        maps = [rng.random((6, 6)) for _ in range(4)]
        fix = [
            fixations([(int(r), int(c)) for r, c in rng.integers(0, 6, size=(4, 2))], 6, 6)
            for _ in range(4)
        ]
        return maps, fix

    def test_jobs_do_not_change_results(self, batch):
        maps, fix = batch
        serial = evaluate_batch(maps, fix, n_splits=5, seed=2, jobs=1)
        parallel = evaluate_batch(maps, fix, n_splits=5, seed=2, jobs=3)
        assert [r.model_dump() for r in serial] == [r.model_dump() for r in parallel]

    def test_bank_used_for_multiple_images(self, batch):
        maps, fix = batch
        reports = evaluate_batch(maps, fix, n_splits=2, names=["a", "b", "c", "d"])
        assert all(r.sauc is not None for r in reports)
        assert [r.image for r in reports] == ["a", "b", "c", "d"]

    def test_single_image_has_no_bank(self, batch):
        maps, fix = batch
        (report,) = evaluate_batch(maps[:1], fix[:1], n_splits=2)
        assert report.sauc is None

    def test_extra_bank_scores_single_image(self, batch):
        maps, fix = batch
        (report,) = evaluate_batch(maps[:1], fix[:1], n_splits=2, seed=7, extra_bank=fix[1:])
        assert report.sauc is not None
        assert report.seed == 7

    def test_extra_bank_uses_per_image_substreams(self, batch):
        maps, fix = batch
        extra = [fixations([(0, 0), (5, 5)], 6, 6)]
        reports = evaluate_batch(maps, fix, n_splits=3, seed=5, extra_bank=extra, jobs=2)
        for index, report in enumerate(reports):
            bank = ShuffleBank.excluding(fix, index, seed=image_seed(5, index), extra=extra)
            expected = sauc(maps[index], fix[index], bank, n_splits=3, seed=image_seed(5, index))
            assert report.sauc == expected
            assert report.auc_borji == auc_borji(maps[index], fix[index], n_splits=3, seed=image_seed(5, index))
        assert [r.seed for r in reports] == [5] * 4

    def test_length_mismatch(self, batch):
        maps, fix = batch
        with pytest.raises(InvalidInputError):
            evaluate_batch(maps, fix[:2])

    def test_image_seed_is_stable(self):
        assert image_seed(0, 1) == image_seed(0, 1)
        assert image_seed(0, 1) != image_seed(0, 2)


def test_aggregate_skips_missing_values():
    reports = [MetricReport(cc=0.5, nss=1.0), MetricReport(cc=0.7)]
    means = aggregate(reports)
    assert means["cc"] == pytest.approx(0.6)
    assert means["nss"] == 1.0
    assert "emd" not in means
