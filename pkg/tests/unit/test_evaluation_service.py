import itertools

import numpy as np
import pytest

from src.models.config import EvalOptions, KernelType, SourceFilter
from src.models.errors import (
    EmptyInputError,
    EmptyRecordsError,
    InsufficientPointsError,
    MissingSplitError,
    NoValidGroupsError,
)
from src.models.report import Direction, MarginRecord
from src.services.evaluation_service import (
    EvaluationService,
    alignment,
    directed_margins,
    kpca_project,
    make_provenance,
    pool_sources,
    ssr_pa,
)
from src.services.head_service import FrozenEncoder
from src.utils.stats import pearson
from tests.conftest import unit


def margin(identity, delta):
    return MarginRecord(identity_id=identity, pair=(0, 1), direction=Direction.I_TO_J, delta=delta)


def brute_force_ssr_pa(records):
    identities = sorted({r.identity_id for r in records})
    successes = 0
    for identity in identities:
        if all(r.delta > 0 for r in records if r.identity_id == identity):
            successes += 1
    return successes / len(identities), sum(r.delta > 0 for r in records) / len(records)


class TestDirectedMargins:
    def test_worked_example(self):
        p_i = unit(1.0, 0.0, 0.0)
        p_j = unit(0.9, np.sqrt(0.19), 0.0)
        n_i = unit(0.5, 0.0, np.sqrt(0.75))
        records = directed_margins([p_i, p_j], [n_i, None], identity_id=4, source_id=1)
        assert len(records) == 1
        assert records[0].direction == Direction.I_TO_J
        assert records[0].delta == pytest.approx(0.4)
        assert records[0].identity_id == 4 and records[0].source_id == 1

    def test_distractor_identical_to_positive_fails(self, rng):
        p_i, p_j = rng.standard_normal(5), rng.standard_normal(5)
        record = directed_margins([p_i, p_j], [p_i, None])[0]
        assert record.delta <= 0.0
        assert not record.success

    def test_three_views_give_six_records(self, rng):
        views = [rng.standard_normal(6) for _ in range(3)]
        distractors = [rng.standard_normal(6) for _ in range(3)]
        records = directed_margins(views, distractors)
        assert len(records) == 6
        assert {(r.pair, r.direction) for r in records} == {
            (pair, direction) for pair in [(0, 1), (0, 2), (1, 2)] for direction in Direction
        }

    def test_single_view_gives_nothing(self, rng):
        assert directed_margins([rng.standard_normal(4)], [rng.standard_normal(4)]) == []

    def test_raw_magnitudes_do_not_matter(self, rng):
        views = [rng.standard_normal(6) for _ in range(3)]
        distractors = [rng.standard_normal(6) for _ in range(3)]
        scaled = directed_margins([5.0 * v for v in views], [0.1 * n for n in distractors])
        for a, b in zip(directed_margins(views, distractors), scaled):
            assert a.delta == pytest.approx(b.delta, abs=1e-12)

    def test_length_mismatch(self, rng):
        with pytest.raises(ValueError):
            directed_margins([rng.standard_normal(3)] * 2, [None])


class TestSSRPA:
    def test_all_positive(self):
        assert ssr_pa([margin(0, 0.1), margin(0, 0.2), margin(1, 0.3)]) == (1.0, 1.0)

    def test_direct_count(self):
        records = [margin(0, 0.1), margin(0, 0.2), margin(1, 0.3), margin(1, -0.1)]
        assert ssr_pa(records) == (0.5, 0.75)

    def test_zero_margin_is_a_failure(self):
        assert ssr_pa([margin(0, 0.0)]) == (0.0, 0.0)

    def test_empty(self):
        with pytest.raises(EmptyRecordsError):
            ssr_pa([])

    def test_matches_brute_force(self, rng):
        for _ in range(20):
            records = [
                margin(identity, float(rng.choice([-0.5, 0.0, 0.2, 0.7])))
                for identity in range(50)
                for _ in range(int(rng.integers(1, 7)))
            ]
            assert ssr_pa(records) == brute_force_ssr_pa(records)

    def test_ssr_never_exceeds_pa_with_equal_counts(self, rng):
        for _ in range(1000):
            deltas = rng.normal(0.2, 0.5, size=(10, 4))
            records = [margin(i, float(d)) for i in range(10) for d in deltas[i]]
            ssr, pa = ssr_pa(records)
            assert ssr <= pa


class TestPoolSources:
    def test_single_source(self):
        assert pool_sources([(0.7, 0.9, 12)]) == pytest.approx((0.7, 0.9))

    def test_support_weighted(self):
        ssr, _ = pool_sources([(0.9, 0.95, 100), (0.5, 0.75, 300)])
        assert ssr == pytest.approx(0.6)

    def test_equal_weights_is_plain_mean(self):
        assert pool_sources([(0.2, 0.4, 5), (0.6, 0.8, 5)]) == pytest.approx((0.4, 0.6))

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            pool_sources([])

    def test_zero_support(self):
        with pytest.raises(ValueError):
            pool_sources([(0.5, 0.5, 0)])


class TestAlignment:
    def test_exact_agreement(self, rng):
        scores = rng.random(24)
        groups = np.repeat(np.arange(6), 4)
        assert alignment(scores, scores, groups) == pytest.approx(1.0)

    def test_independent_scores(self, rng):
        groups = np.repeat(np.arange(100), 8)
        result = alignment(rng.random(800), rng.random(800), groups)
        assert abs(result) < 0.15

    def test_single_group_is_pearson(self, rng):
        x, y = rng.random(7), rng.random(7)
        assert alignment(x, y, [0] * 7) == pytest.approx(pearson(x, y), abs=1e-9)

    def test_constant_and_singleton_groups_are_skipped(self, rng):
        x = [0.1, 0.5, 0.9, 0.3, 0.3, 0.8]
        y = [0.2, 0.4, 0.95, 0.6, 0.6, 0.1]
        groups = [0, 0, 0, 1, 1, 2]
        assert alignment(x, y, groups) == pytest.approx(pearson(x[:3], y[:3]), abs=1e-9)

    def test_no_valid_group(self):
        with pytest.raises(NoValidGroupsError):
            alignment([0.1, 0.2], [0.5, 0.5], [0, 0])


class TestKPCA:
    def test_linear_kernel_matches_pca(self, rng):
        X = rng.standard_normal((100, 5)) + 3.0
        centered = X - X.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        scores = centered @ vt[:2].T
        coords = kpca_project(list(X))
        for axis in range(2):
            sign = np.sign(coords[:, axis] @ scores[:, axis])
            np.testing.assert_allclose(coords[:, axis], sign * scores[:, axis], atol=1e-9)

    def test_isosceles_points_are_mirror_images(self):
        coords = kpca_project([np.array([0.0, 1.0]), np.array([-1.0, 0.0]), np.array([1.0, 0.0])])
        assert coords[0, 0] == pytest.approx(0.0, abs=1e-9)
        assert coords[1, 0] == pytest.approx(-coords[2, 0])
        assert coords[1, 1] == pytest.approx(coords[2, 1])

    def test_duplicated_points_get_duplicated_coordinates(self, rng):
        X = rng.standard_normal((5, 4))
        coords = kpca_project(list(X) + list(X))
        np.testing.assert_allclose(coords[:5], coords[5:], atol=1e-9)

    def test_rotation_preserves_pairwise_distances(self, rng):
        X = rng.standard_normal((8, 4))
        Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        before = kpca_project(list(X))
        after = kpca_project(list(X @ Q))

        def distances(c):
            return np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)

        np.testing.assert_allclose(distances(after), distances(before), atol=1e-9)

    def test_sign_convention(self, rng):
        coords = kpca_project(list(rng.standard_normal((6, 3))))
        for axis in range(2):
            assert coords[np.argmax(np.abs(coords[:, axis])), axis] > 0

    def test_collinear_points_zero_second_axis(self):
        coords = kpca_project([np.array([t, 2.0 * t]) for t in (0.0, 1.0, 3.0)])
        np.testing.assert_array_equal(coords[:, 1], 0.0)
        assert np.any(coords[:, 0] != 0.0)

    def test_rbf_kernel(self, rng):
        coords = kpca_project(list(rng.standard_normal((6, 3))), KernelType.RBF, gamma=0.5)
        assert coords.shape == (6, 2)
        assert np.all(np.isfinite(coords))

    def test_needs_three_points(self, rng):
        with pytest.raises(InsufficientPointsError):
            kpca_project(list(rng.standard_normal((2, 3))))


def frozen_service(world, **options):
    return EvaluationService(world, FrozenEncoder().embed, EvalOptions(**options))


PROVENANCE = make_provenance(7, "0" * 16, "frozen")


class TestEvaluationService:
    def test_report_is_consistent(self, small_world):
        report = frozen_service(small_world).evaluate("test", PROVENANCE)
        assert 0.0 <= report.ssr <= 1.0 and 0.0 <= report.pa <= 1.0
        assert set(report.per_source) == {"0", "1", "2"}
        assert [report.per_source[k].held_out for k in ("0", "1", "2")] == [False, False, True]
        assert report.n_samples == sum(s.n for s in report.per_source.values())
        assert report.n_margins == sum(s.n_margins for s in report.per_source.values())
        assert sum(report.margin_histogram.counts) == report.n_margins
        assert len(report.margin_histogram.edges) == 21
        assert len(report.edit_scores) == 6 * 2
        assert 0.0 <= report.retrieval_recall_at_1 <= 1.0
        assert report.train_ssr is not None and report.held_out_ssr is not None
        assert report.provenance.embedder == "frozen"
        assert report.projection_coords is None

    def test_pooled_scores_weight_sources_by_support(self, small_world):
        report = frozen_service(small_world).evaluate("test", PROVENANCE)
        expected = pool_sources([(s.ssr, s.pa, s.n) for s in report.per_source.values()])
        assert (report.ssr, report.pa) == pytest.approx(expected)

    def test_evaluation_is_bit_identical(self, small_world):
        first = frozen_service(small_world).evaluate("test", PROVENANCE)
        second = frozen_service(small_world).evaluate("test", PROVENANCE)
        assert first.model_dump_json() == second.model_dump_json()

    def test_margins_match_direct_computation(self, small_world):
        service = frozen_service(small_world)
        report = service.evaluate("test", PROVENANCE)
        identity = small_world.identities("test")[0]
        views = small_world.views(identity)
        matched = [service._matched(identity, v.view_index, 0) for v in views]
        expected = directed_margins(
            [service.embedding(v) for v in views],
            [service.embedding(m) for m in matched],
        )
        per_source = service.margins([identity], [0], {})[0]
        assert [r.delta for r in per_source] == [r.delta for r in expected]
        assert report.per_source["0"].n_margins >= len(expected)

    def test_source_filter(self, small_world):
        report = frozen_service(small_world, sources=SourceFilter.HELD_OUT).evaluate("test", PROVENANCE)
        assert set(report.per_source) == {"2"}
        assert report.train_ssr is None
        assert report.held_out_ssr == report.ssr

    def test_foreground_only_changes_embeddings(self, small_world):
        plain = frozen_service(small_world)
        masked = frozen_service(small_world, fg_only=True)
        record = small_world.views(small_world.identities("test")[0])[0]
        plain.embed_records([record])
        masked.embed_records([record])
        assert not np.allclose(plain.embedding(record), masked.embedding(record))

    def test_projection(self, small_world):
        report = frozen_service(small_world, kpca=True).evaluate("test", PROVENANCE)
        n_views = sum(len(small_world.views(i)) for i in small_world.identities("test"))
        assert len(report.projection_coords) == len(report.projection_labels) == 2 * n_views

    def test_missing_split(self, small_world):
        with pytest.raises(MissingSplitError):
            frozen_service(small_world).evaluate("holdout", PROVENANCE)

    def test_edit_scores_follow_the_manifest(self, small_world):
        report = frozen_service(small_world).evaluate("val", PROVENANCE)
        by_id = small_world.by_id
        for score in report.edit_scores:
            assert score.severity == by_id[score.sample_id].oracle_severity
            assert -1.0 - 1e-12 <= score.similarity <= 1.0 + 1e-12

    def test_every_identity_and_pair_is_scored_once_per_source(self, small_world):
        service = frozen_service(small_world)
        service.evaluate("test", PROVENANCE)
        records = service.margins(small_world.identities("test"), [1], {})[1]
        keys = [(r.identity_id, r.pair, r.direction) for r in records]
        assert len(keys) == len(set(keys))
        expected = sum(len(list(itertools.combinations(small_world.views(i), 2))) * 2 for i in small_world.identities("test"))
        assert len(records) == expected
