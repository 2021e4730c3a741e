import numpy as np
import pytest

from src.models.errors import DimensionMismatchError, EmptyInputError
from src.services.index_service import EmbeddingIndex, recall_at_1


@pytest.fixture
def index():
    index = EmbeddingIndex()
    index.add_embeddings(np.eye(3) * 2.0, ["a", "b", "c"])
    return index


def test_add_normalizes_and_counts(index):
    assert index.get_stats() == {"total_vectors": 3, "dimension": 3, "index_type": "IndexFlatIP"}
    hits = index.search(np.array([[5.0, 0.0, 0.0]]), top_k=1)
    assert hits[0][0][0] == "a"
    assert hits[0][0][1] == pytest.approx(1.0, abs=1e-6)


def test_search_orders_by_cosine(index):
    hits = index.search(np.array([0.1, 0.9, 0.3]), top_k=3)
    assert [sample_id for sample_id, _ in hits[0]] == ["b", "c", "a"]


def test_top_k_is_capped(index):
    assert len(index.search(np.ones((2, 3)), top_k=10)[1]) == 3


def test_empty_index_returns_no_hits():
    assert EmbeddingIndex().search(np.ones((2, 4)), top_k=1) == [[], []]
    assert EmbeddingIndex().get_stats()["total_vectors"] == 0


def test_dimension_checks(index):
    with pytest.raises(DimensionMismatchError):
        index.add_embeddings(np.ones((1, 4)), ["d"])
    with pytest.raises(DimensionMismatchError):
        index.add_embeddings(np.ones((2, 3)), ["d"])
    with pytest.raises(EmptyInputError):
        index.add_embeddings(np.zeros((0, 3)), [])


class TestRecallAtOne:
    def test_excludes_the_query_itself(self):
        gallery = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
        recall = recall_at_1(
            queries=gallery[[0, 2]],
            query_ids=["q0", "q2"],
            query_labels=[0, 1],
            gallery=gallery,
            gallery_ids=["q0", "g1", "q2", "g3"],
            gallery_labels=[0, 0, 1, 1],
        )
        assert recall == 1.0

    def test_confounders_steal_the_top_hit(self):
        gallery = np.array([[1.0, 0.0], [0.0, 1.0], [0.99, 0.05]])
        recall = recall_at_1(
            queries=gallery[[0]],
            query_ids=["anchor"],
            query_labels=[7],
            gallery=gallery,
            gallery_ids=["anchor", "view", "distractor"],
            gallery_labels=[7, 7, -1],
        )
        assert recall == 0.0

    def test_logs_gallery_size(self, caplog):
        gallery = np.eye(2)
        with caplog.at_level("DEBUG", logger="src.services.index_service"):
            recall_at_1(gallery[[0]], ["a"], [0], gallery, ["a", "b"], [0, 1])
        assert "'total_vectors': 2" in caplog.text

    def test_needs_queries(self):
        with pytest.raises(EmptyInputError):
            recall_at_1(np.zeros((0, 2)), [], [], np.eye(2), ["a", "b"], [0, 1])
