import logging
from typing import Dict, List, Optional, Sequence, Tuple

import faiss
import numpy as np

from ..models.errors import DimensionMismatchError, EmptyInputError

logger = logging.getLogger(__name__)


class EmbeddingIndex:
    """In-memory FAISS inner-product index over unit embeddings, keyed by sample id."""

    def __init__(self):
        self.index: Optional[faiss.Index] = None
        self.sample_ids: Dict[int, str] = {}

    def create_index(self, dimension: int) -> None:
        """Create a new flat index; inner product equals cosine similarity on normalized vectors."""
        logger.debug(f"Creating FAISS index with dimension {dimension}")
        self.index = faiss.IndexFlatIP(dimension)
        self.sample_ids.clear()

    def add_embeddings(self, embeddings: np.ndarray, sample_ids: Sequence[str]) -> int:
        """
        Add embeddings to the index.

        Args:
            embeddings: Array of shape (n, d); rows are normalized before insertion
            sample_ids: One id per row

        Returns:
            Number of vectors now in the index
        """
        vectors = np.asarray(embeddings, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise EmptyInputError("No embeddings to add")
        if vectors.shape[0] != len(sample_ids):
            raise DimensionMismatchError(f"{vectors.shape[0]} embeddings but {len(sample_ids)} ids")

        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        zero = int(np.count_nonzero(norms[:, 0] == 0))
        if zero:
            logger.warning(f"{zero} zero-norm embedding(s) added unnormalized")
        vectors = np.where(norms > 0, vectors / np.where(norms > 0, norms, 1.0), vectors)

        if self.index is None:
            self.create_index(vectors.shape[1])
        elif self.index.d != vectors.shape[1]:
            raise DimensionMismatchError(f"Index dimension {self.index.d} vs embeddings {vectors.shape[1]}")

        start = self.index.ntotal
        self.index.add(np.ascontiguousarray(vectors, dtype=np.float32))
        for offset, sample_id in enumerate(sample_ids):
            self.sample_ids[start + offset] = sample_id
        return self.index.ntotal

    def search(self, queries: np.ndarray, top_k: int) -> List[List[Tuple[str, float]]]:
        """Top-k (sample_id, score) hits for each query row."""
        if self.index is None or self.index.ntotal == 0:
            logger.warning("No vectors in index for search")
            return [[] for _ in range(len(queries))]

        matrix = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        matrix = matrix / np.where(norms > 0, norms, 1.0)
        scores, indices = self.index.search(
            np.ascontiguousarray(matrix, dtype=np.float32),
            min(top_k, self.index.ntotal),
        )

        results: List[List[Tuple[str, float]]] = []
        for row_scores, row_indices in zip(scores, indices):
            hits = []
            for score, idx in zip(row_scores, row_indices):
                if idx == -1:  # FAISS pads missing hits with -1
                    continue
                hits.append((self.sample_ids[int(idx)], float(score)))
            results.append(hits)
        return results

    def get_stats(self) -> Dict:
        if self.index is None:
            return {"total_vectors": 0, "dimension": None, "index_type": None}
        return {
            "total_vectors": self.index.ntotal,
            "dimension": self.index.d,
            "index_type": type(self.index).__name__,
        }


def recall_at_1(
    queries: np.ndarray,
    query_ids: Sequence[str],
    query_labels: Sequence[int],
    gallery: np.ndarray,
    gallery_ids: Sequence[str],
    gallery_labels: Sequence[int],
) -> float:
    """
    Fraction of queries whose nearest gallery item (excluding the query's own sample id) carries
    the query's label. Gallery items whose label is -1 act as pure confounders.
    """
    if len(query_ids) == 0:
        raise EmptyInputError("recall_at_1 needs at least one query")
    index = EmbeddingIndex()
    index.add_embeddings(gallery, list(gallery_ids))
    label_of = dict(zip(gallery_ids, gallery_labels))

    logger.debug(f"recall@1 over {len(query_ids)} queries against {index.get_stats()}")
    hits = index.search(queries, top_k=2)
    correct = 0
    for query_id, label, row in zip(query_ids, query_labels, hits):
        top = next((sample_id for sample_id, _ in row if sample_id != query_id), None)
        if top is not None and label_of[top] == label:
            correct += 1
    return correct / len(query_ids)
