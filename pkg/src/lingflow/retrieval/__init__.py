from lingflow.retrieval.index import (
    DEFAULT_K,
    PageIndex,
    QueryEmbedding,
    RetrievalResult,
    as_embedding,
    build_index,
    load_index,
    load_query_embeddings,
    maxsim_score,
    retrieve_many,
    retrieve_topk,
    save_index,
)
from lingflow.retrieval.kernels import BACKEND
from lingflow.retrieval.metrics import mrr_at_k, recall_at_k, split_judged

__all__ = [
    "BACKEND",
    "DEFAULT_K",
    "PageIndex",
    "QueryEmbedding",
    "RetrievalResult",
    "as_embedding",
    "build_index",
    "load_index",
    "load_query_embeddings",
    "maxsim_score",
    "mrr_at_k",
    "recall_at_k",
    "retrieve_many",
    "retrieve_topk",
    "save_index",
    "split_judged",
]
