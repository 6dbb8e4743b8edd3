"""Retrieval evaluation: feature extraction from a checkpoint, the
cross-camera ranking protocol with junk handling, CMC / mAP computation, and
k-reciprocal re-ranking.

Average precision is accumulated sequentially in Python floats (one addition
per correct match, in rank order). Any straightforward reference
implementation that walks the ranked list does the same additions in the same
order, so the two agree to the last bit, not just to a tolerance.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Components, DatasetManifest, PersonSample
from .fusion import EmbeddingRecord, fusion_input, fuse_batch, head_forward, make_embedding_record
from .gat import encode_graphs
from .kernels import BACKEND
from .trainkit import Checkpoint, IdentityOverlap, load_checkpoint, prepare_graph
from .visual import encode_image, preprocess

logger = logging.getLogger(__name__)

DEFAULT_K1 = 20
DEFAULT_K2 = 6
DEFAULT_LAMBDA = 0.3


class NoValidPositives(ValueError):
    """Every query was dropped; the protocol leaves nothing to rank."""


@dataclass
class EvalOptions:
    rerank: bool = True
    k1: int = DEFAULT_K1
    k2: int = DEFAULT_K2
    lambda_rr: float = DEFAULT_LAMBDA
    cross_dataset: bool = False
    max_rank: int = 50
    batch_size: int = 64


@dataclass
class QueryResult:
    image_id: str
    identity: int
    camera: int
    first_match_rank: int  # 1-based
    average_precision: float


@dataclass
class RankingMetrics:
    cmc: np.ndarray  # (max_rank,) fraction of queries matched by rank k+1
    mean_ap: float
    per_query: list[QueryResult]
    num_valid_queries: int
    num_dropped_queries: int

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    @property
    def rank5(self) -> float:
        return float(self.cmc[4]) if len(self.cmc) >= 5 else float(self.cmc[-1])


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of a and rows of b.

    On unit-normalized rows this equals 2 - 2 cos(a, b), so it induces the
    same ranking as cosine similarity.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a2 = np.sum(a * a, axis=1)[:, None]
    b2 = np.sum(b * b, axis=1)[None, :]
    d2 = a2 + b2 - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def cmc_map(
    dist: np.ndarray,
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    max_rank: int = 50,
    query_image_ids: list[str] | None = None,
) -> RankingMetrics:
    """CMC curve and mean average precision under the cross-camera protocol.

    Per query: gallery images with identity -1 are removed, images sharing
    both the query identity and the query camera are removed, identity-0
    distractors stay as negatives. Queries with non-positive identity or with
    no remaining positive are dropped (counted, not scored). Ties in the
    distance row are broken by original gallery order (stable sort).
    """
    dist = np.asarray(dist)
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    if dist.shape != (len(query_ids), len(gallery_ids)):
        raise ValueError(
            f"distance matrix {dist.shape} does not match "
            f"{len(query_ids)} queries x {len(gallery_ids)} gallery"
        )
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    max_rank = min(max_rank, len(gallery_ids))

    cmc_counts = np.zeros(max_rank, dtype=np.int64)
    per_query: list[QueryResult] = []
    ap_values: list[float] = []
    dropped = 0
    for qi in range(len(query_ids)):
        qid = int(query_ids[qi])
        qcam = int(query_cams[qi])
        if qid <= 0:
            dropped += 1
            continue
        keep = (gallery_ids != -1) & ~((gallery_ids == qid) & (gallery_cams == qcam))
        kept = np.nonzero(keep)[0]
        order = kept[np.argsort(dist[qi, kept], kind="stable")]
        matches = gallery_ids[order] == qid
        num_pos = int(matches.sum())
        if num_pos == 0:
            dropped += 1
            continue
        match_ranks = np.nonzero(matches)[0] + 1  # 1-based ranks of positives
        first = int(match_ranks[0])
        if first <= max_rank:
            cmc_counts[first - 1 :] += 1
        ap = 0.0
        for hits, rank in enumerate(match_ranks.tolist(), start=1):
            ap += hits / rank
        ap = ap / num_pos
        ap_values.append(ap)
        per_query.append(
            QueryResult(
                image_id=query_image_ids[qi] if query_image_ids else str(qi),
                identity=qid,
                camera=qcam,
                first_match_rank=first,
                average_precision=ap,
            )
        )
    if not ap_values:
        raise NoValidPositives("no query has a valid positive in the gallery")
    num_valid = len(ap_values)
    return RankingMetrics(
        cmc=cmc_counts / num_valid,
        mean_ap=sum(ap_values) / num_valid,
        per_query=per_query,
        num_valid_queries=num_valid,
        num_dropped_queries=dropped,
    )


# ---------------------------------------------------------------------------
# k-reciprocal re-ranking


def _k_reciprocal_neighbors(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    return forward[np.where(backward == i)[0]]


def k_reciprocal_rerank(
    query_feats: np.ndarray,
    gallery_feats: np.ndarray,
    k1: int = DEFAULT_K1,
    k2: int = DEFAULT_K2,
    lambda_value: float = DEFAULT_LAMBDA,
) -> np.ndarray:
    """Re-ranked query-to-gallery distances via k-reciprocal neighbor sets.

    Every point's k-reciprocal neighborhood (expanded by half-size
    neighborhoods that overlap more than two thirds) is encoded as a
    Gaussian-weighted sparse vector; local query expansion averages the k2
    nearest vectors; the Jaccard distance between vectors is blended with the
    original distance: lambda * original + (1 - lambda) * jaccard. With
    lambda_value=1.0 the output equals the raw query-gallery distances.
    """
    nq = query_feats.shape[0]
    feats = np.concatenate([query_feats, gallery_feats], axis=0)
    n_all = feats.shape[0]
    if k1 + 1 > n_all:
        warnings.warn(f"k1={k1} too large for {n_all} points, clamping to {n_all - 1}")
        k1 = n_all - 1
    if k2 > n_all:
        warnings.warn(f"k2={k2} too large for {n_all} points, clamping to {n_all}")
        k2 = n_all
    if k1 < 1 or k2 < 1:
        raise ValueError("k1 and k2 must be >= 1")
    if not 0.0 <= lambda_value <= 1.0:
        warnings.warn(f"lambda {lambda_value} outside [0, 1], clamping")
        lambda_value = min(max(lambda_value, 0.0), 1.0)

    dist_all = pairwise_distances(feats, feats)
    # Recomputed rather than sliced out of dist_all: matmul rounding depends
    # on operand shapes, and the lambda=1 blend must reproduce the plain
    # query-gallery distances bit for bit.
    raw_qg = pairwise_distances(query_feats, gallery_feats)

    # Row-max normalization keeps exp(-d) weights in a sane range.
    row_max = dist_all.max(axis=1, keepdims=True)
    row_max = np.where(row_max > 0.0, row_max, 1.0)
    dn = dist_all / row_max
    initial_rank = np.argsort(dn, axis=1, kind="stable")

    V = np.zeros((n_all, n_all), dtype=np.float64)
    half = int(round(k1 / 2))
    for i in range(n_all):
        reciprocal = _k_reciprocal_neighbors(initial_rank, i, k1)
        expansion = reciprocal
        for candidate in reciprocal:
            cand_reciprocal = _k_reciprocal_neighbors(initial_rank, int(candidate), half)
            if len(np.intersect1d(cand_reciprocal, reciprocal)) > 2.0 / 3.0 * len(
                cand_reciprocal
            ):
                expansion = np.append(expansion, cand_reciprocal)
        expansion = np.unique(expansion)
        weights = np.exp(-dn[i, expansion])
        V[i, expansion] = weights / np.sum(weights)

    if k2 > 1:
        V = np.stack([V[initial_rank[i, :k2]].mean(axis=0) for i in range(n_all)])

    inverted = [np.where(V[:, j] != 0)[0] for j in range(n_all)]
    jaccard = np.zeros((nq, n_all), dtype=np.float64)
    for i in range(nq):
        sum_min = np.zeros(n_all, dtype=np.float64)
        nonzero = np.where(V[i] != 0)[0]
        for j in nonzero:
            rows = inverted[j]
            sum_min[rows] += np.minimum(V[i, j], V[rows, j])
        # Rows of V are L1-normalized, so sum(max) = 2 - sum(min).
        jaccard[i] = 1.0 - sum_min / (2.0 - sum_min)

    return jaccard[:, nq:] * (1.0 - lambda_value) + raw_qg * lambda_value


# ---------------------------------------------------------------------------
# Checkpoint evaluation


def extract_embeddings(
    ckpt: Checkpoint,
    samples: list[PersonSample],
    components: Components,
    batch_size: int = 64,
) -> list[EmbeddingRecord]:
    """Post-normalization-head features for a list of samples, L2-normalized.

    Graphs in a chunk never share edges or pooled rows, so chunk boundaries
    only move results at the level of matmul rounding; a fixed batch size
    reproduces identical bytes.
    """
    model = ckpt.model
    records: list[EmbeddingRecord] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        if model.fusion_mode != "graph_only":
            visual = np.stack(
                [
                    encode_image(
                        preprocess(Path(s.image_path).read_bytes()),
                        components.backbone,
                        image_id=s.image_id,
                    )
                    for s in chunk
                ]
            )
        else:
            visual = None
        if model.fusion_mode != "visual_only":
            graphs = [
                prepare_graph(
                    components.graph_store.get(s.image_id),
                    components.embed_client,
                    strict_person=components.strict_person,
                )
                for s in chunk
            ]
            graph_out, _ = encode_graphs(model.encoder, graphs)
        else:
            graph_out = None
        x = fusion_input(visual, graph_out, model.fusion_mode)
        fused, _ = fuse_batch(model.fusion, x)
        feats, _, _ = head_forward(fused, model.head, mode="eval")
        for row, s in zip(feats, chunk):
            records.append(
                make_embedding_record(
                    image_id=s.image_id,
                    label=s.identity,
                    camera=s.camera,
                    bn_feature=row,
                    split=s.split,
                )
            )
    return records


@dataclass
class EvalReport:
    source_dataset: str
    target_dataset: str
    cross_dataset: bool
    rank1: float
    rank5: float
    mean_ap: float
    cmc: list[float]
    num_valid_queries: int
    num_dropped_queries: int
    num_gallery: int
    reranked: bool
    rerank_k1: int
    rerank_k2: int
    rerank_lambda: float
    checkpoint_epoch: int
    kernel_backend: str = BACKEND
    per_query: list[QueryResult] = field(default_factory=list)

    def to_document(self) -> dict:
        doc = {
            "source_dataset": self.source_dataset,
            "target_dataset": self.target_dataset,
            "cross_dataset": self.cross_dataset,
            "rank1": self.rank1,
            "rank5": self.rank5,
            "mean_ap": self.mean_ap,
            "cmc": self.cmc,
            "num_valid_queries": self.num_valid_queries,
            "num_dropped_queries": self.num_dropped_queries,
            "num_gallery": self.num_gallery,
            "reranked": self.reranked,
            "rerank_k1": self.rerank_k1,
            "rerank_k2": self.rerank_k2,
            "rerank_lambda": self.rerank_lambda,
            "checkpoint_epoch": self.checkpoint_epoch,
            "kernel_backend": self.kernel_backend,
        }
        return doc

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "report.json").write_text(
            json.dumps(self.to_document(), indent=2) + "\n", encoding="utf-8"
        )
        with open(path / "per_query.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["image_id", "identity", "camera", "first_match_rank", "average_precision"]
            )
            for q in self.per_query:
                writer.writerow(
                    [q.image_id, q.identity, q.camera, q.first_match_rank, repr(q.average_precision)]
                )


def evaluate(
    ckpt: Checkpoint,
    manifest: DatasetManifest,
    components: Components,
    options: EvalOptions | None = None,
) -> EvalReport:
    """Rank the manifest's query split against its gallery split using
    features from the checkpoint.

    Training identities baked into the checkpoint must be disjoint from the
    evaluation identities unless options.cross_dataset is set, in which case
    the check is skipped (the checkpoint came from a different corpus and
    identity numbers are unrelated).
    """
    options = options or EvalOptions()
    eval_ids = {
        i
        for i in manifest.identities("query") | manifest.identities("gallery")
        if i > 0
    }
    if not options.cross_dataset:
        overlap = set(ckpt.train_raw_ids) & eval_ids
        if overlap:
            raise IdentityOverlap(
                f"checkpoint training identities appear in the evaluation splits: "
                f"{sorted(overlap)[:5]}"
            )
    query = manifest.split_samples("query")
    gallery = manifest.split_samples("gallery")
    if not query or not gallery:
        raise ValueError("manifest needs non-empty query and gallery splits")

    q_records = extract_embeddings(ckpt, query, components, options.batch_size)
    g_records = extract_embeddings(ckpt, gallery, components, options.batch_size)
    qf = np.stack([r.feature for r in q_records])
    gf = np.stack([r.feature for r in g_records])

    if options.rerank:
        dist = k_reciprocal_rerank(qf, gf, options.k1, options.k2, options.lambda_rr)
    else:
        dist = pairwise_distances(qf, gf)

    metrics = cmc_map(
        dist,
        np.array([s.identity for s in query]),
        np.array([s.camera for s in query]),
        np.array([s.identity for s in gallery]),
        np.array([s.camera for s in gallery]),
        max_rank=options.max_rank,
        query_image_ids=[s.image_id for s in query],
    )
    return EvalReport(
        source_dataset=ckpt.dataset_name,
        target_dataset=manifest.name,
        cross_dataset=options.cross_dataset,
        rank1=metrics.rank1,
        rank5=metrics.rank5,
        mean_ap=metrics.mean_ap,
        cmc=[float(v) for v in metrics.cmc],
        num_valid_queries=metrics.num_valid_queries,
        num_dropped_queries=metrics.num_dropped_queries,
        num_gallery=len(gallery),
        reranked=options.rerank,
        rerank_k1=options.k1,
        rerank_k2=options.k2,
        rerank_lambda=options.lambda_rr,
        checkpoint_epoch=ckpt.epoch,
        per_query=metrics.per_query,
    )


def evaluate_checkpoint(
    checkpoint_dir: str | Path,
    manifest: DatasetManifest,
    components: Components,
    options: EvalOptions | None = None,
) -> EvalReport:
    return evaluate(load_checkpoint(checkpoint_dir), manifest, components, options)
