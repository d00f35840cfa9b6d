"""Query/gallery ranking with mAP, CMC-k and mINP.

Directions: a2g (aerial queries, ground gallery), g2a (the reverse) and all.
Ties in distance are broken by gallery position so results are stable.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from utils.errors import EmptyGallery, InvalidParam, NoValidQueries, OracleMismatch, ShapeMismatch

logger = logging.getLogger(__name__)

DIRECTIONS = {"a2g": ("aerial", "ground"), "g2a": ("ground", "aerial"), "all": (None, None)}
GALLERY_MODES = ("cross", "all")
REPORT_RANKS = (1, 5, 10, 20)


def distance_matrix(query: np.ndarray, gallery: np.ndarray, threads: int = 1, chunk: int = 64) -> np.ndarray:
    """Euclidean query×gallery distances, rows computed in parallel chunks"""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ShapeMismatch(f"embedding shapes {query.shape} and {gallery.shape} do not align")

    def rows(start: int) -> np.ndarray:
        block = query[start:start + chunk]
        return np.sqrt(((block[:, None, :] - gallery[None, :, :]) ** 2).sum(axis=2))

    starts = list(range(0, len(query), chunk))
    if not starts:
        return np.zeros((0, len(gallery)))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        blocks = list(pool.map(rows, starts))
    return np.vstack(blocks)


def export_distance_matrix(path: Union[str, Path], matrix: np.ndarray,
                           query_ids: Sequence[str], gallery_ids: Sequence[str]) -> None:
    frame = pd.DataFrame(matrix, index=pd.Index(list(query_ids), name="query_id"), columns=list(gallery_ids))
    frame.to_csv(path, float_format="%.10g")


@dataclass(frozen=True)
class QueryRanking:
    query_index: int
    order: np.ndarray
    matches: np.ndarray
    query_platform: str
    gallery_filter: str


@dataclass
class RankingResult:
    rankings: List[QueryRanking]
    dropped: List[int] = field(default_factory=list)


@dataclass
class EvaluationReport:
    direction: str
    gallery_mode: str
    mAP: float
    cmc: np.ndarray
    mINP: float
    num_queries: int
    gallery_size: int
    per_query_ap: Dict[str, float] = field(default_factory=dict)
    model: str = "baseline"
    distmat: Optional[np.ndarray] = None
    query_ids: List[str] = field(default_factory=list)
    gallery_ids: List[str] = field(default_factory=list)

    def rank(self, k: int) -> float:
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def direction_filter(query: pd.DataFrame, gallery: pd.DataFrame, direction: str,
                     gallery_mode: str = "cross") -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Restrict queries/gallery to one cross-platform direction"""
    if direction not in DIRECTIONS:
        raise InvalidParam(f"unknown direction {direction!r}; expected one of {sorted(DIRECTIONS)}")
    if gallery_mode not in GALLERY_MODES:
        raise InvalidParam(f"unknown gallery mode {gallery_mode!r}")
    query_platform, gallery_platform = DIRECTIONS[direction]
    if query_platform is None:
        return query.reset_index(drop=True), gallery.reset_index(drop=True)
    query = query[query["platform"] == query_platform]
    if gallery_mode == "cross":
        gallery = gallery[gallery["platform"] == gallery_platform]
    return query.reset_index(drop=True), gallery.reset_index(drop=True)


def excludes_same_camera(direction: str, gallery_mode: str) -> bool:
    return direction == "all" or gallery_mode == "all"


def average_precision(matches: np.ndarray) -> float:
    """Mean of precision@rank over the ranks holding true matches"""
    matches = np.asarray(matches, dtype=bool)
    hits = np.flatnonzero(matches)
    if len(hits) == 0:
        return 0.0
    precision = np.arange(1, len(hits) + 1) / (hits + 1.0)
    return float(precision.mean())


def inverse_negative_penalty(matches: np.ndarray) -> float:
    hits = np.flatnonzero(np.asarray(matches, dtype=bool))
    if len(hits) == 0:
        return 0.0
    return float(len(hits) / (hits[-1] + 1.0))


def rank_queries(distmat: np.ndarray, query_pids: Sequence, gallery_pids: Sequence,
                 query_cams: Sequence, gallery_cams: Sequence, query_platforms: Sequence,
                 exclude_same_camera: bool = False, gallery_filter: str = "", threads: int = 1) -> RankingResult:
    distmat = np.asarray(distmat, dtype=np.float64)
    q_pids, g_pids = np.asarray(query_pids), np.asarray(gallery_pids)
    q_cams, g_cams = np.asarray(query_cams), np.asarray(gallery_cams)
    if distmat.shape != (len(q_pids), len(g_pids)):
        raise ShapeMismatch(f"distance matrix {distmat.shape} vs {len(q_pids)} queries / {len(g_pids)} gallery")
    positions = np.arange(len(g_pids))

    def rank_one(q: int) -> Optional[QueryRanking]:
        valid = np.ones(len(g_pids), dtype=bool)
        if exclude_same_camera:
            valid &= ~((g_pids == q_pids[q]) & (g_cams == q_cams[q]))
        candidates = positions[valid]
        order = candidates[np.lexsort((candidates, distmat[q, candidates]))]
        matches = g_pids[order] == q_pids[q]
        if not matches.any():
            return None
        return QueryRanking(q, order, matches, str(query_platforms[q]), gallery_filter)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        ranked = list(pool.map(rank_one, range(len(q_pids))))
    result = RankingResult([r for r in ranked if r is not None],
                           [q for q, r in enumerate(ranked) if r is None])
    if result.dropped:
        logger.warning(f"Dropped {len(result.dropped)} queries without a true match in the gallery")
    return result


def summarize(ranking: RankingResult, gallery_size: int, direction: str, gallery_mode: str,
              query_ids: Optional[Sequence[str]] = None) -> EvaluationReport:
    if not ranking.rankings:
        raise NoValidQueries(f"no query has a true match in the {direction} gallery")
    # ordered reduction by query index keeps the float sums run-stable
    rankings = sorted(ranking.rankings, key=lambda r: r.query_index)
    aps = [average_precision(r.matches) for r in rankings]
    inps = [inverse_negative_penalty(r.matches) for r in rankings]
    cmc = np.zeros(gallery_size)
    for r in rankings:
        first = int(np.argmax(r.matches))
        cmc[first:] += 1
    cmc /= len(rankings)
    per_query = {}
    if query_ids is not None:
        per_query = {str(query_ids[r.query_index]): ap for r, ap in zip(rankings, aps)}
    return EvaluationReport(direction, gallery_mode, float(np.mean(aps)), cmc, float(np.mean(inps)),
                            len(rankings), gallery_size, per_query)


def evaluate(query: pd.DataFrame, gallery: pd.DataFrame, query_embeddings: np.ndarray,
             gallery_embeddings: np.ndarray, direction: str = "a2g", gallery_mode: str = "cross",
             threads: int = 1, model: str = "baseline") -> EvaluationReport:
    """mAP and CMC for one direction.

    `query`/`gallery` are manifest rows (person_id, camera_id, platform,
    image_id) aligned with the embedding rows.
    """
    query = query.assign(_row=np.arange(len(query)))
    gallery = gallery.assign(_row=np.arange(len(gallery)))
    q, g = direction_filter(query, gallery, direction, gallery_mode)
    if len(g) == 0:
        raise EmptyGallery(f"gallery is empty for direction {direction} ({gallery_mode})")
    if len(q) == 0:
        raise NoValidQueries(f"no queries for direction {direction}")
    q_emb = np.asarray(query_embeddings)[q["_row"].to_numpy()]
    g_emb = np.asarray(gallery_embeddings)[g["_row"].to_numpy()]
    distmat = distance_matrix(q_emb, g_emb, threads=threads)
    ranking = rank_queries(distmat, q["person_id"], g["person_id"], q["camera_id"], g["camera_id"],
                           q["platform"], excludes_same_camera(direction, gallery_mode),
                           f"{direction}/{gallery_mode}", threads=threads)
    report = summarize(ranking, len(g), direction, gallery_mode, list(q["image_id"]))
    report.model = model
    report.distmat = distmat
    report.query_ids, report.gallery_ids = list(q["image_id"]), list(g["image_id"])
    logger.info(f"{model} {direction} ({gallery_mode}): mAP {report.mAP:.4f}, rank-1 {report.rank(1):.4f}, "
                f"{report.num_queries} queries, {len(g)} gallery images")
    return report


def brute_force_metrics(distmat: np.ndarray, query_pids: Sequence, gallery_pids: Sequence,
                        query_cams: Optional[Sequence] = None, gallery_cams: Optional[Sequence] = None,
                        exclude_same_camera: bool = False) -> Tuple[float, np.ndarray]:
    """Independent O(n²)-per-query reference using exact rational arithmetic"""
    distmat = np.asarray(distmat, dtype=np.float64)
    n_q, n_g = distmat.shape
    query_cams = list(query_cams) if query_cams is not None else [None] * n_q
    gallery_cams = list(gallery_cams) if gallery_cams is not None else [None] * n_g
    ap_sum = Fraction(0)
    first_hits: List[int] = []
    for q in range(n_q):
        valid = [j for j in range(n_g)
                 if not (exclude_same_camera and gallery_pids[j] == query_pids[q] and gallery_cams[j] == query_cams[q])]
        ranks = {}
        for j in valid:
            ahead = sum(1 for l in valid
                        if distmat[q, l] < distmat[q, j] or (distmat[q, l] == distmat[q, j] and l < j))
            ranks[j] = ahead + 1
        match_ranks = sorted(ranks[j] for j in valid if gallery_pids[j] == query_pids[q])
        if not match_ranks:
            continue
        ap = sum(Fraction(i + 1, r) for i, r in enumerate(match_ranks)) / len(match_ranks)
        ap_sum += ap
        first_hits.append(match_ranks[0])
    if not first_hits:
        raise NoValidQueries("no query has a true match")
    cmc = np.array([float(Fraction(sum(1 for h in first_hits if h <= k), len(first_hits)))
                    for k in range(1, n_g + 1)])
    return float(ap_sum / len(first_hits)), cmc


def check_against_oracle(report: EvaluationReport, oracle_map: float, oracle_cmc: np.ndarray,
                         tolerance: float = 1e-12) -> None:
    if abs(report.mAP - oracle_map) > tolerance:
        raise OracleMismatch(f"mAP {report.mAP!r} disagrees with oracle {oracle_map!r}")
    if len(report.cmc) != len(oracle_cmc) or np.max(np.abs(report.cmc - oracle_cmc), initial=0.0) > tolerance:
        raise OracleMismatch(f"CMC curve disagrees with the oracle for {report.direction}")


def comparison_lines(reports: Sequence[EvaluationReport], baseline: str = "baseline",
                     candidate: str = "explainable") -> List[str]:
    """Side-by-side mAP / rank-1 for directions evaluated under both models"""
    by_key = {(rep.model, rep.direction): rep for rep in reports}
    lines = []
    for rep in reports:
        other = by_key.get((candidate, rep.direction))
        if rep.model != baseline or other is None:
            continue
        lines.append(f"[{baseline} vs {candidate} / {rep.direction}]")
        lines.append(f"  mAP     {rep.mAP:.2%} -> {other.mAP:.2%} ({other.mAP - rep.mAP:+.2%})")
        lines.append(f"  rank-1  {rep.rank(1):.2%} -> {other.rank(1):.2%} ({other.rank(1) - rep.rank(1):+.2%})")
    return lines


def write_reports(directory: Union[str, Path], reports: Sequence[EvaluationReport],
                  per_query: bool = False, distances: bool = False) -> Path:
    """report.csv / report.txt, plus per-query AP and distance matrices on request"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for rep in reports:
        row = {"model": rep.model, "direction": rep.direction, "gallery_mode": rep.gallery_mode,
               "mAP": rep.mAP, "mINP": rep.mINP}
        row.update({f"rank{k}": rep.rank(k) for k in REPORT_RANKS})
        row.update({"num_queries": rep.num_queries, "gallery_size": rep.gallery_size})
        rows.append(row)
    frame = pd.DataFrame(rows)
    frame.to_csv(directory / "report.csv", index=False, float_format="%.10g")
    lines = []
    for rep in reports:
        lines.append(f"[{rep.model} {rep.direction} / gallery {rep.gallery_mode}] queries={rep.num_queries} "
                     f"gallery={rep.gallery_size}")
        lines.append(f"  mAP   {rep.mAP:.2%}")
        lines.append(f"  mINP  {rep.mINP:.2%}")
        for k in REPORT_RANKS:
            lines.append(f"  CMC-{k:<3d}{rep.rank(k):.2%}")
    lines.extend(comparison_lines(reports))
    (directory / "report.txt").write_text("\n".join(lines) + "\n")
    if per_query:
        ap_rows = [{"model": rep.model, "direction": rep.direction, "query_id": qid, "AP": ap}
                   for rep in reports for qid, ap in rep.per_query_ap.items()]
        pd.DataFrame(ap_rows, columns=["model", "direction", "query_id", "AP"]).to_csv(
            directory / "per_query_ap.csv", index=False, float_format="%.10g")
    if distances:
        for rep in reports:
            if rep.distmat is None:
                raise InvalidParam(f"{rep.model} {rep.direction} report carries no distance matrix")
            export_distance_matrix(directory / f"distmat_{rep.model}_{rep.direction}.csv", rep.distmat,
                                   rep.query_ids, rep.gallery_ids)
    return directory / "report.csv"


def verify_with_oracle(report: EvaluationReport, query: pd.DataFrame, gallery: pd.DataFrame,
                       query_embeddings: np.ndarray, gallery_embeddings: np.ndarray, threads: int = 1) -> None:
    """Recompute `report` with the rational brute-force reference; OracleMismatch on any difference"""
    query = query.assign(_row=np.arange(len(query)))
    gallery = gallery.assign(_row=np.arange(len(gallery)))
    q, g = direction_filter(query, gallery, report.direction, report.gallery_mode)
    distmat = distance_matrix(np.asarray(query_embeddings)[q["_row"].to_numpy()],
                              np.asarray(gallery_embeddings)[g["_row"].to_numpy()], threads=threads)
    oracle_map, oracle_cmc = brute_force_metrics(distmat, list(q["person_id"]), list(g["person_id"]),
                                                 list(q["camera_id"]), list(g["camera_id"]),
                                                 excludes_same_camera(report.direction, report.gallery_mode))
    check_against_oracle(report, oracle_map, oracle_cmc)
    logger.info(f"{report.direction}: metrics agree with the brute-force oracle")
