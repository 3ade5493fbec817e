"""Cross-modal retrieval: similarity matrices, Recall@K and median rank."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError

DIRECTIONS = ("audio_to_image", "image_to_audio")


def similarity_matrix(audio: np.ndarray, image: np.ndarray) -> np.ndarray:
    """``S[i, j] = <audio_i, image_j>``; the ground truth is the diagonal."""
    audio, image = np.asarray(audio), np.asarray(image)
    if audio.ndim != 2 or audio.shape != image.shape:
        raise ShapeError(f"need equal (N, D) embeddings, got {audio.shape} and {image.shape}")
    return audio @ image.T


def true_ranks(S: np.ndarray, direction: str = "audio_to_image") -> np.ndarray:
    """0-based rank of the correct item per query.

    Ties go to the lower index: a competitor ``j`` outranks the true item
    ``i`` if its score is higher, or equal with ``j < i``.
    """
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {S.shape}")
    if direction == "image_to_audio":
        S = S.T
    elif direction != "audio_to_image":
        raise ValueError(f"unknown direction {direction!r}")
    N = S.shape[0]
    pos = np.diag(S)[:, None]
    lower = np.arange(N)[None, :] < np.arange(N)[:, None]
    return ((S > pos) | ((S == pos) & lower)).sum(axis=1)


def recall_at_k(S: np.ndarray, k: int, direction: str = "audio_to_image") -> float:
    N = np.asarray(S).shape[0]
    if not 1 <= k <= N:
        raise ValueError(f"K={k} outside [1, N={N}]")
    return float(np.mean(true_ranks(S, direction) < k))


@dataclass
class RetrievalReport:
    n: int
    recall: dict[str, dict[int, float]] = field(default_factory=dict)
    median_rank: dict[str, float] = field(default_factory=dict)

    def mean_recall(self, k: int) -> float:
        return float(np.mean([self.recall[d][k] for d in DIRECTIONS]))

    @property
    def ks(self) -> list[int]:
        return sorted(self.recall[DIRECTIONS[0]])

    def rows(self) -> list[dict]:
        out = []
        for d in DIRECTIONS:
            row = {"direction": d, "N": self.n}
            row.update({f"R@{k}": self.recall[d][k] for k in self.ks})
            row["median_rank"] = self.median_rank[d]
            out.append(row)
        mean = {"direction": "mean", "N": self.n}
        mean.update({f"R@{k}": self.mean_recall(k) for k in self.ks})
        mean["median_rank"] = float(np.mean([self.median_rank[d] for d in DIRECTIONS]))
        out.append(mean)
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())

    def to_text(self) -> str:
        return rows_to_text(self.rows())


def report_from_similarity(S: np.ndarray, ks: Sequence[int] = (1, 5, 10)) -> RetrievalReport:
    N = S.shape[0]
    rep = RetrievalReport(N)
    for d in DIRECTIONS:
        ranks = true_ranks(S, d)
        rep.recall[d] = {k: float(np.mean(ranks < k)) for k in ks if k <= N}
        rep.median_rank[d] = float(np.median(ranks + 1))
    return rep


def evaluate_retrieval(model, pairs, ks: Sequence[int] = (1, 5, 10), crop_length: int = 128) -> RetrievalReport:
    """Embed every pair once in inference mode and score both directions."""
    from .training import embed_pairs

    if len(pairs) == 0:
        raise ValueError("retrieval pool is empty")
    audio, image = embed_pairs(model, pairs, crop_length)
    return report_from_similarity(similarity_matrix(audio, image), ks)


# -- table rendering shared by the reports ---------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def rows_to_text(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)), "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths))) for row in cells]
    return "\n".join(lines) + "\n"
