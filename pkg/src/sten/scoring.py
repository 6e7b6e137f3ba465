"""Inference-time anomaly scoring: per-sub-sequence order-discrepancy scores,
per-window distance-residual scores, their weighted combination, aggregation
to per-timestamp scores, and percentile thresholding.

No shuffling happens at inference: sub-sequences are presented in true order
with identity labels, which makes scoring fully deterministic given the seed
used for reference-pair sampling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import DataError
from .ndkernel import gru_forward, softmax
from .networks import OrderPrediction, embed_windows, pair_distance, sample_pairs
from .objectives import js_rows, otn_loss
from .seqdata import MultivariateSeries, Window, make_windows, zscore_apply
from .training import TrainedModel, _subseq_tensor


@dataclass
class ScoreConfig:
    beta: float = 1.0
    R_test: int = 10
    delta: float = 0.6
    eps: float = 1e-8
    k_refs: int = 1
    seed: int = 0
    per_subseq_denominator: bool = False
    ref_source: str = "test"  # "test" or "train"

    def validate(self) -> None:
        if self.beta < 0:
            raise DataError("beta must be >= 0")
        if not 0 < self.delta < 100:
            raise DataError("delta must be in (0, 100)")
        if self.R_test < 1 or self.k_refs < 1:
            raise DataError("R_test and k_refs must be >= 1")
        if self.ref_source not in ("test", "train"):
            raise DataError(f"ref_source must be 'test' or 'train', got {self.ref_source!r}")


@dataclass
class ScoreSeries:
    """Per-timestamp anomaly scores with their component columns and coverage."""

    scores: np.ndarray
    score_otn: np.ndarray
    score_dsn: np.ndarray
    coverage: np.ndarray

    @property
    def n(self) -> int:
        return self.scores.shape[0]


def score_otn(pred: OrderPrediction, eps: float = 1e-8,
              per_subseq_denominator: bool = False) -> np.ndarray:
    """Order-discrepancy score per sub-sequence: |probs - truth|_1 over the
    window-level order loss (replicated), or over the per-sub-sequence term."""
    P = np.asarray(pred.probs, np.float64)
    Y = np.asarray(pred.labels, np.float64)
    num = np.abs(P - Y).sum(axis=1)
    if per_subseq_denominator:
        den = js_rows(P, Y) + eps
    else:
        den = otn_loss(pred) + eps
    return num / den


def score_dsn(window: Window, refs: list[Window], model: TrainedModel) -> float:
    """Mean squared distance residual of a window against reference windows."""
    if not refs:
        raise DataError("score_dsn needs at least one reference window")
    normalize = model.config.normalize_embeddings
    data = np.stack([window.data] + [r.data for r in refs])
    E = embed_windows(model.phi, data, normalize=normalize)
    F = embed_windows(model.eta, data, normalize=normalize)
    sq = [(pair_distance(E[0], E[k]) - pair_distance(F[0], F[k])) ** 2
          for k in range(1, len(data))]
    return float(np.mean(sq))


def combine(otn_scores: np.ndarray, dsn_score: float, beta: float) -> np.ndarray:
    """Overall score per sub-sequence: order score plus beta times the window
    distance score (identical for all sub-sequences of the window)."""
    if beta < 0:
        raise DataError("beta must be >= 0")
    return np.asarray(otn_scores, np.float64) + beta * float(dsn_score)


def aggregate_timestamps(slots, n_timestamps: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean score per timestamp over all covering (start, length, value) slots.

    Returns (scores, coverage).  Every timestamp must be covered by at least
    one slot, otherwise the layout is inconsistent.
    """
    total = np.zeros(n_timestamps)
    count = np.zeros(n_timestamps, dtype=np.int64)
    for start, length, value in slots:
        if start < 0 or start + length > n_timestamps:
            raise DataError(f"slot [{start}, {start + length}) outside timeline "
                            f"of {n_timestamps} timestamps")
        total[start:start + length] += value
        count[start:start + length] += 1
    if np.any(count == 0):
        missing = int(np.argmin(count))
        raise DataError(f"timestamp {missing} not covered by any sub-sequence")
    return total / count, count


def threshold_percentile(scores: np.ndarray, delta: float) -> np.ndarray:
    """Binary predictions: score strictly above the (100 - delta) percentile."""
    if not 0 < delta < 100:
        raise DataError("delta must be in (0, 100)")
    scores = np.asarray(scores, np.float64)
    thr = np.percentile(scores, 100.0 - delta)
    return (scores > thr).astype(np.int64)


# ---------------------------------------------------------------------------
# Full scoring pipeline
# ---------------------------------------------------------------------------

def _ep_subseq_scores(batch: np.ndarray, model: TrainedModel, l: int, r: int,
                      m: int) -> np.ndarray:
    """Per-sub-sequence one-step-ahead error scores for the EP ablation."""
    phi = model.phi
    if phi.ep_W is None:
        raise DataError("model has no error-prediction head")
    _, H_all = gru_forward(batch, phi.gru, want_all=True)
    W_e = np.asarray(phi.ep_W, np.float64)
    preds = H_all[:-1] @ W_e.T + np.asarray(phi.ep_b, np.float64)  # (L-1, B, D)
    targets = np.transpose(batch[:, 1:], (1, 0, 2))
    err = ((preds - targets) ** 2).mean(axis=2).T                  # (B, L-1); err[:, t-1] ~ x_t
    B = batch.shape[0]
    out = np.zeros((B, m))
    for i in range(m):
        lo = max(i * r, 1)          # timestamp 0 has no prediction
        hi = i * r + l
        if hi > lo:
            out[:, i] = err[:, lo - 1:hi - 1].mean(axis=1)
    return out


def score_series(model: TrainedModel, test: MultivariateSeries, cfg: ScoreConfig,
                 train_series: MultivariateSeries | None = None,
                 chunk: int = 1024) -> ScoreSeries:
    """Score every test timestamp with the trained model.

    Windows are laid out at stride ``R_test`` with one extra tail window so
    every timestamp is covered.  Reference windows for the distance score come
    from the test pool itself (default) or from ``train_series``.
    """
    cfg.validate()
    if test.d != model.d_in:
        raise DataError(f"test series has {test.d} dimensions, model expects {model.d_in}")
    tc = model.config
    norm = zscore_apply(test, model.stats)
    windows = make_windows(norm, tc.L, cfg.R_test, cover_tail=True)
    W = np.stack([w.data for w in windows])
    n_w = len(windows)
    mode = tc.mode

    # Temporal component: (n_w, m) score per sub-sequence.
    if mode in ("full", "otn_only"):
        t_scores = np.empty((n_w, tc.m))
        Y = np.zeros((tc.m, tc.m))
        Y[np.arange(tc.m), np.arange(tc.m)] = 1.0
        W_o = np.asarray(model.phi.order_W, np.float64)
        b_o = np.asarray(model.phi.order_b, np.float64)
        identity = np.arange(tc.m)[None, :]
        for s in range(0, n_w, chunk):
            part = W[s:s + chunk]
            B = part.shape[0]
            Xsub = _subseq_tensor(part, np.repeat(identity, B, axis=0), tc.l, tc.r)
            H = gru_forward(Xsub, model.phi.gru)
            P = softmax(H @ W_o.T + b_o).reshape(B, tc.m, tc.m)
            num = np.abs(P - Y).sum(axis=2)
            rows = js_rows(P.reshape(-1, tc.m), np.tile(Y, (B, 1))).reshape(B, tc.m)
            if cfg.per_subseq_denominator:
                den = rows + cfg.eps
            else:
                den = rows.mean(axis=1, keepdims=True) + cfg.eps
            t_scores[s:s + chunk] = num / den
    elif mode == "dsn_plus_ep":
        t_scores = np.empty((n_w, tc.m))
        for s in range(0, n_w, chunk):
            t_scores[s:s + chunk] = _ep_subseq_scores(W[s:s + chunk], model,
                                                      tc.l, tc.r, tc.m)
    else:  # dsn_only
        t_scores = np.zeros((n_w, tc.m))

    # Spatial component: scalar per window.
    if mode in ("full", "dsn_only", "dsn_plus_ep"):
        normalize = tc.normalize_embeddings
        E = embed_windows(model.phi, W, normalize=normalize)
        F = embed_windows(model.eta, W, normalize=normalize)
        rng = np.random.default_rng(cfg.seed)
        if cfg.ref_source == "train":
            if train_series is None:
                raise DataError("ref_source='train' requires the training series")
            pool = make_windows(zscore_apply(train_series, model.stats), tc.L, tc.R_train)
            Wp = np.stack([w.data for w in pool])
            Ep = embed_windows(model.phi, Wp, normalize=normalize)
            Fp = embed_windows(model.eta, Wp, normalize=normalize)
            jj = rng.integers(0, len(pool), size=(n_w, cfg.k_refs))
            ii = np.repeat(np.arange(n_w), cfg.k_refs)
            jj = jj.reshape(-1)
        else:
            pairs = sample_pairs(n_w, rng, cfg.k_refs)
            ii = np.fromiter((p[0] for p in pairs), dtype=np.intp, count=len(pairs))
            jj = np.fromiter((p[1] for p in pairs), dtype=np.intp, count=len(pairs))
            Ep, Fp = E, F
        d_phi = (E[ii] * Ep[jj]).sum(axis=1)
        d_eta = (F[ii] * Fp[jj]).sum(axis=1)
        dsn_w = ((d_phi - d_eta) ** 2).reshape(n_w, cfg.k_refs).mean(axis=1)
    else:
        dsn_w = np.zeros(n_w)

    # Aggregate each component over all (window, sub-sequence) slots.
    def slot_iter(values_2d):
        for wi, w in enumerate(windows):
            for i in range(tc.m):
                yield (w.start + i * tc.r, tc.l, values_2d[wi, i])

    otn_col, coverage = aggregate_timestamps(slot_iter(t_scores), test.n)
    dsn_col, _ = aggregate_timestamps(
        slot_iter(np.repeat(dsn_w[:, None], tc.m, axis=1)), test.n)
    scores = otn_col + cfg.beta * dsn_col
    return ScoreSeries(scores=scores, score_otn=otn_col, score_dsn=dsn_col,
                       coverage=coverage)


# ---------------------------------------------------------------------------
# Score CSV IO
# ---------------------------------------------------------------------------

def write_scores_csv(path, series: ScoreSeries, labels: np.ndarray | None = None) -> None:
    """One row per test timestamp (1-based), with component columns."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        header = ["timestamp", "score", "score_otn", "score_dsn"]
        if labels is not None:
            header.append("label")
        w.writerow(header)
        for t in range(series.n):
            row = [str(t + 1), repr(float(series.scores[t])),
                   repr(float(series.score_otn[t])), repr(float(series.score_dsn[t]))]
            if labels is not None:
                row.append(str(int(labels[t])))
            w.writerow(row)


def read_scores_csv(path) -> dict[str, np.ndarray]:
    """Read a scores CSV back into column arrays (labels included if present)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if len(rows) < 2:
        raise DataError(f"{path}: empty scores file")
    header = rows[0]
    required = ("timestamp", "score", "score_otn", "score_dsn")
    for col in required:
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}")
    cols = {name: [] for name in header}
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise DataError(f"{path}: line {i + 2}: expected {len(header)} columns")
        for name, cell in zip(header, row):
            cols[name].append(cell)
    out = {
        "timestamp": np.asarray(cols["timestamp"], dtype=np.int64),
        "score": np.asarray(cols["score"], dtype=np.float64),
        "score_otn": np.asarray(cols["score_otn"], dtype=np.float64),
        "score_dsn": np.asarray(cols["score_dsn"], dtype=np.float64),
    }
    if "label" in cols:
        out["label"] = np.asarray(cols["label"], dtype=np.int64)
    return out
