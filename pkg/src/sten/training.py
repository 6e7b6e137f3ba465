"""Joint self-supervised training: order prediction plus distance distillation,
with deterministic seeding, checkpointing, and the ablation modes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import ConfigError, DataError, NumericError
from .ndkernel import (GradTape, GruParams, ParamDict, adam_update, backward,
                       gru_backward, gru_forward, init_adam_state, softmax)
from .networks import (EtaParams, PhiParams, init_eta, init_phi,
                       read_checkpoint, sample_pairs, write_checkpoint)
from .objectives import js_rows, js_rows_grad_p
from .seqdata import MultivariateSeries, NormStats, make_windows, zscore_apply, zscore_fit

MODES = ("full", "otn_only", "dsn_only", "dsn_plus_ep")

_SEED_TAGS = {"synth": 101, "train": 202, "score": 303}


def derive_seed(master: int, name: str) -> int:
    """Deterministic named sub-seed of a master seed."""
    return int(np.random.SeedSequence([int(master), _SEED_TAGS[name]]).generate_state(1)[0])


def seed_streams(master: int) -> dict[str, np.random.Generator]:
    """Independent named random streams for the training internals."""
    names = ("phi_init", "eta_init", "shuffle", "pairing")
    children = np.random.SeedSequence(int(master)).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


@dataclass
class TrainConfig:
    L: int = 100
    R_train: int = 10
    l: int = 10
    r: int = 10
    m: int = 10
    d_model: int = 256
    alpha: float = 1.0
    lr: float = 1e-5
    epochs: int = 5
    batch_size: int = 256
    seed: int = 0
    eta_seed: int | None = None
    mode: str = "full"
    normalize_embeddings: bool = False
    k_refs: int = 1
    separate_towers: bool = False

    def validate(self) -> None:
        if self.l + (self.m - 1) * self.r != self.L:
            raise ConfigError(
                f"sub-sequence layout mismatch: l + (m-1)*r = "
                f"{self.l + (self.m - 1) * self.r} != L = {self.L}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.k_refs < 1:
            raise ConfigError("k_refs must be >= 1")
        if min(self.L, self.R_train, self.l, self.r, self.m, self.d_model) < 1:
            raise ConfigError("L, R_train, l, r, m, d_model must all be >= 1")


@dataclass
class TrainedModel:
    phi: PhiParams
    eta: EtaParams
    config: TrainConfig
    stats: NormStats
    loss_trace: list[tuple[float, float, float]] = field(default_factory=list)
    d_in: int = 0


def _uses_otn(mode: str, alpha: float) -> bool:
    return mode in ("full", "otn_only")


def _uses_dsn(mode: str, alpha: float) -> bool:
    # full with alpha == 0 degenerates to otn_only (no gradient can flow).
    if mode == "full":
        return alpha > 0
    return mode in ("dsn_only", "dsn_plus_ep")


def _subseq_tensor(batch: np.ndarray, perms: np.ndarray, l: int, r: int) -> np.ndarray:
    """Gather sub-sequences in presented order: (B, L, D) -> (B*m, l, D)."""
    B, _, D = batch.shape
    m = perms.shape[1]
    idx = perms[:, :, None] * r + np.arange(l)[None, None, :]        # (B, m, l)
    sub = batch[np.arange(B)[:, None, None], idx]                    # (B, m, l, D)
    return sub.reshape(B * m, l, D)


def _one_hot(perms: np.ndarray) -> np.ndarray:
    B, m = perms.shape
    Y = np.zeros((B * m, m))
    Y[np.arange(B * m), perms.reshape(-1)] = 1.0
    return Y


def build_sten_tape(phi: PhiParams, eta: EtaParams, batch: np.ndarray,
                    perms: np.ndarray | None, pairs: Sequence[tuple[int, int]] | None,
                    cfg: TrainConfig) -> GradTape:
    """Forward pass of the combined loss over one batch of windows.

    ``batch`` is (B, L, D); ``perms`` gives each window's presented
    sub-sequence order (B, m); ``pairs`` are window-index pairs for the
    distance branch.  Returns a tape whose backward yields exact gradients
    for every phi parameter (eta is frozen).
    """
    B = batch.shape[0]
    use_otn = _uses_otn(cfg.mode, cfg.alpha)
    use_dsn = _uses_dsn(cfg.mode, cfg.alpha)
    use_ep = cfg.mode == "dsn_plus_ep"

    tape = GradTape(0.0, phi.as_dict(), owner=phi)
    otn_val = 0.0
    dsn_val = 0.0

    if use_otn:
        if perms is None:
            raise DataError("order branch requires permutations")
        Xsub = _subseq_tensor(batch, perms, cfg.l, cfg.r)
        Y = _one_hot(perms)
        H, cache = gru_forward(Xsub, phi.gru, want_cache=True)
        W_o = np.asarray(phi.order_W, np.float64)
        logits = H @ W_o.T + np.asarray(phi.order_b, np.float64)
        P = softmax(logits)
        rows = js_rows(P, Y)
        otn_val = float(rows.mean())

        def otn_back(scale: float, grads: ParamDict,
                     P=P, Y=Y, H=H, cache=cache, W_o=W_o, p_gru=phi.gru) -> None:
            dP = js_rows_grad_p(P, Y) * (scale / P.shape[0])
            dlogits = P * (dP - (dP * P).sum(axis=1, keepdims=True))
            grads["order_head.W"] += dlogits.T @ H
            grads["order_head.b"] += dlogits.sum(axis=0)
            dH = dlogits @ W_o
            gru_backward(cache, p_gru, grads, "gru.", d_h_final=dH)

        tape.record(otn_back)

    if use_ep:
        if phi.ep_W is None:
            raise DataError("dsn_plus_ep mode requires an error-prediction head")
        if batch.shape[1] < 2:
            raise DataError("error-prediction branch needs windows of length >= 2")
        _, cache_ep, H_all = gru_forward(batch, phi.gru, want_cache=True, want_all=True)
        W_e = np.asarray(phi.ep_W, np.float64)
        preds = H_all[:-1] @ W_e.T + np.asarray(phi.ep_b, np.float64)   # (L-1, B, D)
        targets = np.transpose(batch[:, 1:], (1, 0, 2))
        resid = preds - targets
        otn_val = float(np.mean(resid ** 2))  # temporal slot of the breakdown

        def ep_back(scale: float, grads: ParamDict,
                    resid=resid, H_all=H_all, cache_ep=cache_ep, W_e=W_e,
                    p_gru=phi.gru) -> None:
            dpred = resid * (2.0 * scale / resid.size)
            grads["ep_head.W"] += np.einsum("tbo,tbh->oh", dpred, H_all[:-1])
            grads["ep_head.b"] += dpred.sum(axis=(0, 1))
            d_h_all = np.zeros_like(H_all)
            d_h_all[:-1] = dpred @ W_e
            gru_backward(cache_ep, p_gru, grads, "gru.", d_h_all=d_h_all)

        tape.record(ep_back)

    if use_dsn:
        if pairs is None or len(pairs) == 0:
            raise DataError("distance branch requires reference pairs")
        tower = phi.dsn_tower()
        prefix = "dsn_gru." if phi.dsn_gru is not None else "gru."
        E, cache_d = gru_forward(batch, tower, want_cache=True)
        F = gru_forward(batch, eta.gru)
        if cfg.normalize_embeddings:
            from .networks import NORM_FLOOR
            norms = np.maximum(np.linalg.norm(E, axis=1, keepdims=True), NORM_FLOOR)
            En = E / norms
            Fn = F / np.maximum(np.linalg.norm(F, axis=1, keepdims=True), NORM_FLOOR)
        else:
            norms = None
            En, Fn = E, F
        ii = np.fromiter((p[0] for p in pairs), dtype=np.intp, count=len(pairs))
        jj = np.fromiter((p[1] for p in pairs), dtype=np.intp, count=len(pairs))
        d_phi = (En[ii] * En[jj]).sum(axis=1)
        d_eta = (Fn[ii] * Fn[jj]).sum(axis=1)
        resid_d = d_phi - d_eta
        dsn_val = float(np.mean(resid_d ** 2))

        def dsn_back(scale: float, grads: ParamDict,
                     resid_d=resid_d, En=En, ii=ii, jj=jj,
                     norms=norms, cache_d=cache_d, tower=tower, prefix=prefix) -> None:
            dd = resid_d * (2.0 * scale / resid_d.size)
            dEn = np.zeros_like(En)
            np.add.at(dEn, ii, dd[:, None] * En[jj])
            np.add.at(dEn, jj, dd[:, None] * En[ii])
            if norms is not None:
                # Back through e / max(||e||, floor); En rows are unit (or e/floor).
                dE = dEn / norms
                from .networks import NORM_FLOOR
                active = (norms > NORM_FLOOR).astype(np.float64)
                dE -= active * En * (dEn * En).sum(axis=1, keepdims=True) / norms
            else:
                dE = dEn
            gru_backward(cache_d, tower, grads, prefix, d_h_final=dE)

        # d(total)/d(dsn) = alpha in every mode that trains the branch.
        tape.record(lambda lg, grads: dsn_back(lg * cfg.alpha, grads))

    if cfg.mode == "otn_only" or (cfg.mode == "full" and not use_dsn):
        total = otn_val
    elif cfg.mode in ("dsn_only",):
        total = cfg.alpha * dsn_val
    else:
        total = otn_val + cfg.alpha * dsn_val

    tape.value = total
    tape.otn = otn_val
    tape.dsn = dsn_val
    return tape


def _draw_permutations(rng: np.random.Generator, n_windows: int, m: int) -> np.ndarray:
    """Fresh presented-order permutations, one per window."""
    return np.stack([rng.permutation(m) for _ in range(n_windows)])


def _batch_ranges(n: int, batch_size: int, min_last: int) -> list[tuple[int, int]]:
    ranges = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(ranges) > 1 and ranges[-1][1] - ranges[-1][0] < min_last:
        _, e = ranges.pop()
        ranges[-1] = (ranges[-1][0], e)
    return ranges


def train(series: MultivariateSeries, cfg: TrainConfig) -> TrainedModel:
    """Fit the encoder on an unlabeled series (labels, if present, are ignored)."""
    cfg.validate()
    stats = zscore_fit(series)
    norm = zscore_apply(series, stats)
    windows = make_windows(norm, cfg.L, cfg.R_train)
    n = len(windows)
    use_dsn = _uses_dsn(cfg.mode, cfg.alpha)
    use_otn = _uses_otn(cfg.mode, cfg.alpha)
    if use_dsn and n < 2:
        raise DataError(f"mode {cfg.mode!r} needs >= 2 windows for distance pairs, got {n}")
    if use_dsn and cfg.batch_size < 2:
        raise ConfigError("batch_size must be >= 2 for modes with the distance branch")
    W = np.stack([w.data for w in windows])  # (n, L, D)

    streams = seed_streams(cfg.seed)
    phi = init_phi(series.d, cfg.d_model, cfg.m, streams["phi_init"],
                   separate_towers=cfg.separate_towers,
                   with_ep_head=(cfg.mode == "dsn_plus_ep"))
    eta_rng = (np.random.default_rng(cfg.eta_seed) if cfg.eta_seed is not None
               else streams["eta_init"])
    # Frozen projector lives in its at-rest precision from the start.
    eta = init_eta(series.d, cfg.d_model, eta_rng).astype(np.float32)
    eta_checksum = eta.checksum()

    adam = init_adam_state(phi.as_dict())
    shuffle_rng = streams["shuffle"]
    pair_rng = streams["pairing"]
    ranges = _batch_ranges(n, cfg.batch_size, min_last=2 if use_dsn else 1)

    trace: list[tuple[float, float, float]] = []
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        for bi, (s, e) in enumerate(ranges):
            batch = W[s:e]
            B = e - s
            perms = _draw_permutations(shuffle_rng, B, cfg.m) if use_otn else None
            pairs = sample_pairs(B, pair_rng, cfg.k_refs) if use_dsn else None
            tape = build_sten_tape(phi, eta, batch, perms, pairs, cfg)
            if not np.isfinite(tape.value):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch + 1}, batch {bi + 1}: "
                    f"otn={tape.otn}, dsn={tape.dsn}")
            grads = backward(tape)
            new_params, adam = adam_update(phi.as_dict(), grads, adam, cfg.lr)
            phi.load_dict(new_params)
            sums += B * np.array([tape.otn, tape.dsn, tape.value])
        mean = sums / n
        trace.append((float(mean[0]), float(mean[1]), float(mean[2])))

    if eta.checksum() != eta_checksum:
        raise NumericError("frozen projector parameters changed during training")
    return TrainedModel(phi=phi.astype(np.float32), eta=eta, config=cfg,
                        stats=stats, loss_trace=trace, d_in=series.d)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(model: TrainedModel, path) -> None:
    config = asdict(model.config)
    config["d_in"] = model.d_in
    blocks: dict[str, np.ndarray] = {}
    for k, v in model.phi.as_dict().items():
        blocks["phi." + k] = v
    for k, v in model.eta.as_dict().items():
        blocks["eta." + k] = v
    blocks["norm.mean"] = model.stats.mean
    blocks["norm.std"] = model.stats.std
    blocks["trace.losses"] = np.asarray(model.loss_trace, dtype=np.float32).reshape(-1, 3)
    write_checkpoint(path, config, blocks)


def load_checkpoint(path) -> TrainedModel:
    config, blocks = read_checkpoint(path)
    d_in = int(config.pop("d_in"))
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(config) - known
    if unknown:
        raise DataError(f"{path}: unknown config keys in checkpoint: {sorted(unknown)}")
    cfg = TrainConfig(**config)
    gru = GruParams.from_dict(blocks, "phi.gru.")
    dsn_gru = (GruParams.from_dict(blocks, "phi.dsn_gru.")
               if "phi.dsn_gru.W_z" in blocks else None)
    phi = PhiParams(
        gru=gru,
        order_W=blocks["phi.order_head.W"],
        order_b=blocks["phi.order_head.b"],
        dsn_gru=dsn_gru,
        ep_W=blocks.get("phi.ep_head.W"),
        ep_b=blocks.get("phi.ep_head.b"),
    )
    eta = EtaParams(gru=GruParams.from_dict(blocks, "eta.gru."))
    stats = NormStats(mean=blocks["norm.mean"], std=blocks["norm.std"])
    trace = [tuple(float(x) for x in row) for row in blocks["trace.losses"]]
    return TrainedModel(phi=phi, eta=eta, config=cfg, stats=stats,
                        loss_trace=trace, d_in=d_in)
