"""Two-pathway GRU encoder with a shared embedding table.

The TEXTUAL pathway is a language model (softmax over the vocabulary at each
step); the VISUAL pathway regresses its final state onto an image feature
vector under cosine distance.  Gradients are derived by hand (BPTT) and are
checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numkernel import (
    ShapeError,
    cosine_distance_grad,
    log_softmax,
    matvec,
    sigmoid,
    softmax,
    tanh_act,
)

VISUAL = "visual"
TEXTUAL = "textual"
PATHWAYS = (VISUAL, TEXTUAL)

GRU_TENSORS = ("W", "U", "Wz", "Uz", "Wr", "Ur")


@dataclass
class GruParams:
    W: np.ndarray
    U: np.ndarray
    Wz: np.ndarray
    Uz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray

    def __post_init__(self):
        d, e = self.W.shape
        for name in ("W", "Wz", "Wr"):
            if getattr(self, name).shape != (d, e):
                raise ShapeError(f"{name} must be {d}x{e}")
        for name in ("U", "Uz", "Ur"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}")

    @property
    def hidden(self) -> int:
        return self.W.shape[0]

    @property
    def input(self) -> int:
        return self.W.shape[1]

    @classmethod
    def zeros(cls, hidden: int, inp: int) -> "GruParams":
        return cls(*(np.zeros((hidden, inp if n.startswith("W") else hidden)) for n in GRU_TENSORS))


@dataclass
class ImaginetParams:
    E: np.ndarray  # vocab x emb, shared by both pathways
    visual: GruParams | None  # None when the visual encoder is a plain embedding sum
    textual: GruParams
    V: np.ndarray  # image_dim x hidden (x emb for the sum encoder)
    L: np.ndarray  # vocab x hidden
    alpha: float = 0.5
    visual_encoder: str = "gru"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.visual_encoder not in ("gru", "sum"):
            raise ValueError(f"unknown visual encoder {self.visual_encoder!r}")
        if (self.visual is None) != (self.visual_encoder == "sum"):
            raise ValueError("visual GRU parameters must be present iff visual_encoder == 'gru'")
        vocab, emb = self.E.shape
        if self.textual.input != emb:
            raise ShapeError("textual GRU input size does not match embedding size")
        if self.L.shape != (vocab, self.textual.hidden):
            raise ShapeError(f"L must be {vocab}x{self.textual.hidden}")
        vis_in = emb if self.visual is None else self.visual.hidden
        if self.visual is not None and self.visual.input != emb:
            raise ShapeError("visual GRU input size does not match embedding size")
        if self.V.ndim != 2 or self.V.shape[1] != vis_in:
            raise ShapeError(f"V must have {vis_in} columns")

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    @property
    def image_dim(self) -> int:
        return self.V.shape[0]

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Every trainable array, keyed by a stable name.  Values alias the params."""
        out = {"E": self.E}
        if self.visual is not None:
            out.update({f"visual.{n}": getattr(self.visual, n) for n in GRU_TENSORS})
        out.update({f"textual.{n}": getattr(self.textual, n) for n in GRU_TENSORS})
        out["V"] = self.V
        out["L"] = self.L
        return out

    @classmethod
    def from_tensors(cls, tensors, alpha, visual_encoder="gru") -> "ImaginetParams":
        def gru(prefix):
            return GruParams(*(np.array(tensors[f"{prefix}.{n}"], dtype=np.float64) for n in GRU_TENSORS))

        return cls(
            E=np.array(tensors["E"], dtype=np.float64),
            visual=gru("visual") if visual_encoder == "gru" else None,
            textual=gru("textual"),
            V=np.array(tensors["V"], dtype=np.float64),
            L=np.array(tensors["L"], dtype=np.float64),
            alpha=alpha,
            visual_encoder=visual_encoder,
        )

    def copy(self) -> "ImaginetParams":
        return ImaginetParams.from_tensors(
            {k: v.copy() for k, v in self.named_tensors().items()}, self.alpha, self.visual_encoder
        )


def init_params(
    vocab_size: int,
    emb: int,
    hidden: int,
    image_dim: int,
    alpha: float = 0.5,
    seed: int = 0,
    visual_encoder: str = "gru",
) -> ImaginetParams:
    """Uniform(-s, s) initialisation with s = 1/sqrt(fan_in).

    An embedding lookup has fan-in 1, so embeddings start in [-1, 1].
    """
    rng = np.random.default_rng(seed)

    def uni(rows, cols, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=(rows, cols))

    def gru():
        return GruParams(
            W=uni(hidden, emb, emb), U=uni(hidden, hidden, hidden),
            Wz=uni(hidden, emb, emb), Uz=uni(hidden, hidden, hidden),
            Wr=uni(hidden, emb, emb), Ur=uni(hidden, hidden, hidden),
        )

    E = uni(vocab_size, emb, 1)
    visual = gru() if visual_encoder == "gru" else None
    textual = gru()
    vis_in = hidden if visual_encoder == "gru" else emb
    V = uni(image_dim, vis_in, vis_in)
    L = uni(vocab_size, hidden, hidden)
    return ImaginetParams(E, visual, textual, V, L, alpha, visual_encoder)


# -- forward ----------------------------------------------------------------


def gru_step(p: GruParams, h_prev, x):
    """One GRU update.  Returns ``(h, (z, r, h_tilde))``."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if h_prev.shape != (p.hidden,) or x.shape != (p.input,):
        raise ShapeError(f"gru_step: h {h_prev.shape}, x {x.shape} vs d={p.hidden}, e={p.input}")
    z = sigmoid(matvec(p.Wz, x) + matvec(p.Uz, h_prev))
    r = sigmoid(matvec(p.Wr, x) + matvec(p.Ur, h_prev))
    h_tilde = tanh_act(matvec(p.W, x) + matvec(p.U, r * h_prev))
    h = (1.0 - z) * h_prev + z * h_tilde
    return h, (z, r, h_tilde)


@dataclass
class EncodeTrace:
    hidden: np.ndarray  # (tau, d); row t is h_{t+1}
    z: np.ndarray | None = None
    r: np.ndarray | None = None
    h_tilde: np.ndarray | None = None

    def __len__(self) -> int:
        return self.hidden.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.hidden[-1]


def _check_ids(p: ImaginetParams, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("cannot encode an empty sentence")
    if ids.min() < 0 or ids.max() >= p.vocab_size:
        raise ValueError("token id outside the vocabulary")
    return ids


def _run_gru(g: GruParams, X: np.ndarray) -> EncodeTrace:
    tau, d = X.shape[0], g.hidden
    # input projections do not depend on the recurrence
    ax_z = X @ g.Wz.T
    ax_r = X @ g.Wr.T
    ax_h = X @ g.W.T
    H = np.empty((tau, d))
    Z = np.empty((tau, d))
    R = np.empty((tau, d))
    HC = np.empty((tau, d))
    h = np.zeros(d)
    for t in range(tau):
        z = sigmoid(ax_z[t] + g.Uz @ h)
        r = sigmoid(ax_r[t] + g.Ur @ h)
        hc = np.tanh(ax_h[t] + g.U @ (r * h))
        h = (1.0 - z) * h + z * hc
        H[t], Z[t], R[t], HC[t] = h, z, r, hc
    return EncodeTrace(H, Z, R, HC)


def encode(p: ImaginetParams, pathway: str, ids) -> EncodeTrace:
    """Run one pathway's GRU over token ids (end marker included) from h_0 = 0."""
    ids = _check_ids(p, ids)
    if pathway == TEXTUAL:
        g = p.textual
    elif pathway == VISUAL:
        if p.visual is None:
            # the sum encoder has no recurrence; expose running sums as its "states"
            return EncodeTrace(np.cumsum(p.E[ids], axis=0))
        g = p.visual
    else:
        raise ValueError(f"unknown pathway {pathway!r}")
    return _run_gru(g, p.E[ids])


def sum_encode(p: ImaginetParams, ids) -> np.ndarray:
    ids = _check_ids(p, ids)
    return p.E[ids].sum(axis=0)


def final_states(p: ImaginetParams, pathway: str, batch: Sequence) -> np.ndarray:
    """Final hidden states for many id sequences at once (rows in input order).

    Sequences are right-aligned and left-padded; padded steps keep h at 0,
    which is exactly the per-sentence recurrence started later.
    """
    seqs = [_check_ids(p, ids) for ids in batch]
    if pathway == VISUAL and p.visual is None:
        return np.stack([p.E[s].sum(axis=0) for s in seqs])
    g = {TEXTUAL: p.textual, VISUAL: p.visual}.get(pathway)
    if g is None:
        raise ValueError(f"unknown pathway {pathway!r}")
    n, T = len(seqs), max(len(s) for s in seqs)
    ids = np.zeros((n, T), dtype=np.int64)
    mask = np.zeros((n, T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, T - len(s):] = s
        mask[i, T - len(s):] = True
    X = p.E[ids]  # n, T, e
    ax_z = X @ g.Wz.T
    ax_r = X @ g.Wr.T
    ax_h = X @ g.W.T
    h = np.zeros((n, g.hidden))
    for t in range(T):
        z = sigmoid(ax_z[:, t] + h @ g.Uz.T)
        r = sigmoid(ax_r[:, t] + h @ g.Ur.T)
        hc = np.tanh(ax_h[:, t] + (r * h) @ g.U.T)
        h_new = (1.0 - z) * h + z * hc
        h = np.where(mask[:, t, None], h_new, h)
    return h


def predict_image(p: ImaginetParams, h_last) -> np.ndarray:
    return matvec(p.V, np.asarray(h_last, dtype=np.float64))


def next_word_dist(p: ImaginetParams, h_t) -> np.ndarray:
    return softmax(matvec(p.L, np.asarray(h_t, dtype=np.float64)))


# -- loss and gradients -----------------------------------------------------


@dataclass
class LossResult:
    total: float
    textual: float  # L^T, batch mean
    visual: float  # L^V, batch mean
    grads: dict[str, np.ndarray]


def _gru_backward(g: GruParams, X: np.ndarray, tr: EncodeTrace, dH: np.ndarray, grads, prefix):
    """Accumulate parameter gradients into ``grads``; return dL/dX."""
    tau, d = dH.shape
    H, Z, R, HC = tr.hidden, tr.z, tr.r, tr.h_tilde
    Hp = np.vstack([np.zeros((1, d)), H[:-1]])
    dAh = np.empty((tau, d))
    dAz = np.empty((tau, d))
    dAr = np.empty((tau, d))
    dh_next = np.zeros(d)
    for t in range(tau - 1, -1, -1):
        dh = dH[t] + dh_next
        z, r, hc, hp = Z[t], R[t], HC[t], Hp[t]
        da_h = dh * z * (1.0 - hc * hc)
        da_z = dh * (hc - hp) * z * (1.0 - z)
        drh = g.U.T @ da_h
        da_r = drh * hp * r * (1.0 - r)
        dh_next = dh * (1.0 - z) + drh * r + g.Uz.T @ da_z + g.Ur.T @ da_r
        dAh[t], dAz[t], dAr[t] = da_h, da_z, da_r
    grads[f"{prefix}.W"] += dAh.T @ X
    grads[f"{prefix}.Wz"] += dAz.T @ X
    grads[f"{prefix}.Wr"] += dAr.T @ X
    grads[f"{prefix}.U"] += dAh.T @ (R * Hp)
    grads[f"{prefix}.Uz"] += dAz.T @ Hp
    grads[f"{prefix}.Ur"] += dAr.T @ Hp
    return dAh @ g.W + dAz @ g.Wz + dAr @ g.Wr


def sentence_losses(p: ImaginetParams, ids, target, grads=None, w_text=0.0, w_vis=0.0):
    """Per-sentence ``(L^T, L^V)``; if ``grads`` is given, add weighted gradients to it."""
    ids = _check_ids(p, ids)
    if ids.size < 2:
        raise ValueError("a training sentence needs at least one token before the end marker")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (p.image_dim,):
        raise ShapeError(f"target has shape {target.shape}, expected ({p.image_dim},)")
    X = p.E[ids]
    n_pred = ids.size - 1

    # TEXTUAL: h_t predicts token t+1, up to and including the end marker
    tr_t = _run_gru(p.textual, X)
    Hin = tr_t.hidden[:-1]
    logits = Hin @ p.L.T
    logp = np.apply_along_axis(log_softmax, 1, logits)
    nxt = ids[1:]
    lt = -logp[np.arange(n_pred), nxt].mean()

    # VISUAL: image vector from the final state only
    if p.visual is None:
        h_end = X.sum(axis=0)
        tr_v = None
    else:
        tr_v = _run_gru(p.visual, X)
        h_end = tr_v.final
    img = p.V @ h_end
    lv, g_img = cosine_distance_grad(img, target)

    if grads is not None:
        dlogits = np.exp(logp)
        dlogits[np.arange(n_pred), nxt] -= 1.0
        dlogits *= w_text / n_pred
        grads["L"] += dlogits.T @ Hin
        dH_t = np.zeros_like(tr_t.hidden)
        dH_t[:-1] = dlogits @ p.L
        dX = _gru_backward(p.textual, X, tr_t, dH_t, grads, "textual")

        g_img = w_vis * g_img
        grads["V"] += np.outer(g_img, h_end)
        dh_end = p.V.T @ g_img
        if tr_v is None:
            dX = dX + dh_end[None, :]
        else:
            dH_v = np.zeros_like(tr_v.hidden)
            dH_v[-1] = dh_end
            dX = dX + _gru_backward(p.visual, X, tr_v, dH_v, grads, "visual")
        np.add.at(grads["E"], ids, dX)
    return float(lt), float(lv)


def loss(p: ImaginetParams, batch: Sequence[tuple], with_grads: bool = True) -> LossResult:
    """Multi-task loss ``alpha * L^T + (1 - alpha) * L^V`` averaged over the batch.

    ``batch`` holds ``(token_ids, target_vector)`` pairs.  Gradients are
    accumulated in batch order, so results are bit-reproducible.
    """
    if not batch:
        raise ValueError("empty batch")
    n = len(batch)
    grads = {k: np.zeros_like(v) for k, v in p.named_tensors().items()} if with_grads else None
    w_text = p.alpha / n
    w_vis = (1.0 - p.alpha) / n
    lt_sum = lv_sum = 0.0
    for ids, target in batch:
        lt, lv = sentence_losses(p, ids, target, grads, w_text, w_vis)
        lt_sum += lt
        lv_sum += lv
    lt_mean, lv_mean = lt_sum / n, lv_sum / n
    total = p.alpha * lt_mean + (1.0 - p.alpha) * lv_mean
    return LossResult(total, lt_mean, lv_mean, grads or {})
