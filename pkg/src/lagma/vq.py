"""Quantized latent state embedding.

A small MLP encoder maps global states to D-dim latents, a trainable codebook
snaps each latent to its nearest row, and a decoder reconstructs the state
from the snapped vector. Training combines reconstruction (through a
straight-through gradient bypass), a codebook-pull term on the assigned code,
a commitment term on the encoder, and a coverage term that drags
timestep-selected codes toward the realized latent distribution so that codes
spread over the region trajectories actually visit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

logger = logging.getLogger(__name__)

COVERAGE_MODES = ("cvr", "cvr_all", "none")


@dataclass(frozen=True)
class VqConfig:
    n_codes: int = 64
    latent_dim: int = 8
    lambda_vq: float = 1.0
    lambda_commit: float = 0.5
    lambda_cvr: float = 0.5
    hidden: int = 64

    def __post_init__(self):
        if self.n_codes < 1 or self.latent_dim < 1:
            raise ValueError("n_codes and latent_dim must be at least 1")
        if min(self.lambda_vq, self.lambda_commit, self.lambda_cvr) < 0:
            raise ValueError("loss scales must be non-negative")


class VqModel:
    """Encoder, decoder, and codebook parameters over one state space."""

    def __init__(self, config: VqConfig, state_dim: int, rng: np.random.Generator):
        self.config = config
        self.state_dim = state_dim
        p = ad.ParamSet()
        h, d = config.hidden, config.latent_dim
        for prefix, d_in, d_out in (("enc", state_dim, d), ("dec", d, state_dim)):
            p.add(f"{prefix}.w1", ad.uniform_fan_in(rng, d_in, (d_in, h)))
            p.add(f"{prefix}.b1", np.zeros(h))
            p.add(f"{prefix}.w2", ad.uniform_fan_in(rng, h, (h, h)))
            p.add(f"{prefix}.b2", np.zeros(h))
            p.add(f"{prefix}.w3", ad.uniform_fan_in(rng, h, (h, d_out)))
            p.add(f"{prefix}.b3", np.zeros(d_out))
        p.add("code", 0.1 * rng.standard_normal((config.n_codes, d)))
        self.params = p

    @property
    def codebook(self) -> np.ndarray:
        return self.params["code"].data


def _mlp(params: ad.ParamSet, prefix: str, x: Tensor, tape) -> Tensor:
    h = ad.relu(tape, ad.add(tape, ad.matmul(tape, x, params[f"{prefix}.w1"]),
                             params[f"{prefix}.b1"]))
    h = ad.relu(tape, ad.add(tape, ad.matmul(tape, h, params[f"{prefix}.w2"]),
                             params[f"{prefix}.b2"]))
    return ad.add(tape, ad.matmul(tape, h, params[f"{prefix}.w3"]),
                  params[f"{prefix}.b3"])


def _as_batch(arr, dim: int, what: str) -> tuple[np.ndarray, bool]:
    data = np.asarray(arr, dtype=np.float64)
    single = data.ndim == 1
    if single:
        data = data[None, :]
    if data.ndim != 2 or data.shape[1] != dim:
        raise ShapeError(f"{what}: expected trailing dimension {dim}, got {data.shape}")
    return data, single


def encode(model: VqModel, s, tape=None) -> Tensor:
    """Map state(s) to latent vector(s); accepts [S] or [N, S]."""
    data, single = _as_batch(s, model.state_dim, "encode")
    out = _mlp(model.params, "enc", Tensor(data), tape)
    if single and tape is None:
        return Tensor(out.data[0])
    return out


def decode(model: VqModel, x_q, tape=None) -> Tensor:
    """Reconstruct state(s) from quantized latent(s); accepts [D] or [N, D]."""
    if isinstance(x_q, Tensor):
        if x_q.data.ndim != 2 or x_q.data.shape[1] != model.config.latent_dim:
            raise ShapeError(f"decode: expected [N, {model.config.latent_dim}], "
                             f"got {x_q.data.shape}")
        return _mlp(model.params, "dec", x_q, tape)
    data, single = _as_batch(x_q, model.config.latent_dim, "decode")
    out = _mlp(model.params, "dec", Tensor(data), tape)
    if single:
        return Tensor(out.data[0])
    return out


def quantize(model: VqModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-code assignment: indices and copied code rows.

    Ties break to the lowest index. Accepts [D] or [N, D]; returns (z, x_q)
    with matching leading shape. x_q is always a copy, never a codebook view.
    """
    if isinstance(x, Tensor):
        x = x.data
    data, single = _as_batch(x, model.config.latent_dim, "quantize")
    code = model.codebook
    d2 = (
        (data * data).sum(axis=1)[:, None]
        - 2.0 * (data @ code.T)
        + (code * code).sum(axis=1)[None, :]
    )
    z = np.argmin(d2, axis=1)
    x_q = code[z].copy()
    if single:
        return z[0], x_q[0]
    return z, x_q


def compute_J(t: int, T: int, n_c: int) -> np.ndarray:
    """Code indices assigned to timestep t out of T, over n_c codes.

    With d = n_c // T codes per step, step t owns the block [d*t, d*(t+1))
    plus one remainder code d*T + t while t < n_c % T; the blocks partition
    the codebook across one episode. When T exceeds n_c the single code
    floor(t * n_c / T) is shared by neighboring steps instead.
    """
    if T < 1 or n_c < 1:
        raise ValueError(f"compute_J: need T >= 1 and n_c >= 1, got T={T}, n_c={n_c}")
    if not 0 <= t < T:
        raise ValueError(f"compute_J: t must be in [0, {T}), got {t}")
    d, r = divmod(n_c, T)
    if d >= 1:
        indices = list(range(d * t, d * (t + 1)))
        if t < r:
            indices.append(d * T + t)
        return np.array(indices, dtype=np.int64)
    return np.array([t * n_c // T], dtype=np.int64)


def coverage_weights(T: int, n_c: int) -> np.ndarray:
    """[T, n_c] matrix whose row t holds 1/|J(t)| on J(t), zero elsewhere."""
    w = np.zeros((T, n_c))
    for t in range(T):
        j = compute_J(t, T, n_c)
        w[t, j] = 1.0 / len(j)
    return w


def vq_loss_batch(
    model: VqModel,
    states: np.ndarray,
    t_index: np.ndarray,
    T: int,
    mode: str,
    weights: np.ndarray | None = None,
    tape=None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Weighted VQ losses over a flat batch of states.

    states: [N, S]; t_index: [N] timestep of each state; weights: [N]
    non-negative, defaulting to a uniform mean. Returns scalar Tensors
    (l_vq, l_cvr, l_tot) on the given tape.
    """
    if mode not in COVERAGE_MODES:
        raise ValueError(f"mode must be one of {COVERAGE_MODES}, got {mode!r}")
    states = np.asarray(states, dtype=np.float64)
    n = states.shape[0]
    if weights is None:
        weights = np.full(n, 1.0 / n)
    cfg = model.config

    x = encode(model, states, tape)
    z, x_q = quantize(model, x.data)
    x_const = x.data

    snapped = ad.straight_through(tape, x_q, x)
    recon = decode(model, snapped, tape)
    rec_rows = ad.sqsum(tape, ad.sub(tape, recon, Tensor(states)), axis=1)
    l_rec = ad.sum_(tape, ad.cmul(tape, rec_rows, weights))

    e_rows = ad.take_rows(tape, model.params["code"], z)
    vq_rows = ad.sqsum(tape, ad.sub(tape, e_rows, Tensor(x_const)), axis=1)
    l_pull = ad.sum_(tape, ad.cmul(tape, vq_rows, weights))

    commit_rows = ad.sqsum(tape, ad.sub(tape, x, Tensor(x_q)), axis=1)
    l_commit = ad.sum_(tape, ad.cmul(tape, commit_rows, weights))

    l_vq = ad.add(tape, l_rec,
                  ad.add(tape, ad.cmul(tape, l_pull, cfg.lambda_vq),
                         ad.cmul(tape, l_commit, cfg.lambda_commit)))

    if mode == "none":
        l_cvr = Tensor(0.0)
    else:
        if mode == "cvr":
            w_codes = weights[:, None] * coverage_weights(T, cfg.n_codes)[t_index]
        else:
            w_codes = np.full((n, cfg.n_codes), 1.0 / cfg.n_codes) * weights[:, None]
        # ||sg[x_i] - e_j||^2 expanded so the whole [N, n_c] distance table
        # is three tape entries: cross term, code norms, constant.
        cross = ad.matmul_nt(tape, Tensor(x_const), model.params["code"])
        code_norms = ad.sqsum(tape, model.params["code"], axis=1)
        t1 = ad.sum_(tape, ad.cmul(tape, cross, -2.0 * w_codes))
        t2 = ad.sum_(tape, ad.cmul(tape, code_norms, w_codes.sum(axis=0)))
        const = float(((x_const * x_const).sum(axis=1) * w_codes.sum(axis=1)).sum())
        l_cvr = ad.add(tape, ad.add(tape, t1, t2), Tensor(const))

    l_tot = ad.add(tape, l_vq, ad.cmul(tape, l_cvr, cfg.lambda_cvr))
    return l_vq, l_cvr, l_tot


def vq_losses(model: VqModel, s, t: int, T: int, mode: str, tape=None):
    """Losses for a single state at timestep t (see vq_loss_batch)."""
    data, _ = _as_batch(s, model.state_dim, "vq_losses")
    t_index = np.array([t], dtype=np.int64)
    return vq_loss_batch(model, data, t_index, T, mode, np.ones(1), tape)


def train_vqvae_step(
    model: VqModel,
    states: np.ndarray,
    returns: np.ndarray,
    filled: np.ndarray,
    episode_counter: int,
    n_freq_vq: int,
    n_freq_cd: int,
    value_table,
    optimizer: ad.Adam,
    mode: str = "cvr",
    grad_clip: float = 10.0,
) -> dict:
    """One cadenced VQ training step over a padded batch.

    states: [B, T_slots, S]; returns: [B, T_slots] discounted return-to-go per
    state slot; filled: [B, T_slots] validity mask covering each episode's
    states including the final one. On the code-value cadence the table is fed
    every valid (code, return) pair; on the VQ cadence one clipped optimizer
    step runs on the mask-weighted mean of l_tot. Off-cadence calls leave
    everything bitwise unchanged.
    """
    stats = {"l_vq": None, "l_cvr": None, "l_tot": None, "updated": False}
    filled = np.asarray(filled, dtype=bool)
    n_valid = int(filled.sum())
    if n_valid == 0:
        logger.warning("train_vqvae_step: empty batch, skipping")
        return stats

    do_values = episode_counter % n_freq_cd == 0
    do_train = episode_counter % n_freq_vq == 0
    if not (do_values or do_train):
        return stats

    flat_states = np.asarray(states, dtype=np.float64)[filled]
    b_idx, t_idx = np.nonzero(filled)

    if do_values:
        x = encode(model, flat_states, None)
        z, _ = quantize(model, x.data)
        flat_returns = np.asarray(returns, dtype=np.float64)[filled]
        for code, ret in zip(z, flat_returns):
            value_table.update(int(code), float(ret))

    if do_train:
        T = int(t_idx.max()) + 1
        weights = np.full(n_valid, 1.0 / n_valid)
        model.params.zero_grad()
        tape = ad.Tape()
        l_vq, l_cvr, l_tot = vq_loss_batch(
            model, flat_states, t_idx, T, mode, weights, tape
        )
        ad.backward(tape, l_tot)
        ad.clip_grad_norm(model.params, grad_clip)
        stats["updated"] = optimizer.step(model.params)
        stats["l_vq"] = l_vq.item()
        stats["l_cvr"] = l_cvr.item()
        stats["l_tot"] = l_tot.item()
    return stats


def pca_project(points, n_components: int = 2, rng: np.random.Generator | None = None):
    """Principal-component projection via power iteration with deflation.

    Returns (coordinates [N, n_components], explained-variance ratios).
    Components come out in decreasing-eigenvalue order; ratios are relative
    to the total variance of the input cloud.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("pca_project needs at least 2 points of equal dimension")
    if rng is None:
        rng = np.random.default_rng(0)
    n, dim = pts.shape
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    total_var = float(np.trace(cov))

    components = []
    eigenvalues = []
    work = cov.copy()
    for _ in range(min(n_components, dim)):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        for _ in range(1000):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm < 1e-300:
                break
            w /= norm
            if np.linalg.norm(w - v) < 1e-14:
                v = w
                break
            v = w
        lam = float(v @ work @ v)
        components.append(v)
        eigenvalues.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)

    while len(components) < n_components:
        components.append(np.zeros(dim))
        eigenvalues.append(0.0)
    basis = np.stack(components, axis=1)
    coords = centered @ basis
    if total_var > 0.0:
        ratios = np.array(eigenvalues) / total_var
    else:
        ratios = np.zeros(n_components)
    return coords, ratios
