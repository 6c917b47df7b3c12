"""Latent codec and denoising-diffusion machinery for delay-noise removal.

Covers the math layer: variance schedules, the closed-form forward process,
DDPM/DDIM reverse steps, sub-schedule sampling, the noise-prediction losses,
a channel-PCA latent codec, and two analytic denoisers that stand in for a
trained network (a Gaussian-prior MMSE denoiser for validating samplers, and
a condition-prior denoiser that exercises the conditional path).

Latents and features are plain numpy arrays; timestep t = 0 means clean
data (alpha_bar_0 = 1) and t runs up to the schedule length T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule tables: beta_t, alpha_t = 1 - beta_t, and the running
    product alpha_bar_t, all indexed by t = 1..T."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "DiffusionSchedule":
        beta = np.asarray(betas, dtype=float)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("need a 1-D, nonempty beta sequence")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("every beta must lie strictly in (0, 1)")
        alpha = 1.0 - beta
        return cls(beta, alpha, np.cumprod(alpha))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar_t with the t = 0 convention alpha_bar_0 = 1."""
        if not 0 <= t <= self.T:
            raise ValueError(f"t must be in [0, {self.T}], got {t}")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def to_dict(self) -> dict:
        """JSON-ready form (for result audits); exact via float repr."""
        return {"beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "DiffusionSchedule":
        return cls.from_betas(np.asarray(data["beta"], dtype=float))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule from beta_start to beta_end over T steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return DiffusionSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward marginal draw:
    x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    a = sched.alpha_bar_at(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eps


def dm_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Mean squared noise-prediction error ||eps - eps_hat||^2 / n."""
    eps = np.asarray(eps, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {eps.shape} vs {eps_hat.shape}")
    return float(np.mean((eps - eps_hat) ** 2))


def total_loss(
    l_ldm: float, l_cls: float, l_reg: float, lambda_cls: float, lambda_reg: float
) -> float:
    """Combined training objective: l_ldm + lambda_cls*l_cls + lambda_reg*l_reg."""
    vals = (l_ldm, l_cls, l_reg, lambda_cls, lambda_reg)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("all loss terms and weights must be finite")
    return l_ldm + lambda_cls * l_cls + lambda_reg * l_reg


class Denoiser(Protocol):
    """Behavioral contract for noise predictors: shape-preserving and
    deterministic given (z_t, t, y_cond)."""

    def evaluate(
        self, z_t: np.ndarray, t: int, y_cond: Sequence[np.ndarray] = ()
    ) -> np.ndarray: ...


@dataclass(frozen=True)
class AnalyticGaussianDenoiser:
    """Exact MMSE noise predictor for x0 ~ N(mu0, sigma0^2) i.i.d. elements.

    eps_hat(x_t, t) = (x_t - sqrt(a) E[x0 | x_t]) / sqrt(1 - a) with
    E[x0 | x_t] = mu0 + sqrt(a) sigma0^2 / (a sigma0^2 + 1 - a) (x_t - sqrt(a) mu0),
    a = alpha_bar_t. Ignores y_cond. Lets every sampler formula be tested
    against a denoiser that is provably optimal for its prior.
    """

    mu0: float
    sigma0: float
    sched: DiffusionSchedule

    def __post_init__(self):
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")

    def evaluate(self, z_t, t, y_cond=()):
        if t <= 0:
            raise ValueError("denoiser is undefined at t = 0 (no noise to predict)")
        a = self.sched.alpha_bar_at(t)
        sa = math.sqrt(a)
        gain = sa * self.sigma0**2 / (a * self.sigma0**2 + 1.0 - a)
        ex0 = self.mu0 + gain * (np.asarray(z_t, dtype=float) - sa * self.mu0)
        return (z_t - sa * ex0) / math.sqrt(1.0 - a)


@dataclass(frozen=True)
class ConditionPriorDenoiser:
    """Plumbing denoiser for the conditional path: treats the pointwise mean
    of the conditioning latents (over conditions and channels) as the prior
    mean mu0 and applies the same MMSE shrinkage as the Gaussian denoiser."""

    sched: DiffusionSchedule
    sigma0: float = 1.0

    def evaluate(self, z_t, t, y_cond=()):
        if t <= 0:
            raise ValueError("denoiser is undefined at t = 0")
        z_t = np.asarray(z_t, dtype=float)
        if len(y_cond):
            stacked = np.concatenate([np.asarray(c, dtype=float) for c in y_cond], axis=-1)
            mu0 = stacked.mean(axis=-1, keepdims=True)
        else:
            mu0 = 0.0
        a = self.sched.alpha_bar_at(t)
        sa = math.sqrt(a)
        gain = sa * self.sigma0**2 / (a * self.sigma0**2 + 1.0 - a)
        ex0 = mu0 + gain * (z_t - sa * mu0)
        return (z_t - sa * ex0) / math.sqrt(1.0 - a)


def ddpm_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    use_posterior_variance: bool = False,
) -> np.ndarray:
    """One ancestral reverse step t -> t-1.

    x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t) + sigma z,
    with z ~ N(0, I) for t > 1 and z = 0 at t = 1. sigma^2 is beta_t by
    default; use_posterior_variance switches to the posterior variance
    beta_t (1 - abar_{t-1}) / (1 - abar_t).
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must be in [1, {sched.T}], got {t}")
    beta = float(sched.beta[t - 1])
    alpha = float(sched.alpha[t - 1])
    abar = sched.alpha_bar_at(t)
    mean = (x_t - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
    if t == 1:
        return mean
    var = beta
    if use_posterior_variance:
        var = beta * (1.0 - sched.alpha_bar_at(t - 1)) / (1.0 - abar)
    return mean + math.sqrt(var) * rng.standard_normal(np.shape(x_t))


def ddim_step(
    x_t: np.ndarray,
    t: int,
    t_prev: int,
    eps_hat: np.ndarray,
    sched: DiffusionSchedule,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Generalized (possibly deterministic) reverse step t -> t_prev.

    Reconstructs x0_hat = (x_t - sqrt(1-abar_t) eps_hat)/sqrt(abar_t) and
    re-noises it to level t_prev; eta = 0 is fully deterministic, eta = 1
    matches the ancestral posterior variance.
    """
    if not 0 <= t_prev < t <= sched.T:
        raise ValueError(f"need 0 <= t_prev < t <= {sched.T}, got t={t}, t_prev={t_prev}")
    a = sched.alpha_bar_at(t)
    ap = sched.alpha_bar_at(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - a) * eps_hat) / math.sqrt(a)
    sigma = 0.0
    if eta > 0.0:
        sigma = (
            eta
            * math.sqrt((1.0 - ap) / (1.0 - a))
            * math.sqrt(max(1.0 - a / ap, 0.0))
        )
    out = math.sqrt(ap) * x0_hat + math.sqrt(max(1.0 - ap - sigma**2, 0.0)) * eps_hat
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 requires an rng")
        out = out + sigma * rng.standard_normal(np.shape(x_t))
    return out


def strided_timesteps(T: int, n_steps: int) -> list[int]:
    """n_steps timesteps uniformly strided from T down to 1 (inclusive)."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    ts = np.unique(np.round(np.linspace(T, 1, n_steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def respaced_schedule(sched: DiffusionSchedule, ts_desc: list[int]) -> DiffusionSchedule:
    """Sub-schedule whose step s has alpha_bar equal to the original
    alpha_bar at ts_desc[-s]; its effective betas are the alpha_bar ratios of
    consecutive visited timesteps, so ancestral stepping through it is the
    ancestral chain restricted to the visited timesteps."""
    asc = list(reversed(ts_desc))
    prev = 1.0
    betas = []
    for t in asc:
        cur = sched.alpha_bar_at(t)
        betas.append(1.0 - cur / prev)
        prev = cur
    return DiffusionSchedule.from_betas(np.array(betas))


def sample(
    denoiser: Denoiser,
    y_cond: Sequence[np.ndarray],
    sched: DiffusionSchedule,
    n_steps: int,
    kind: str = "ddpm",
    rng: np.random.Generator | None = None,
    shape: tuple[int, ...] | None = None,
    eta: float = 0.0,
) -> np.ndarray:
    """Draw one latent by reverse diffusion from N(0, I).

    Visits n_steps timesteps uniformly strided from T down to 1. The ddpm
    kind steps through the respaced ancestral chain; the ddim kind jumps
    between visited timesteps directly (deterministically for eta = 0).
    The denoiser always sees original-schedule timesteps.
    """
    if shape is None:
        if not len(y_cond):
            raise ValueError("need an explicit shape when y_cond is empty")
        shape = np.shape(y_cond[0])
    if rng is None:
        raise ValueError("sampling requires an rng")
    x = rng.standard_normal(shape)
    ts = strided_timesteps(sched.T, n_steps)
    if kind == "ddim":
        for k, t in enumerate(ts):
            t_prev = ts[k + 1] if k + 1 < len(ts) else 0
            eps = denoiser.evaluate(x, t, y_cond)
            x = ddim_step(x, t, t_prev, eps, sched, eta=eta, rng=rng)
    elif kind == "ddpm":
        sub = respaced_schedule(sched, ts)
        for k, t in enumerate(ts):
            eps = denoiser.evaluate(x, t, y_cond)
            x = ddpm_step(x, len(ts) - k, eps, sub, rng)
    else:
        raise ValueError(f"unknown sampler kind {kind!r} (expected 'ddpm' or 'ddim')")
    return x


@dataclass(frozen=True)
class LinearCodec:
    """Channel-space PCA codec: encode projects feature channels onto the
    leading principal directions, decode lifts back. decode(encode(x)) is
    the orthogonal projection of x onto the retained channel subspace
    (about the fitted mean), and encode(decode(z)) = z exactly."""

    mean: np.ndarray  # (C,)
    components: np.ndarray  # (C, k), orthonormal columns
    rate: int

    @property
    def channels(self) -> int:
        return int(self.mean.size)

    @property
    def latent_channels(self) -> int:
        return int(self.components.shape[1])

    def encode(self, feature: np.ndarray) -> np.ndarray:
        f = np.asarray(feature, dtype=float)
        if f.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {f.shape[-1]}")
        return (f - self.mean) @ self.components

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=float)
        if z.shape[-1] != self.latent_channels:
            raise ValueError(
                f"expected {self.latent_channels} latent channels, got {z.shape[-1]}"
            )
        return z @ self.components.T + self.mean


def fit_codec(features: Sequence[np.ndarray], rate: int) -> LinearCodec:
    """Fit the channel-PCA codec on feature samples at compression rate
    `rate` (kept channels = C / rate).

    Every spatial location of every feature map is one C-dimensional sample.
    Raises ValueError when the rate does not divide the channel count or
    there are fewer samples than kept channels.
    """
    if not features:
        raise ValueError("need at least one feature sample")
    mats = []
    channels = None
    for f in features:
        arr = np.asarray(getattr(f, "grid", f), dtype=float)
        if channels is None:
            channels = arr.shape[-1]
        elif arr.shape[-1] != channels:
            raise ValueError("feature samples disagree on channel count")
        mats.append(arr.reshape(-1, channels))
    if rate < 1 or channels % rate != 0:
        raise ValueError(f"rate {rate} must be >= 1 and divide {channels} channels")
    keep = channels // rate
    data = np.concatenate(mats, axis=0)
    if data.shape[0] < keep:
        raise ValueError(
            f"need at least {keep} channel samples to fit rate {rate}, got {data.shape[0]}"
        )
    mean = data.mean(axis=0)
    _, _, vt = np.linalg.svd(data - mean, full_matrices=False)
    comps = vt[:keep].T
    # fix the SVD sign ambiguity for reproducibility
    for j in range(comps.shape[1]):
        pivot = np.argmax(np.abs(comps[:, j]))
        if comps[pivot, j] < 0:
            comps[:, j] = -comps[:, j]
    return LinearCodec(mean=mean, components=comps, rate=rate)


def cmp_loss(feature: np.ndarray, reconstructed: np.ndarray, var_floor: float = 1e-12) -> float:
    """Per-channel Gaussian-fit KL divergence between a feature map and its
    reconstruction, summed over channels.

    Each channel is summarized by the mean/variance of its entries; the KL
    of the two fitted Gaussians is accumulated. Variances are floored at
    var_floor so constant channels stay finite.
    """
    f = np.asarray(getattr(feature, "grid", feature), dtype=float)
    g = np.asarray(getattr(reconstructed, "grid", reconstructed), dtype=float)
    if f.shape != g.shape:
        raise ValueError(f"shape mismatch: {f.shape} vs {g.shape}")
    fc = f.reshape(-1, f.shape[-1])
    gc = g.reshape(-1, g.shape[-1])
    mu1, mu2 = fc.mean(axis=0), gc.mean(axis=0)
    v1 = np.maximum(fc.var(axis=0), var_floor)
    v2 = np.maximum(gc.var(axis=0), var_floor)
    kl = 0.5 * (np.log(v2 / v1) + (v1 + (mu1 - mu2) ** 2) / v2 - 1.0)
    return float(np.sum(kl))


def fuse_condition(ego: np.ndarray, others: Sequence[np.ndarray]) -> np.ndarray:
    """Channel-axis concatenation [ego | others...]; order-sensitive by
    construction (permuting others permutes channel blocks)."""
    ego = np.asarray(ego, dtype=float)
    if not len(others):
        return ego
    arrs = [ego] + [np.asarray(o, dtype=float) for o in others]
    spatial = ego.shape[:-1]
    for a in arrs[1:]:
        if a.shape[:-1] != spatial:
            raise ValueError(f"spatial dims differ: {a.shape[:-1]} vs {spatial}")
    return np.concatenate(arrs, axis=-1)
