"""Per-skill state-density models returning log rho_z(s).

Two backends share one interface (``add``, ``fit``, ``fitted``,
``log_density``):

* :class:`KdeDensity` (default): Gaussian KDE with Scott's-rule bandwidth
  over the most recent states of each skill.
* :class:`VaeDensity`: a small Gaussian VAE per skill whose ELBO stands in
  for the log-density.
"""

from __future__ import annotations

from collections import deque

import numpy as np
from scipy.stats import gaussian_kde

from safelab.approx import Mlp, Optimizer, split_gaussian

LOG_2PI = float(np.log(2 * np.pi))


class NotFittedError(RuntimeError):
    """log-density requested before the model for that skill was fitted."""


class _SkillBuffers:
    def __init__(self, n_skills: int, window: int):
        self.n_skills = n_skills
        self.window = window
        self.buffers = [deque(maxlen=window) for _ in range(n_skills)]

    def add(self, z: int, states) -> None:
        for s in np.atleast_2d(states):
            self.buffers[z].append(np.asarray(s, dtype=float))

    def states(self, z: int) -> np.ndarray:
        return np.array(self.buffers[z]) if self.buffers[z] else np.zeros((0, 2))


class KdeDensity(_SkillBuffers):
    def __init__(self, n_skills: int, window: int = 10_000, seed: int = 0):
        super().__init__(n_skills, window)
        self.kdes: list[gaussian_kde | None] = [None] * n_skills
        self._rng = np.random.default_rng(seed)

    def fitted(self, z: int) -> bool:
        return self.kdes[z] is not None

    def fit(self) -> None:
        for z in range(self.n_skills):
            pts = self.states(z)
            if len(pts) < 3:
                continue
            try:
                self.kdes[z] = gaussian_kde(pts.T, bw_method="scott")
            except np.linalg.LinAlgError:
                # a skill parked in one spot gives a singular covariance
                jitter = pts + self._rng.normal(0.0, 1e-3, size=pts.shape)
                self.kdes[z] = gaussian_kde(jitter.T, bw_method="scott")

    def log_density(self, z: int, states) -> np.ndarray:
        kde = self.kdes[z]
        if kde is None:
            raise NotFittedError(f"density for skill {z} has not been fitted")
        return kde.logpdf(np.atleast_2d(states).T)


class _Vae:
    """Gaussian encoder/decoder pair on standardised 2-D states."""

    def __init__(self, dim: int, latent: int, hidden: tuple[int, ...], lr: float,
                 rng: np.random.Generator):
        self.enc = Mlp((dim, *hidden, 2 * latent), "gaussian", rng=rng)
        self.dec = Mlp((latent, *hidden, 2 * dim), "gaussian", rng=rng)
        self.opt_enc = Optimizer(self.enc, lr)
        self.opt_dec = Optimizer(self.dec, lr)
        self.latent = latent

    def loss(self, x, eps, beta: float):
        """Negative ELBO (mean over rows) and gradients for encoder, decoder."""
        n = len(x)
        out_e, ce = self.enc.forward(x)
        mu, lv = split_gaussian(out_e)
        std = np.exp(0.5 * lv)
        z = mu + std * eps
        out_d, cd = self.dec.forward(z)
        xm, xlv = split_gaussian(out_d)
        inv = np.exp(-xlv)
        err = xm - x
        rec = 0.5 * np.sum(LOG_2PI + xlv + err ** 2 * inv, axis=1)
        kl = 0.5 * np.sum(np.exp(lv) + mu ** 2 - 1.0 - lv, axis=1)
        loss = float(np.mean(rec + beta * kl))
        g_dec_out = np.concatenate([err * inv, 0.5 * (1.0 - err ** 2 * inv)], axis=1) / n
        g_dec, g_z = self.dec.backward(cd, g_dec_out)
        g_mu = g_z + beta * mu / n
        g_lv = g_z * eps * 0.5 * std + beta * 0.5 * (np.exp(lv) - 1.0) / n
        g_enc, _ = self.enc.backward(ce, np.concatenate([g_mu, g_lv], axis=1))
        return loss, g_enc, g_dec

    def elbo(self, x, beta: float) -> np.ndarray:
        mu, lv = split_gaussian(self.enc.predict(x))
        xm, xlv = split_gaussian(self.dec.predict(mu))
        rec = 0.5 * np.sum(LOG_2PI + xlv + (xm - x) ** 2 * np.exp(-xlv), axis=1)
        kl = 0.5 * np.sum(np.exp(lv) + mu ** 2 - 1.0 - lv, axis=1)
        return -(rec + beta * kl)


class VaeDensity(_SkillBuffers):
    def __init__(self, n_skills: int, center, scale, window: int = 10_000, beta: float = 0.5,
                 lr: float = 1e-2, latent: int = 2, hidden: tuple[int, ...] = (32, 32),
                 steps_per_fit: int = 50, batch_size: int = 256, seed: int = 0):
        super().__init__(n_skills, window)
        self.center = np.asarray(center, float)
        self.scale = np.asarray(scale, float)
        self.beta = beta
        self.steps_per_fit = steps_per_fit
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)
        self.vaes = [_Vae(2, latent, hidden, lr, self._rng) for _ in range(n_skills)]
        self._fitted = [False] * n_skills

    def fitted(self, z: int) -> bool:
        return self._fitted[z]

    def fit(self) -> None:
        for z, vae in enumerate(self.vaes):
            pts = self.states(z)
            if len(pts) < 3:
                continue
            x = (pts - self.center) / self.scale
            for _ in range(self.steps_per_fit):
                idx = self._rng.integers(len(x), size=self.batch_size)
                eps = self._rng.standard_normal((self.batch_size, vae.latent))
                _, g_enc, g_dec = vae.loss(x[idx], eps, self.beta)
                vae.opt_enc.step(g_enc)
                vae.opt_dec.step(g_dec)
            self._fitted[z] = True

    def log_density(self, z: int, states) -> np.ndarray:
        if not self._fitted[z]:
            raise NotFittedError(f"density for skill {z} has not been fitted")
        x = (np.atleast_2d(states) - self.center) / self.scale
        # change of variables back to raw state units
        return self.vaes[z].elbo(x, self.beta) - np.sum(np.log(self.scale))


def make_density(kind: str, n_skills: int, center, scale, window: int = 10_000,
                 seed: int = 0, **kw):
    if kind == "kde":
        return KdeDensity(n_skills, window, seed)
    if kind == "vae":
        return VaeDensity(n_skills, center, scale, window, seed=seed, **kw)
    raise ValueError(f"unknown density backend {kind!r}; expected 'kde' or 'vae'")
