"""Central-difference gradient checks against an independent numpy reference.

The reference losses below are written from the definitions with numpy only;
autograd gradients of the library losses are compared to central differences
of these references. For the confidence-modulated objective the mixed target
is held at its unperturbed value, matching the stop-gradient contract.
"""

import numpy as np
import torch

from condistill import distill
from condistill.distill import LossConfig

STEP = 1e-5
TOL = 1e-4
FLOOR = 1e-12


def np_softmax(x, tau=1.0):
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def np_kd(target, student, tau):
    t_log_t = np.where(target > 0, target * np.log(np.where(target > 0, target, 1.0)), 0.0)
    kl = (t_log_t - target * np.log(np.maximum(student, FLOOR))).sum(axis=-1)
    return tau**2 * kl.mean()


def np_bce_logit(x, z, mu):
    lp = np.maximum(np_log_sigmoid(x), np.log(FLOOR))
    lq = np.maximum(np_log_sigmoid(-x), np.log(FLOOR))
    return -(mu * z * lp + (1 - z) * lq).mean()


def np_mix(p, zt, z):
    w = z * zt + (1 - z) * (1 - zt)
    return w[:, None] * p + (1 - w[:, None]) / p.shape[-1]


def reference(method, s_logits, c_logit, t_logits, z, y, cfg, frozen_zt):
    if method == "condi-sr":
        target = np_mix(np_softmax(t_logits, cfg.tau), frozen_zt, z)
        return np_kd(target, np_softmax(s_logits, cfg.tau), cfg.tau) + cfg.lam * np_bce_logit(c_logit, z, cfg.mu)
    if method == "st-ent":
        return np_kd(np_softmax(t_logits, cfg.tau), np_softmax(s_logits, cfg.tau), cfg.tau)
    if method == "naive-bce":
        return np_bce_logit(c_logit, z, cfg.mu)
    if method == "st-conf":
        p = np_softmax(s_logits)
        c = np.clip(np_sigmoid(c_logit), FLOOR, 1 - FLOOR)
        onehot = np.eye(p.shape[-1])[y]
        pm = c[:, None] * p + (1 - c[:, None]) * onehot
        task = -np.log(np.maximum((pm * onehot).sum(-1), FLOOR))
        return (task - cfg.conf_weight * np.log(c)).mean()
    raise ValueError(method)


def library(method, s_logits, c_logit, t_logits, z, y, cfg):
    out = (s_logits, c_logit)
    if method == "condi-sr":
        return distill.condi_sr_loss(t_logits, out, z, cfg).total
    if method == "st-ent":
        return distill.st_ent_loss(t_logits, out, cfg.tau)
    if method == "naive-bce":
        return distill.naive_bce_loss(out, z, cfg.mu)
    return distill.st_conf_loss(out, y, cfg.conf_weight)


def random_instance(rng, B=4, C=5):
    cfg = LossConfig(tau=float(rng.uniform(0.5, 2.0)), lam=float(rng.uniform(0.0, 2.0)),
                     mu=float(rng.uniform(1.0, 3.0)), conf_weight=float(rng.uniform(0.1, 1.0)))
    return dict(
        s_logits=rng.normal(0, 2, (B, C)),
        c_logit=rng.uniform(-4, 4, B),
        t_logits=rng.normal(0, 2, (B, C)),
        z=rng.integers(0, 2, B).astype(np.float64),
        y=rng.integers(0, C, B),
        cfg=cfg,
    )


def check_instance(method, inst) -> float:
    """Relative error ||g_autograd - g_fd|| / max(||g_autograd||, ||g_fd||)."""
    s = torch.tensor(inst["s_logits"], dtype=torch.float64, requires_grad=True)
    c = torch.tensor(inst["c_logit"], dtype=torch.float64, requires_grad=True)
    t = torch.tensor(inst["t_logits"], dtype=torch.float64)
    z = torch.tensor(inst["z"], dtype=torch.float64)
    loss = library(method, s, c, t, z, inst["y"], inst["cfg"])
    gs, gc = torch.autograd.grad(loss, (s, c), allow_unused=True)
    g_auto = np.concatenate([
        (gs if gs is not None else torch.zeros_like(s)).numpy().ravel(),
        (gc if gc is not None else torch.zeros_like(c)).numpy().ravel(),
    ])

    frozen_zt = np_sigmoid(inst["c_logit"])
    args = dict(t_logits=inst["t_logits"], z=inst["z"], y=inst["y"], cfg=inst["cfg"], frozen_zt=frozen_zt)
    x0 = np.concatenate([inst["s_logits"].ravel(), inst["c_logit"]])
    n_s = inst["s_logits"].size

    def f(x):
        return reference(method, x[:n_s].reshape(inst["s_logits"].shape), x[n_s:], **args)

    ref0, got = f(x0), loss.item()
    assert abs(ref0 - got) <= 1e-9 * max(1.0, abs(ref0)), (method, ref0, got)
    g_fd = np.empty_like(x0)
    for i in range(len(x0)):
        e = np.zeros_like(x0)
        e[i] = STEP
        g_fd[i] = (f(x0 + e) - f(x0 - e)) / (2 * STEP)
    denom = max(np.linalg.norm(g_auto), np.linalg.norm(g_fd), 1e-300)
    return float(np.linalg.norm(g_auto - g_fd) / denom)


def run(method, n=100, seed=0) -> list[float]:
    rng = np.random.default_rng(seed)
    return [check_instance(method, random_instance(rng)) for _ in range(n)]
