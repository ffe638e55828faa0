"""Untargeted l2 query-based black-box attacks against a :class:`VictimModel`.

Every attack talks to the victim only through :class:`_Run.query`, which
clips the query to [0, 1], rounds it to float32, records it in the trace with
its phase and iteration, and stops the run once the budget is spent (or, when
``stop_on_success`` is set, at the first adversarial query with
perturbation ratio at most ``rho_max``).

Convergence heuristics are simplified; the query patterns follow the
original algorithms.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ..numkit import Rng
from .config import AttackConfig, Method
from .trace import Phase, QueryTrace
from .victim import Mode, VictimModel

ZO, LS, OTHER = Phase.ZERO_ORDER, Phase.LINE_SEARCH, Phase.OTHER


class PreconditionError(ValueError):
    pass


class _Stop(Exception):
    pass


@dataclass
class AttackOutcome:
    success: bool
    queries_used: int
    rho: float
    final_example: np.ndarray
    original_label: int
    queries_to_success: int | None = None

    def to_dict(self) -> dict:
        return {"success": self.success, "queries_used": self.queries_used,
                "rho": self.rho, "original_label": self.original_label,
                "queries_to_success": self.queries_to_success}


def perturbation_ratio(x, x_adv) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    x_adv = np.asarray(x_adv, dtype=np.float64).reshape(-1)
    if x.shape != x_adv.shape:
        raise ValueError("dimension mismatch")
    nx = np.linalg.norm(x)
    if nx == 0:
        raise ValueError("zero-norm reference image")
    return float(np.linalg.norm(x_adv - x) / nx)


class _Noise:
    """Gaussian noise source with the optional moving-target distortions.

    The per-batch scale and mean shift come from their own generator so that
    switching an adaptation on never changes the underlying noise draws.
    """

    def __init__(self, cfg: AttackConfig, rng: Rng, adapt_rng: Rng, x0: np.ndarray):
        self.cfg = cfg
        self.rng = rng
        self.adapt_rng = adapt_rng
        self.span = float(x0.max() - x0.min())
        self.scale = 1.0
        self.shift = 0.0
        self.history: list[tuple[float, float]] = []

    def new_batch(self) -> None:
        cfg = self.cfg
        if cfg.alpha_max is not None:
            self.scale = float(self.adapt_rng.uniform(cfg.alpha_min, cfg.alpha_max))
        if cfg.r_mu:
            bound = cfg.r_mu * self.span
            self.shift = float(self.adapt_rng.uniform(-bound, bound))
        self.history.append((self.scale, self.shift))

    def normal(self, d: int) -> np.ndarray:
        z = self.rng.standard_normal(d)
        if self.shift:
            z = z + self.shift
        if self.scale != 1.0:
            z = self.scale * z
        return z


class _Run:
    def __init__(self, victim: VictimModel, x0: np.ndarray, y0: int,
                 cfg: AttackConfig, rng: Rng):
        self.victim = victim
        self.x0 = x0
        self.y0 = y0
        self.d = x0.size
        self.norm0 = float(np.linalg.norm(x0))
        self.cfg = cfg
        self.rng = rng
        self.noise = _Noise(cfg, rng, rng.spawn(1)[0], x0)
        self.trace = QueryTrace(self.d, capacity=min(cfg.query_budget, 4096))
        self.t = 0
        self.best: np.ndarray | None = None
        self.best_rho = math.inf
        self.first_success: int | None = None

    def query(self, x, phase: Phase, soft: bool = False):
        if len(self.trace) >= self.cfg.query_budget:
            raise _Stop
        q = np.clip(x, 0.0, 1.0).astype(np.float32)
        out = self.victim.query(q, Mode.SOFT if soft else Mode.HARD)
        self.trace.append(q, phase, self.t)
        label = int(np.argmax(out)) if soft else out
        if label != self.y0:
            rho = perturbation_ratio(self.x0, q)
            if rho < self.best_rho:
                self.best, self.best_rho = q, rho
            if rho <= self.cfg.rho_max and self.first_success is None:
                self.first_success = len(self.trace)
                if self.cfg.stop_on_success:
                    raise _Stop
        return out

    def is_adv(self, x, phase: Phase) -> bool:
        return self.query(x, phase) != self.y0

    def log_prob(self, x, phase: Phase) -> float:
        p = self.query(x, phase, soft=True)
        return math.log(max(float(p[self.y0]), 1e-300))

    # shared pieces of the decision-based attacks

    def random_start(self, max_queries: int) -> np.ndarray | None:
        for _ in range(max_queries):
            r = self.rng.uniform(0.0, 1.0, self.d)
            if self.is_adv(r, OTHER):
                return np.clip(r, 0.0, 1.0).astype(np.float32).astype(np.float64)
        return None

    def blend_search(self, x_adv: np.ndarray, tol: float) -> np.ndarray:
        """Bisect the segment x0 -> x_adv down to the decision boundary."""
        lo, hi = 0.0, 1.0
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if self.is_adv((1 - mid) * self.x0 + mid * x_adv, LS):
                hi = mid
            else:
                lo = mid
        return np.clip((1 - hi) * self.x0 + hi * x_adv, 0.0, 1.0)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


# -- soft-label attacks ------------------------------------------------------

def _nes(r: _Run) -> None:
    cfg = r.cfg
    sigma, n, lr = cfg.nes_sigma, cfg.nes_samples, cfg.nes_lr
    radius = cfg.rho_max * r.norm0 * (1 - 1e-6)
    x = r.x0.copy()
    for t in itertools.count(1):
        r.t = t
        r.noise.new_batch()
        grad = np.zeros(r.d)
        for _ in range(n):
            u = r.noise.normal(r.d)
            lp = r.log_prob(x + sigma * u, ZO)
            lm = r.log_prob(x - sigma * u, ZO)
            grad += (lp - lm) * u
        grad /= 2 * sigma * n
        # descend log p(true class), stay inside the l2 budget ball
        x = x - lr * _unit(grad)
        delta = x - r.x0
        nd = np.linalg.norm(delta)
        if nd > radius:
            x = r.x0 + delta * (radius / nd)
        x = np.clip(x, 0.0, 1.0)
        r.query(x, OTHER)


def _simba(r: _Run) -> None:
    eps = r.cfg.simba_epsilon
    x = r.x0.astype(np.float32)
    best = r.log_prob(x, ZO)
    t = 0
    while True:
        for k in r.rng.permutation(r.d):
            t += 1
            r.t = t
            for sgn in (-1.0, 1.0):
                cand = x.copy()
                cand[k] = np.float32(min(1.0, max(0.0, float(x[k]) + sgn * eps)))
                if cand[k] == x[k]:
                    continue
                lp = r.log_prob(cand, ZO)
                if lp < best:
                    x, best = cand, lp
                    break


# -- decision-based attacks --------------------------------------------------

def _hsja(r: _Run) -> None:
    cfg = r.cfg
    theta = cfg.hsja_theta if cfg.hsja_theta is not None else 0.01 / math.sqrt(r.d)
    start = r.random_start(cfg.hsja_init_queries)
    if start is None:
        return
    xb = r.blend_search(start, theta)
    dist = np.linalg.norm(xb - r.x0)
    for t in itertools.count(1):
        r.t = t
        r.noise.new_batch()
        delta = math.sqrt(r.d) * theta * dist
        n_evals = int(min(cfg.hsja_init_evals * math.sqrt(t), cfg.hsja_max_evals))
        rv = np.empty((n_evals, r.d))
        fval = np.empty(n_evals)
        for j in range(n_evals):
            rv[j] = _unit(r.noise.normal(r.d))
            fval[j] = 1.0 if r.is_adv(xb + delta * rv[j], ZO) else -1.0
        mean = fval.mean()
        if mean == 1.0:
            grad = rv.mean(axis=0)
        elif mean == -1.0:
            grad = -rv.mean(axis=0)
        else:
            grad = ((fval - mean)[:, None] * rv).mean(axis=0)
        grad = _unit(grad)
        # geometric step-size search, then back to the boundary
        eps = dist / math.sqrt(t)
        for _ in range(30):
            if r.is_adv(xb + eps * grad, LS):
                xb = np.clip(xb + eps * grad, 0.0, 1.0)
                break
            eps /= 2.0
        xb = r.blend_search(xb, theta)
        dist = np.linalg.norm(xb - r.x0)


def _signopt(r: _Run) -> None:
    cfg = r.cfg
    x0 = r.x0
    cap = math.sqrt(r.d)

    def search_from(theta, init_lbd, best):
        # coarse search used while picking a starting direction
        if init_lbd > best:
            if not r.is_adv(x0 + best * theta, LS):
                return math.inf
            lbd = best
        else:
            lbd = init_lbd
        lo, hi = 0.0, lbd
        while hi - lo > 1e-3:
            mid = 0.5 * (lo + hi)
            if r.is_adv(x0 + mid * theta, LS):
                hi = mid
            else:
                lo = mid
        return hi

    def search_local(theta, init_lbd, tol):
        lbd = init_lbd
        if not r.is_adv(x0 + lbd * theta, LS):
            lo, hi = lbd, lbd * 1.01
            while not r.is_adv(x0 + hi * theta, LS):
                hi *= 1.01
                if hi > cap:
                    return math.inf
        else:
            hi, lo = lbd, lbd * 0.99
            while r.is_adv(x0 + lo * theta, LS):
                lo *= 0.99
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if r.is_adv(x0 + mid * theta, LS):
                hi = mid
            else:
                lo = mid
        return hi

    best_theta, g_theta = None, math.inf
    for _ in range(cfg.signopt_init_directions):
        theta = r.rng.standard_normal(r.d)
        if r.is_adv(x0 + theta, OTHER):
            lbd0 = np.linalg.norm(theta)
            theta = theta / lbd0
            lbd = search_from(theta, lbd0, g_theta)
            if lbd < g_theta:
                best_theta, g_theta = theta, lbd
    if best_theta is None:
        return

    xg, gg = best_theta, g_theta
    alpha, beta = cfg.signopt_alpha, cfg.signopt_beta
    for t in itertools.count(1):
        r.t = t
        r.noise.new_batch()
        sign_grad = np.zeros(r.d)
        for _ in range(cfg.signopt_k):
            u = _unit(r.noise.normal(r.d))
            probe = _unit(xg + beta * u)
            sign = -1.0 if r.is_adv(x0 + gg * probe, ZO) else 1.0
            sign_grad += sign * u
        sign_grad /= cfg.signopt_k

        tol = beta / 500
        min_theta, min_g = xg, gg
        for _ in range(15):
            new_theta = _unit(xg - alpha * sign_grad)
            new_g = search_local(new_theta, min_g, tol)
            alpha *= cfg.signopt_ls_grow
            if new_g < min_g:
                min_theta, min_g = new_theta, new_g
            else:
                break
        if min_g >= gg:
            for _ in range(15):
                alpha *= cfg.signopt_ls_shrink
                new_theta = _unit(xg - alpha * sign_grad)
                new_g = search_local(new_theta, gg, tol)
                if new_g < gg:
                    min_theta, min_g = new_theta, new_g
                    break
        if alpha < cfg.signopt_min_alpha:
            alpha = 1.0
            beta *= 0.1
            if beta < cfg.signopt_min_beta:
                return
        xg, gg = min_theta, min_g


def _signflip(r: _Run) -> None:
    cfg = r.cfg
    theta = 0.01 / math.sqrt(r.d)
    start = r.random_start(cfg.hsja_init_queries)
    if start is None:
        return
    delta = r.blend_search(start, theta) - r.x0
    alpha, p = cfg.signflip_alpha_init, 0.0
    for t in itertools.count(1):
        r.t = t
        # projection step: pull the perturbation towards the source
        cand = np.clip(r.x0 + (1 - alpha) * delta, 0.0, 1.0)
        if r.is_adv(cand, ZO):
            delta = cand - r.x0
            alpha = min(alpha * cfg.signflip_alpha_rate, 0.5)
        else:
            alpha = max(alpha / cfg.signflip_alpha_rate, 1e-6)
        # random sign flip of a sparse coordinate subset
        p_eff = p + cfg.signflip_p_step
        mask = r.rng.random(r.d) < p_eff
        if not mask.any():
            mask[r.rng.integers(r.d)] = True
        cand = np.clip(r.x0 + np.where(mask, -delta, delta), 0.0, 1.0)
        if r.is_adv(cand, ZO):
            delta = cand - r.x0
            p = p_eff
        else:
            p = max(p - cfg.signflip_p_step, 0.0)


def _boundary(r: _Run) -> None:
    cfg = r.cfg
    start = r.random_start(cfg.hsja_init_queries)
    if start is None:
        return
    x = r.blend_search(start, 0.01 / math.sqrt(r.d))
    sph = src = cfg.ba_step_init
    sph_hits: list[bool] = []
    cand_hits: list[bool] = []
    for t in itertools.count(1):
        r.t = t
        r.noise.new_batch()
        to_src = r.x0 - x
        src_norm = np.linalg.norm(to_src)
        src_dir = to_src / src_norm
        pert = r.noise.normal(r.d)
        pert -= np.dot(pert, src_dir) * src_dir
        pert *= sph * src_norm / np.linalg.norm(pert)
        spherical = np.clip(r.x0 + (pert - to_src) / math.sqrt(sph ** 2 + 1), 0.0, 1.0)
        new_to_src = r.x0 - spherical
        new_norm = np.linalg.norm(new_to_src)
        length = max(0.0, src * src_norm + new_norm - src_norm) / new_norm
        candidate = np.clip(spherical + length * new_to_src, 0.0, 1.0)

        hit = r.is_adv(spherical, ZO)
        sph_hits.append(hit)
        if hit:
            ok = r.is_adv(candidate, OTHER)
            cand_hits.append(ok)
            if ok:
                x = candidate.astype(np.float32).astype(np.float64)

        if t % cfg.ba_adapt_every == 0:
            rate = np.mean(sph_hits)
            if rate > 0.5:
                sph *= cfg.ba_lr
                src *= cfg.ba_lr
            elif rate < 0.2:
                sph /= cfg.ba_lr
                src /= cfg.ba_lr
            if cand_hits:
                rate = np.mean(cand_hits)
                if rate > 0.5:
                    src *= cfg.ba_lr
                elif rate < 0.2:
                    src /= cfg.ba_lr
            sph_hits.clear()
            cand_hits.clear()


_ATTACKS = {
    Method.NES: _nes,
    Method.SIMBA: _simba,
    Method.HSJA: _hsja,
    Method.SIGN_OPT: _signopt,
    Method.SIGN_FLIP: _signflip,
    Method.BA: _boundary,
}


def run_attack(method: Method | str, victim: VictimModel, x0, cfg: AttackConfig,
               rng: Rng, label: int | None = None) -> tuple[QueryTrace, AttackOutcome]:
    """Attack ``x0`` until success (if ``cfg.stop_on_success``) or budget exhaustion.

    ``label`` is the ground-truth class; the precondition is that the victim
    classifies ``x0`` correctly. Without it the victim's own prediction is the
    reference label.
    """
    method = Method(method)
    if cfg.method is not method:
        cfg = cfg.replace(method=method)
    x0 = np.asarray(x0, dtype=np.float32).astype(np.float64).reshape(-1)
    if x0.size != victim.input_dim:
        raise ValueError(f"x0 has dimension {x0.size}, victim expects {victim.input_dim}")
    pred = victim.label_of(x0)
    if label is not None and pred != label:
        raise PreconditionError(f"x0 is already misclassified ({pred} != {label})")
    run = _Run(victim, x0, pred, cfg, rng)
    before = victim.query_counter
    try:
        _ATTACKS[method](run)
    except _Stop:
        pass
    used = len(run.trace)
    assert used == victim.query_counter - before
    if run.best is not None:
        final, rho = run.best, run.best_rho
    elif used:
        final = run.trace.queries[-1].copy()
        rho = perturbation_ratio(x0, final)
    else:
        final, rho = x0.astype(np.float32), 0.0
    outcome = AttackOutcome(
        success=run.first_success is not None,
        queries_used=used,
        rho=rho,
        final_example=np.asarray(final, dtype=np.float32),
        original_label=pred,
        queries_to_success=run.first_success,
    )
    run.trace.noise_history = run.noise.history
    return run.trace, outcome
