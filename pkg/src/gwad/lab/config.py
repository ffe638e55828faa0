"""Attack configuration table.

All desk-scale defaults live here. Values taken from the published attack
settings: NES n=50, sigma=0.1, eta=0.55 (CIFAR-10); HSJA 100 initial queries,
binary-search threshold 0.01/sqrt(d); SimBA epsilon 0.03; Sign-OPT gradient
smoothing 0.001 with line-search factors 2 and 0.25; Sign-Flip projection step
0.0004 (rate 1.5) and flip-probability step 0.001; Boundary Attack steps 0.01
adapted by 1.5 every 10 iterations. The rest are desk-scale choices.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass


class Method(str, enum.Enum):
    NES = "NES"
    HSJA = "HSJA"
    SIMBA = "SimBA"
    SIGN_OPT = "SignOpt"
    SIGN_FLIP = "SignFlip"
    BA = "BA"

    @property
    def class_id(self) -> int:
        return list(Method).index(self) + 1


@dataclass(frozen=True)
class AttackConfig:
    method: Method = Method.NES
    query_budget: int = 5000
    rho_max: float = 0.1
    stop_on_success: bool = True

    nes_samples: int = 50          # antithetic pairs per gradient estimate
    nes_sigma: float = 0.1
    nes_lr: float = 0.55

    hsja_theta: float | None = None   # None -> 0.01 / sqrt(d)
    hsja_init_queries: int = 100
    hsja_init_evals: int = 100
    hsja_max_evals: int = 10000

    simba_epsilon: float = 0.03

    signopt_k: int = 200
    signopt_beta: float = 0.001
    signopt_alpha: float = 0.2
    signopt_ls_grow: float = 2.0
    signopt_ls_shrink: float = 0.25
    signopt_init_directions: int = 10
    signopt_min_alpha: float = 1e-4    # reset threshold on the line-search step
    signopt_min_beta: float = 1e-8     # stop once smoothing shrinks below this

    signflip_alpha_init: float = 0.0004
    signflip_alpha_rate: float = 1.5
    signflip_p_step: float = 0.001

    ba_step_init: float = 0.01
    ba_lr: float = 1.5
    ba_adapt_every: int = 10

    # moving-target adaptations, off by default
    alpha_max: float | None = None
    alpha_min: float = 0.0
    r_mu: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.query_budget <= 0:
            raise ValueError("query_budget must be positive")
        if self.rho_max < 0:
            raise ValueError("rho_max must be >= 0")
        steps = [self.nes_sigma, self.nes_lr, self.simba_epsilon, self.signopt_beta,
                 self.signopt_alpha, self.signflip_alpha_init, self.signflip_p_step,
                 self.ba_step_init]
        if any(s <= 0 for s in steps):
            raise ValueError("step sizes must be positive")
        if self.hsja_theta is not None and self.hsja_theta <= 0:
            raise ValueError("hsja_theta must be positive")
        if self.alpha_max is not None and not 0 <= self.alpha_min <= self.alpha_max:
            raise ValueError("need 0 <= alpha_min <= alpha_max")
        if self.r_mu is not None and not 0 <= self.r_mu <= 1:
            raise ValueError("r_mu must be in [0, 1]")

    def replace(self, **kw) -> "AttackConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["method"] = self.method.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**data)


def adapt_vary_variance(cfg: AttackConfig, alpha_max: float) -> AttackConfig:
    """Scale every gradient-estimation batch's noise by alpha ~ U(0, alpha_max)."""
    if alpha_max <= 0:
        raise ValueError("alpha_max must be positive")
    return cfg.replace(alpha_max=float(alpha_max), alpha_min=0.0)


def adapt_vary_mean(cfg: AttackConfig, r_mu: float) -> AttackConfig:
    """Shift every batch's noise mean by mu ~ U(-r_mu*s, r_mu*s), s = max(x) - min(x)."""
    if not 0 <= r_mu <= 1:
        raise ValueError("r_mu must be in [0, 1]")
    return cfg.replace(r_mu=float(r_mu))
