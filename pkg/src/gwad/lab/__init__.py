"""Victim model, synthetic data and reference attacks for exercising the detector."""
from .attacks import AttackOutcome, PreconditionError, perturbation_ratio, run_attack
from .config import AttackConfig, Method, adapt_vary_mean, adapt_vary_variance
from .data import Dataset, make_synth_dataset
from .trace import Phase, QueryTrace, consumption_profile, inject_benign
from .victim import Mode, VictimModel, oracle_query, train_victim
