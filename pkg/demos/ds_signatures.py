"""Every attack leaves a fingerprint in the angles between its query updates.

Runs the six reference attacks against one victim and prints the median delta
similarity next to the share of queries spent in each phase. Benign traffic
is shown at the bottom for contrast.

    python3 demos/ds_signatures.py
"""
import numpy as np

from gwad.lab import AttackConfig, Method, consumption_profile, make_synth_dataset, run_attack, train_victim
from gwad.lab.trace import benign_stream
from gwad.monitor import ds_series
from gwad.numkit import make_rng

data = make_synth_dataset(60, 3072, 10, make_rng(1, "data"))
train, test = data.split(0.5, make_rng(1, "split"))
victim = train_victim(train, 15, make_rng(1, "victim"))
print(f"victim test accuracy: {victim.accuracy(test):.3f}\n")

src = next(i for i in range(len(test)) if victim.label_of(test.x[i]) == test.y[i])
cfg = AttackConfig(query_budget=2000, stop_on_success=False)

print(f"{'attack':9s} {'median DS':>10s} {'ASR':>4s}  profile")
for m in Method:
    trace, out = run_attack(m, victim.clone(), test.x[src], cfg, make_rng(2, m.value))
    ds, _ = ds_series(trace.queries)
    prof = ", ".join(f"{k} {v:.2f}" for k, v in consumption_profile(trace).items())
    print(f"{m.value:9s} {np.median(ds):10.4f} {int(out.success):4d}  {prof}")

ds, _ = ds_series(benign_stream(test, 2000, make_rng(3)).queries)
print(f"{'benign':9s} {np.median(ds):10.4f}       spread sd {ds.std():.3f}")
print("\nNES sits near -1/sqrt(2), HSJA's probes near -1/2, SimBA only at 0 or -1.")
