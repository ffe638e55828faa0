"""Two attackers and one honest user share an endpoint.

The screener keeps a short memory of edge signatures. Each attacker's queries
keep matching their own recent history, so they land in separate channels,
while the honest user's images match nothing.

    python3 demos/screener_channels.py
"""
import numpy as np

from gwad.lab import AttackConfig, Method, make_synth_dataset, run_attack, train_victim
from gwad.lab.trace import benign_stream
from gwad.numkit import make_rng
from gwad.screener import Screener

data = make_synth_dataset(60, 3072, 10, make_rng(5, "data"))
train, test = data.split(0.5, make_rng(5, "split"))
victim = train_victim(train, 15, make_rng(5, "victim"))
ok = [i for i in range(len(test)) if victim.label_of(test.x[i]) == test.y[i]]

cfg = AttackConfig(query_budget=800, stop_on_success=False)
a, _ = run_attack(Method.HSJA, victim.clone(), test.x[ok[0]], cfg, make_rng(6))
b, _ = run_attack(Method.BA, victim.clone(), test.x[ok[1]], cfg, make_rng(7))
c = benign_stream(test, 800, make_rng(8))

# shuffle the three sources together, keeping each one's own order
who = np.repeat([0, 1, 2], 800)
make_rng(9).shuffle(who)
streams = [iter(a.queries), iter(b.queries), iter(c.queries)]
names = ["HSJA", "BA", "honest"]

sc = Screener(test.shape)
routed = {}
for src in who:
    v = sc.push(next(streams[src]))
    routed.setdefault((names[src], v.channel_id), 0)
    routed[(names[src], v.channel_id)] += 1

print("source  channel  queries")
for (name, cid), n in sorted(routed.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
    print(f"{name:7s} {str(cid):>7s} {n:8d}")
print(f"\n{len(sc.channels())} channels opened; None means the query passed as benign")
