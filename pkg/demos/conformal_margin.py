"""Conformal margins: how far to shift a learned value before trusting it.

The learned value can call a state safe when rolling out its own policy
collides. Calibrating the realised-vs-predicted gap on random rollouts
gives a margin delta; the shifted set {V > delta} holds with probability
at least 1 - epsilon. Uses the cached desk-scale network when present.
"""
import sys
from pathlib import Path

import numpy as np
import torch

from rbn.conformal import calibrate, collect, safe_volume_fraction
from rbn.metrics import classify_rollouts
from rbn.providers import NetProvider

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
import artifacts  # noqa: E402

torch.set_num_threads(1)
net = artifacts.dubins_net()  # trains once (~30 min) if not cached
prov = NetProvider(net, clamp=True)
rng = np.random.default_rng(0)

gamma = 0.5
cal = collect(prov, gamma, 2000, rng, horizon=1.0)
print(f"{len(cal)} calibration rollouts at gamma={gamma}")
print(f"  score quantiles 50/90/99%: {np.quantile(cal.scores, [0.5, 0.9, 0.99]).round(4)}")

vol_x = net.system.sample_states(50_000, rng)
for eps in (0.1, 0.05, 0.01):
    d = calibrate(cal, eps)
    vol = safe_volume_fraction(prov, gamma, d, rng, samples=vol_x, tau=1.0)
    print(f"  eps={eps:<5} delta={d:.4f}  shifted safe volume {vol:.3f}")

# The shift trades false positives (unsafe states labelled safe) for false negatives.
x0 = net.system.sample_states(300, rng)
delta = calibrate(cal, 0.01)
for name, d in (("unshifted", 0.0), ("shifted", delta)):
    r = classify_rollouts(prov, x0, gamma, delta=d, horizon=1.0)
    print(f"  {name:9s}  FPR {r.fpr:.3f}  FNR {r.fnr:.3f}  correct {r.cc:.3f}")
