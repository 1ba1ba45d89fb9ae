"""Probe one-sided jets of the kinked value -(|x| + T - t) at its kink.

    python3 demos/kink_superjets.py
"""
import numpy as np

from fbverify import JetCandidate, builtin, superjet_inequality_check, test_subjet, test_superjet

kink = builtin("kink1d")
point = (0.5, np.array([0.0]))

candidates = [JetCandidate(1.0, [q], 0.0) for q in (-1.0, -0.5, 0.0, 0.5, 1.0)]
candidates += [JetCandidate(1.0, [1.0], -0.5), JetCandidate(1.0, [1.2], 0.0)]

print(f"{'p':>5} {'q':>5} {'theta':>6}   superjet  subjet")
for jet in candidates:
    sup = test_superjet(kink.value, point, jet, horizon=kink.horizon)
    sub = test_subjet(kink.value, point, jet, horizon=kink.horizon)
    print(f"{jet.p:5.2f} {jet.q[0]:5.2f} {jet.theta[0, 0]:6.2f}   {str(sup.accepted):8s}  {sub.accepted}")

# Every accepted superjet must satisfy p + min_u H >= 0.
rep = superjet_inequality_check(kink, kink.value, [point], [candidates], require_accepted=True)
print(f"\naccepted jets checked: {len(rep.values)}, skipped: {rep.skipped}, violations: {rep.violations}")
for _, jet, value in rep.values:
    print(f"  q = {jet.q[0]:5.2f}: p + min H = {value:.3f}")
