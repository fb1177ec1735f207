"""Run the independent numerical oracles against the kernel.

Every quantity the library computes in closed form is re-derived here by a
method that shares no code with the implementation: gradients by central
finite differences, the factor by a dense reference Cholesky, the log
determinant by LU, the KL divergence by Monte Carlo with exact log-densities.
The same suites back the `corrbnn verify` subcommand and the acceptance
tests.
"""

from corrbnn import verify

for name, suite in verify.SUITES.items():
    rows = suite(seed=0)
    passed = sum(1 for _, ok, _ in rows if ok)
    print(f"{name}: {passed}/{len(rows)} checks passed")
    for check, ok, detail in rows[:3]:
        print(f"  e.g. {check}: {'ok' if ok else 'FAILED'}  {detail}")
    if passed != len(rows):
        for check, ok, detail in rows:
            if not ok:
                print(f"  FAILED {check}: {detail}")
