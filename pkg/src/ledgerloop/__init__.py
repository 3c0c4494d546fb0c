"""Replayable online decision-making with hash-chained audit ledgers.

Modules:

- ``policy``   pure-function contextual bandit (conjugate Bayesian updates)
- ``ledger``   append-only, hash-chained, canonical event log
- ``runtime``  the deployment loop: scheduling, imputation, fallback, updates
- ``twin``     generative participant environments, trials, tuning
- ``replay``   bit-exact reconstruction and verification of logged behavior
- ``monitor``  fidelity metrics, alert rules, reports
- ``cli``      one command-line entry point over all of it
"""

__version__ = "0.1.0"
