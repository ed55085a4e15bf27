"""Fault-injection switches for the self-test of the check harness.

The check runner flips these to prove a broken pipeline actually fails the
corresponding suite. Production code paths only ever read the set.
"""

KNOWN = frozenset({"ray-scatter"})

FLAGS: set[str] = set()
