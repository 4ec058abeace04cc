"""Single-avalanche organized criticality on the directed b-ary tree."""
