"""Deconfounded image-text matching at desk scale.

Backdoor-adjusted concept statistics, confounder dictionaries, graph
propagation of debiased knowledge and a deconfounded matching head trained
with a hardest-negative triplet objective.
"""

__version__ = "0.1.0"
