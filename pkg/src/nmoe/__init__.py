"""Desk-scale simulator of a networked mixture-of-experts.

A shared feature extractor and gating network plus one personalized
expert per client, trained in three federated stages and evaluated
under a serverless-inference model that accounts for every routed byte.
"""

__version__ = "0.1.0"
