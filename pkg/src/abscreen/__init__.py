"""Abstract-screening orchestration engine.

Subpackages cover the full screening workflow: corpus ingestion
(:mod:`abscreen.corpus`), criteria and prompt rendering
(:mod:`abscreen.prompts`), rate-limited batch execution against chat
providers (:mod:`abscreen.engine`), decision parsing and actor-critic
adjudication (:mod:`abscreen.adjudicate`), classification and calibration
metrics (:mod:`abscreen.evaluation`), corpus-comparison statistics
(:mod:`abscreen.diagnostics`), and the CLI / HTTP surfaces
(:mod:`abscreen.cli`, :mod:`abscreen.service`).
"""

__version__ = "0.1.0"
