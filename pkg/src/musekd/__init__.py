"""Knowledge distillation with mutual- and self-information feature losses.

A small reverse-mode autodiff engine (:mod:`musekd.tensor`) carries CNN
backbones with early-exit heads (:mod:`musekd.nn`), Jensen-Shannon MI
estimators (:mod:`musekd.infoest`) and the training objective
(:mod:`musekd.objective`), driven by :mod:`musekd.training`.
"""

__version__ = "0.1.0"
