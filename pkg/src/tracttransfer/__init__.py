"""Few-shot transfer of segmentation heads between tract label sets.

Library layout: ``autodiff`` (reverse-mode engine), ``model`` (backbone and
per-tract heads), ``synthdata`` (seeded synthetic cohorts), ``train`` (Adamax
loop with best-epoch selection), ``transfer`` (logit regression, composed head
initialization, warmup fine-tuning, strategy runner), ``metrics`` (Dice, RVD,
paired statistics), ``checkpoint`` (TTRX container), ``cli`` (experiment
runner).
"""

__version__ = "0.1.0"
