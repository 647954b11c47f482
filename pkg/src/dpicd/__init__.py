"""Desk-scale laboratory for differentially private multi-label medical coding.

Subpackages map one-to-one onto the pipeline: `accounting` (PLD + Renyi
privacy accountants), `clipping` (per-example gradient privatisation),
`model` (label-attention classifier with exact manual gradients), `training`
(AdamW loops, Poisson sampling, evaluation), `data` (preprocessing, splits,
synthetic corpus generation), `fairness` (per-group metrics and gaps), and
`cli` (reproducible experiment driver).
"""

__version__ = "0.1.0"
