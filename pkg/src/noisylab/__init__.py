"""Noisy-label multi-task training strategies with statistical evaluation.

Library layout:

- labels: label matrices, class weights, noise profiles, correlation stats
- normalization: dynamic histogram windowing of grayscale images
- losses: weighted BCE, noise/correlation regularizers, auxiliary terms
- metrics: AUC, DeLong test, bootstrap CIs, Dice/IoU
- synth: synthetic correlated-label datasets with known ground truth
- trainer: toy multi-task network, Adam, plateau schedule, checkpoints
- experiment / cli: end-to-end experiment runner and command line
"""

__version__ = "0.1.0"
