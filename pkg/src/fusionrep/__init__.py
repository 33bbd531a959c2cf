"""Desk-scale multimodal contrastive representation learning.

Modules, input to output: ``tensor`` (autodiff), ``nn`` / ``encoders`` /
``fusion`` / ``model`` (networks and checkpoints), ``objectives`` (losses),
``graph`` (pin-board walks and pair sampling), ``data`` (corpus and batches),
``trainer`` (Lion, schedule, runs), ``serving`` (prefix export, int8 stores,
search), ``evaluation`` (Recall@K), ``config`` and ``cli``.
"""

__version__ = "0.1.0"
