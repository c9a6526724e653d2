"""Knowledge-guided scene generation with a tree-structured VAE.

Modules: ``autodiff`` (reverse-mode gradients), ``tvae`` (tree VAE),
``knowledge`` (rules, knowledge loss, projection), ``optim`` (latent search),
``synthetic`` and ``traffic`` (scene domains), ``lidar`` (raycasting),
``victim`` (segmenters and point attack), ``experiments``, ``plotting``, ``cli``.
"""

__version__ = "0.1.0"
