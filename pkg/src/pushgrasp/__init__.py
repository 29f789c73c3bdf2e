"""Push-to-edge then grasp: a desk-scale tabletop simulator, VAE encoder and PPO trainer."""

__version__ = "0.1.0"
