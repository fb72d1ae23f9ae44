"""triggerlab: dynamic black-box backdoor attacks on time-series sensor
classifiers, with baseline trigger schemes, attack metrics, and defenses.

Layers, bottom-up: autodiff (tensor engine), datasets, models, attacks,
metrics, defenses, experiments (config + pipelines), cli.
"""

__version__ = "0.1.0"

from . import attacks, autodiff, checkpoint, datasets, defenses, experiments, metrics, models

__all__ = ["attacks", "autodiff", "checkpoint", "datasets", "defenses",
           "experiments", "metrics", "models", "__version__"]
