"""weightmorph: continuous weight manifolds for small classifiers.

Train a coordinate MLP to reproduce a pretrained network's weights as a
smooth function of (layer, input channel, output channel) position, then
sample functional weights for shrunken, widened, or deepened variants of
the network without retraining it.
"""

__version__ = "0.1.0"
