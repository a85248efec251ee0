"""Self-supervised clustering engine.

Trains an encoder with three cooperating supervision signals derived from
its own predictions: a thresholded similarity graph over each minibatch,
confident argmax pseudo-labels, and a triplet mutual-information objective
between deep and shallow features, with a consistency branch on geometrically
transformed inputs. Ships its own small autodiff core, the evaluation
metrics, and training diagnostics.
"""

from .autodiff import Tensor, apply_primitive, gradient_check, no_grad

__all__ = ["Tensor", "apply_primitive", "gradient_check", "no_grad"]

__version__ = "0.1.0"
