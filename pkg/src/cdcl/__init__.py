"""Cross-domain collaborative learning at desk scale.

A small, dependency-light stack for supervised domain adaptation between a
large labeled source image domain and a small labeled target domain:
fixed-ratio mixup, a CNN backbone with a scale-bias-correction attention
head, adaptive feature fusion, and the full train/evaluate/ablate/sweep
protocol on a synthetic two-domain benchmark.
"""

from cdcl.tensor import Tensor, GradReport, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "GradReport", "grad_check", "no_grad", "__version__"]
