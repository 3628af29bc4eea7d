"""Compressible recurrent sequence classifiers with integer-only inference.

The package trains FastRNN and FastGRNN cells (plus a standard-RNN baseline
and a vector-alpha ablation) by backpropagation through time, compresses
them with low-rank factors, iterative hard thresholding, and support-frozen
fine-tuning, exports byte-quantized models, and verifies the gradient
conditioning story behind the residual parameterization.
"""

__version__ = "0.1.0"
