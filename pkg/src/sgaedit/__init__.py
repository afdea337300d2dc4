"""sgaedit: masked token-grid editing with guidance-sparsified attention.

An encoder-decoder transformer fills in user-masked regions of a quantized
token grid. At high resolution its attention is restricted, per layer and
head, to key blocks selected by pooling a low-resolution transformer's
dense attention into block affinities (neighborhood + top-K). The package
also ships the verification harness: oracle-equivalence checks, gradient
checks, synthetic long-range tasks, ablations, and cost benchmarks.
"""

__version__ = "0.1.0"
