"""Self-attention aligner: SAN encoder/decoder, blank-removal alignment loss,
LM fusion and chunk-hopping streaming, on a small numpy autodiff core."""

__version__ = "0.1.0"
