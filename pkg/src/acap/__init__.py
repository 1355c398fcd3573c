"""Desk-scale audio captioning: CNN + transformer encoder, transformer decoder,
reconstruction-similarity (RLSSR) regularisation, beam search and caption metrics,
all on a small numpy autodiff engine."""

__version__ = "0.1.0"
