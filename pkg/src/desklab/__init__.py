"""Desk-scale decoder-transformer training lab.

Implements a deterministic tensor/autodiff core, a GQA+RoPE+SwiGLU decoder
with tied embeddings, maximal-update parameterization, a five-phase
warmup-stable-decay curriculum with a mid-run AdamW->Muon optimizer switch,
and software-emulated FP8 (E4M3/E5M2) delayed scaling.
"""

__version__ = "0.1.0"
