"""Multi-domain neural machine translation through word-level knowledge distillation.

Domain-specialised teachers are finetuned from a generic model with
cross-entropy-difference data selection; a single student then learns from
the ground truth mixed with the teachers' stored top-K distributions.
"""

__version__ = "0.1.0"
