"""Hierarchy-guided multimodal contrastive learning for taxonomic prediction.

Image, DNA and text encoders are trained with symmetric cross-modal
InfoNCE plus a hierarchical, max-rectified supervised contrastive
regularizer on image embeddings, optionally with a gated image-DNA
fusion head, and evaluated by prompt retrieval under clean and degraded
inputs.
"""

__version__ = "0.1.0"
