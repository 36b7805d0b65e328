"""treesum: latent sentence-tree induction and a tree-conditioned summarizer."""

__version__ = "0.1.0"
