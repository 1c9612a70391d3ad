"""Text-to-code language model toolkit.

Pipeline: extract docstring/code pairs from Python source trees, train a
subword vocabulary with protected control symbols, tokenize and pack
instances, train a small decoder-only transformer with modality-separated
embedding spaces and one of four training objectives, decode with nucleus
sampling, and score generations with pass@k / incremental pass@k.
"""

__version__ = "0.1.0"
