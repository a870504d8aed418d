"""Topic-aware dialogue segmentation and dual-attention response matching.

Subpackages follow the pipeline: ``corpus`` (data model and IO),
``encoders`` (text-to-vector), ``segmenter`` (unsupervised topic
segmentation plus the TextTiling baseline), ``seg_metrics`` and
``retrieval_metrics`` (evaluation), ``numerics`` (dense tensor ops with
hand-derived backward passes), ``matcher`` (the dual-attention matching
head), and ``cli`` (the ``tseg`` command).
"""

__version__ = "0.1.0"
