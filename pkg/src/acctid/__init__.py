"""Account identification on transaction interaction graphs.

Pipeline: raw records -> merged account graph -> TopK subgraphs -> augmented
view pairs -> hierarchical attention encoder trained with subgraph contrast and
classification.
"""

__version__ = "0.1.0"
