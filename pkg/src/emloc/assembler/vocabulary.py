import warnings

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from ..errors import InsufficientDescriptorsError


def build_vocabulary(descriptors, n_words: int, seed: int = 0, max_iter: int = 50) -> np.ndarray:
    """k-means++ visual vocabulary; returns (n_words, dim) centroids.

    Centroids are kept in raw descriptor space (not renormalized) so that
    exact duplicates of the training descriptors reproduce them exactly.
    """
    X = np.asarray(descriptors, dtype=float)
    if X.ndim != 2 or X.shape[0] < n_words:
        raise InsufficientDescriptorsError(
            f"need at least {n_words} descriptors, got {0 if X.ndim != 2 else X.shape[0]}"
        )
    if n_words < 1:
        raise ValueError("n_words must be >= 1")
    km = KMeans(n_clusters=n_words, init="k-means++", n_init=1, max_iter=max_iter, random_state=seed)
    with warnings.catch_warnings():
        # duplicate points legitimately produce fewer distinct clusters
        warnings.simplefilter("ignore", ConvergenceWarning)
        km.fit(X)
    return np.asarray(km.cluster_centers_, dtype=float)
