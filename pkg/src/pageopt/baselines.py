"""Reference rankers that the recurrent model is compared against."""
from __future__ import annotations

import numpy as np

from .inference import TableScorer
from .trnn import MlpModel, matched_hidden

__all__ = ["MlpModel", "matched_hidden", "PopularityModel"]


class PopularityModel(TableScorer):
    """Smoothed click-through rate per (bucket, module), ``(clicks + 1) / (impressions + 2)``.

    Ranks modules by historical CTR within the page's bucket, ignoring slot
    and every other context feature.
    """

    kind = "popularity"

    def __init__(self, ctr: np.ndarray, family_of: np.ndarray):
        super().__init__(np.asarray(ctr, dtype=np.float64)[..., None], family_of, heads=("click",))

    @classmethod
    def fit(cls, ds, n_modules: int, family_of: np.ndarray, n_buckets: int = None) -> "PopularityModel":
        B = int(ds.bucket.max()) + 1 if n_buckets is None else n_buckets
        K = ds.slates.shape[1]
        flat = (np.repeat(ds.bucket, K) * n_modules + ds.slates.ravel())
        impr = np.bincount(flat, minlength=B * n_modules).astype(np.float64)
        clicks = np.bincount(flat, weights=ds.y_click.ravel().astype(np.float64), minlength=B * n_modules)
        return cls(((clicks + 1.0) / (impr + 2.0)).reshape(B, n_modules), family_of)

    @property
    def ctr(self) -> np.ndarray:
        return self.table[..., 0]

    def teacher_forced_probs(self, x, slates, bucket=None) -> np.ndarray:
        b = np.zeros(len(slates), dtype=np.int64) if bucket is None else np.asarray(bucket)
        return self.table[b[:, None], np.asarray(slates)]
