"""Descriptor matching: the builtin mutual-nearest-neighbour matcher, the
matcher interface the learned path plugs into, and the projection-window
search used by the classical baseline tracker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frontend import FeatureSet

DEFAULT_RATIO = 0.9
DEFAULT_MIN_CONFIDENCE = 0.2
BASELINE_WINDOW_PX = 15.0


@dataclass
class MatchSet:
    """One-to-one index pairs ``(index_a, index_b)`` with confidences."""

    pairs: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if len(self.pairs) != len(self.confidences):
            raise ValueError("pairs and confidences differ in length")

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros(0))

    def filter(self, min_confidence):
        keep = self.confidences >= min_confidence
        return MatchSet(self.pairs[keep], self.confidences[keep])

    def swapped(self):
        order = np.argsort(self.pairs[:, 1], kind="stable")
        return MatchSet(self.pairs[order][:, ::-1], self.confidences[order])

    def as_dict(self):
        return {int(a): int(b) for a, b in self.pairs}

    def validate(self, n_a, n_b):
        a, b = self.pairs[:, 0], self.pairs[:, 1]
        if len(np.unique(a)) != len(a) or len(np.unique(b)) != len(b):
            raise ValueError("MatchSet is not one-to-one")
        if len(a) and (a.min() < 0 or b.min() < 0 or a.max() >= n_a or b.max() >= n_b):
            raise ValueError("match index out of range")
        return self


def enforce_one_to_one(pairs, confidences):
    """Drop lower-confidence duplicates on either side (ties: earlier pair wins)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(len(conf)), -conf))
    seen_a, seen_b, keep = set(), set(), []
    for i in order:
        a, b = int(pairs[i, 0]), int(pairs[i, 1])
        if a in seen_a or b in seen_b:
            continue
        seen_a.add(a)
        seen_b.add(b)
        keep.append(i)
    keep = np.array(sorted(keep, key=lambda i: (pairs[i, 0], pairs[i, 1])), dtype=int)
    if keep.size == 0:
        return MatchSet.empty()
    return MatchSet(pairs[keep], conf[keep])


def _ratio_ok(sim, axis, ratio):
    """Lowe ratio on descriptor distance along ``axis``; needs a nonzero runner-up."""
    n = sim.shape[axis]
    if n < 2:
        return np.ones(sim.shape[1 - axis], dtype=bool)
    dist = np.sqrt(np.clip(2.0 - 2.0 * sim, 0.0, None))
    part = np.partition(dist, 1, axis=axis)
    d1 = np.take(part, 0, axis=axis)
    d2 = np.take(part, 1, axis=axis)
    return (d2 > 0) & (d1 <= ratio * d2)


def builtin_mutual_nn(fs_a: FeatureSet, fs_b: FeatureSet, ratio=DEFAULT_RATIO,
                      min_similarity=DEFAULT_MIN_CONFIDENCE) -> MatchSet:
    """Mutual nearest neighbours under cosine similarity.

    A pair ``(i, j)`` is kept when ``j`` is the most similar descriptor to
    ``i`` and vice versa (lowest index wins ties), the best/second-best
    descriptor distance ratio is at most ``ratio`` for both ``i``'s row and
    ``j``'s column, and the similarity is at least ``min_similarity``.
    Confidence is the cosine similarity.
    """
    if len(fs_a) == 0 or len(fs_b) == 0:
        return MatchSet.empty()
    sim = fs_a.descriptors @ fs_b.descriptors.T
    nn_ab = np.argmax(sim, axis=1)
    nn_ba = np.argmax(sim, axis=0)
    idx_a = np.arange(len(fs_a))
    mutual = nn_ba[nn_ab] == idx_a
    row_ok = _ratio_ok(sim, 1, ratio)
    col_ok = _ratio_ok(sim, 0, ratio)
    s = sim[idx_a, nn_ab]
    keep = mutual & row_ok & col_ok[nn_ab] & (s >= min_similarity)
    return MatchSet(np.stack([idx_a[keep], nn_ab[keep]], axis=1), s[keep])


def virtual_feature_set(projected_xy, descriptors, image_size):
    """Wrap projected map points as a FeatureSet (scores 1)."""
    xy = np.asarray(projected_xy, dtype=np.float64).reshape(-1, 2)
    return FeatureSet(xy, np.ones(len(xy)), np.asarray(descriptors).reshape(len(xy), -1),
                      image_size)


class Matcher:
    """Interface for feature matchers."""

    name = "matcher"
    min_confidence = DEFAULT_MIN_CONFIDENCE

    def match(self, fs_a: FeatureSet, fs_b: FeatureSet, min_confidence=None) -> MatchSet:
        raise NotImplementedError

    def match_with_prior(self, projected_xy, descriptors, fs_frame: FeatureSet,
                         min_confidence=None) -> MatchSet:
        """Match projected map points (as virtual keypoints) against a frame."""
        if len(projected_xy) == 0 or len(fs_frame) == 0:
            return MatchSet.empty()
        virtual = virtual_feature_set(projected_xy, descriptors, fs_frame.image_size)
        return self.match(virtual, fs_frame, min_confidence)


class BuiltinMatcher(Matcher):
    name = "builtin"

    def __init__(self, ratio=DEFAULT_RATIO, min_confidence=DEFAULT_MIN_CONFIDENCE):
        self.ratio = ratio
        self.min_confidence = min_confidence

    def match(self, fs_a, fs_b, min_confidence=None):
        mc = self.min_confidence if min_confidence is None else min_confidence
        return builtin_mutual_nn(fs_a, fs_b, self.ratio, mc)


def window_match(projected_xy, descriptors, fs_frame: FeatureSet, window=BASELINE_WINDOW_PX,
                 ratio=DEFAULT_RATIO, min_similarity=DEFAULT_MIN_CONFIDENCE) -> MatchSet:
    """Projection-guided search: each projected point only considers frame
    keypoints within ``window`` pixels. Conflicts on the frame side keep the
    most similar pair.
    """
    xy = np.asarray(projected_xy, dtype=np.float64).reshape(-1, 2)
    if len(xy) == 0 or len(fs_frame) == 0:
        return MatchSet.empty()
    desc = np.asarray(descriptors).reshape(len(xy), -1)
    d2 = ((xy[:, None, :] - fs_frame.keypoints[None, :, :]) ** 2).sum(-1)
    inside = d2 <= window * window
    sim = np.where(inside, desc @ fs_frame.descriptors.T, -np.inf)
    pairs, conf = [], []
    for i in range(len(xy)):
        row = sim[i]
        cand = np.nonzero(np.isfinite(row))[0]
        if cand.size == 0:
            continue
        j = cand[np.argmax(row[cand])]
        if row[j] < min_similarity:
            continue
        if cand.size > 1:
            dist = np.sqrt(np.clip(2 - 2 * row[cand], 0, None))
            dd = np.sort(dist)
            if not (dd[1] > 0 and dd[0] <= ratio * dd[1]):
                continue
        pairs.append((i, j))
        conf.append(row[j])
    return enforce_one_to_one(pairs, conf)
