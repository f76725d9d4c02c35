"""Uncertainty-aware inference on Gaussian embeddings.

Zero-shot classification against prompt ensembles, uncertainty-based prompt
filtering, inclusion-based root discovery and root-to-caption traversal,
plus the hierarchy metrics computed from them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .gauss import GaussianEmbedding, csd, mix_prompts, total_uncertainty
from .losses import hypothesis_arrays, inclusion_hypothesis

DEFAULT_STEPS = 50


@dataclass(frozen=True, eq=False)
class ClassPromptSet:
    class_id: Any
    prompts: tuple
    mixed: GaussianEmbedding

    @classmethod
    def from_prompts(cls, class_id, prompts: Sequence[GaussianEmbedding], *,
                     renormalize=False) -> "ClassPromptSet":
        prompts = tuple(prompts)
        return cls(class_id, prompts, mix_prompts(prompts, renormalize=renormalize,
                                                  id=class_id))


def zsc_classify(image: GaussianEmbedding, classes: Sequence[ClassPromptSet]):
    """Nearest class ensemble by CSD. Returns ``(class_id, scores)``.

    Ties go to the lowest class index.
    """
    if len(classes) == 0:
        raise InvalidArgumentError("no classes to classify against")
    scores = np.array([csd(image, c.mixed) for c in classes])
    return classes[int(np.argmin(scores))].class_id, scores


def filter_prompts(prompts: Sequence[GaussianEmbedding], strategy: str = "sigma_stats",
                   k: int | None = None, n_std: float = 1.0) -> list:
    """Drop uncertain prompts.

    ``sigma_stats`` removes prompts whose total uncertainty exceeds
    mean + n_std * std of the set; ``top_k`` keeps the k least uncertain.
    Input order is preserved and the result is never empty.
    """
    if len(prompts) == 0:
        raise InvalidArgumentError("no prompts to filter")
    tu = np.array([total_uncertainty(p) for p in prompts])
    if strategy == "sigma_stats":
        keep = tu <= tu.mean() + n_std * tu.std()
    elif strategy == "top_k":
        if k is None or not 1 <= k <= len(prompts):
            raise InvalidArgumentError(f"top_k needs 1 <= k <= {len(prompts)}, got {k}")
        keep = np.zeros(len(prompts), dtype=bool)
        keep[np.argsort(tu, kind="stable")[:k]] = True
    else:
        raise InvalidArgumentError(f"unknown filter strategy {strategy!r}")
    if not keep.any():
        keep[int(np.argmin(tu))] = True
    return [p for p, kp in zip(prompts, keep) if kp]


def _inclusion_scores(image, pool, eps_inc):
    mu = np.stack([c.mu for c in pool])
    lv = np.stack([c.log_var for c in pool])
    im = np.broadcast_to(image.mu, mu.shape)
    il = np.broadcast_to(image.log_var, lv.shape)
    return hypothesis_arrays(im, il, mu, lv, eps_inc)


def find_root(image: GaussianEmbedding, caption_pool: Sequence[GaussianEmbedding],
              eps_inc: float = 1.0) -> int:
    """Index of the caption that most includes the image (lowest index on ties)."""
    if len(caption_pool) == 0:
        raise InvalidArgumentError("caption pool is empty")
    return int(np.argmax(_inclusion_scores(image, caption_pool, eps_inc)))


def blend_root(root: GaussianEmbedding, null_text: GaussianEmbedding) -> GaussianEmbedding:
    return mix_prompts([root, null_text])


def interpolate(start: GaussianEmbedding, end: GaussianEmbedding, t: float) -> GaussianEmbedding:
    """Linear in the mean (then L2-normalized) and linear in log-variance."""
    if start.dim != end.dim:
        raise InvalidArgumentError("dimension mismatch")
    mu = (1.0 - t) * start.mu + t * end.mu
    lv = (1.0 - t) * start.log_var + t * end.log_var
    return GaussianEmbedding.normalized_from(mu, lv)


def nearest_by_csd(z: GaussianEmbedding, pool_mu, pool_var) -> int:
    d = np.sum((pool_mu - z.mu) ** 2, axis=1) + pool_var.sum(axis=1) + np.sum(z.var)
    return int(np.argmin(d))


@dataclass
class TraversalPath:
    image_id: Any
    steps: list                                  # [(t, caption id)]
    unique_captions: list
    root_id: Any = None                          # estimated root caption, None for null roots
    target_id: Any = None

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "root_id": self.root_id,
                "target_id": self.target_id,
                "steps": [{"t": t, "caption_id": c} for t, c in self.steps],
                "unique_captions": list(self.unique_captions)}


def _caption_id(pool, i):
    return pool[i].id if pool[i].id is not None else i


def traverse(image: GaussianEmbedding, caption_pool: Sequence[GaussianEmbedding],
             null_text: GaussianEmbedding, steps: int = DEFAULT_STEPS,
             eps_inc: float = 1.0, root: str = "inclusion") -> TraversalPath:
    """Walk from a root embedding to the image's nearest caption.

    ``root='inclusion'`` starts at the average of the null text and the
    caption that most includes the image; ``root='null'`` starts at the null
    text itself. At each of ``steps`` equally spaced points the nearest pool
    caption by CSD is retrieved. Duplicates are kept in ``steps`` and
    removed in ``unique_captions``.
    """
    if steps < 2:
        raise InvalidArgumentError("steps must be >= 2")
    if len(caption_pool) == 0:
        raise InvalidArgumentError("caption pool is empty")
    pool_mu = np.stack([c.mu for c in caption_pool])
    pool_var = np.stack([c.var for c in caption_pool])
    target = nearest_by_csd(image, pool_mu, pool_var)
    end = caption_pool[target]
    if root == "inclusion":
        r = find_root(image, caption_pool, eps_inc)
        start = blend_root(caption_pool[r], null_text)
        root_id = _caption_id(caption_pool, r)
    elif root == "null":
        start = null_text
        root_id = None
    else:
        raise InvalidArgumentError(f"unknown root mode {root!r}")
    path, unique = [], []
    for t in np.linspace(0.0, 1.0, steps):
        if t == 1.0:
            # the endpoint is the target caption itself
            hit = target
        else:
            hit = nearest_by_csd(interpolate(start, end, t), pool_mu, pool_var)
        cid = _caption_id(caption_pool, hit)
        path.append((float(t), cid))
        if cid not in unique:
            unique.append(cid)
    return TraversalPath(image.id, path, unique, root_id, _caption_id(caption_pool, target))


@dataclass
class HierarchyInclusion:
    fraction: float
    h_values: np.ndarray = field(repr=False)


def eval_hierarchy_inclusion(pairs: Sequence[tuple], eps_inc: float = 1.0) -> HierarchyInclusion:
    """Fraction of (specific, general) pairs with H(specific in general) > 0."""
    if len(pairs) == 0:
        raise InvalidArgumentError("no pairs to evaluate")
    specific = [p[0] for p in pairs]
    gen = [p[1] for p in pairs]
    h = hypothesis_arrays(np.stack([z.mu for z in specific]), np.stack([z.log_var for z in specific]),
                          np.stack([z.mu for z in gen]), np.stack([z.log_var for z in gen]),
                          eps_inc)
    return HierarchyInclusion(float(np.mean(h > 0)), h)


def recount_hierarchy_inclusion(pairs, eps_inc=1.0) -> float:
    """Pair-by-pair recount through the scalar API (independent of the batched path)."""
    return sum(inclusion_hypothesis(s, g, eps_inc) > 0 for s, g in pairs) / len(pairs)


@dataclass(frozen=True)
class TraversalMetrics:
    precision: float
    recall: float
    root_recall: float


def traversal_metrics(paths: Sequence[TraversalPath],
                      ground_truth: Mapping[Any, Sequence]) -> TraversalMetrics:
    """Macro-averaged precision / recall of traversed captions against ground truth.

    ``ground_truth[image_id]`` lists the caption ids from most general to
    most specific; ``root_recall`` counts paths whose estimated root is the
    first of them.
    """
    if len(paths) == 0:
        raise InvalidArgumentError("no paths to score")
    prec, rec, root = [], [], []
    for p in paths:
        if p.image_id not in ground_truth:
            raise InvalidArgumentError(f"no ground truth for image {p.image_id!r}")
        gt = list(ground_truth[p.image_id])
        found = set(p.unique_captions)
        hits = sum(c in found for c in gt)
        rec.append(hits / len(gt))
        prec.append(sum(c in set(gt) for c in p.unique_captions) / len(p.unique_captions))
        root.append(p.root_id is not None and p.root_id == gt[0])
    return TraversalMetrics(float(np.mean(prec)), float(np.mean(rec)), float(np.mean(root)))
