"""Synthetic many-to-many corpora and a free-parameter embedding trainer.

Images and texts are sets of latent attributes; a text matches an image
when its attributes are a subset of the image's. Masked variants keep a
random quarter of an item's attributes. Instead of encoders, every item
owns a raw mean vector and a log-variance vector that plain gradient
descent fits to the composite objective.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, NumericError
from .gauss import LOG_VAR_FLOOR, GaussianEmbedding, LossParams, csd
from .losses import TERMS, PairBatch, hypothesis_arrays, objective_value_and_grad
from .seeding import rng

log = logging.getLogger(__name__)

MIN_DENSITY = 0.02
MAX_DENSITY = 0.5
MAX_ATTEMPTS = 100
MIN_A = 1e-3


@dataclass(frozen=True)
class MaskedLink:
    original_id: str
    masked_id: str
    modality: str


@dataclass(eq=False)
class SyntheticCorpus:
    image_ids: list
    text_ids: list
    image_attrs: np.ndarray          # (n_images, n_attributes) bool
    text_attrs: np.ndarray           # (n_texts, n_attributes) bool
    match: np.ndarray                # (n_images, n_texts) bool
    masked_links: list               # list[MaskedLink]
    masked_attrs: dict               # masked_id -> bool vector
    image_labels: np.ndarray | None = None
    seed: int | None = None

    @property
    def n_attributes(self) -> int:
        return self.image_attrs.shape[1]

    def attrs_of(self, item_id) -> np.ndarray:
        if item_id in self.masked_attrs:
            return self.masked_attrs[item_id]
        if item_id in self._image_pos:
            return self.image_attrs[self._image_pos[item_id]]
        return self.text_attrs[self._text_pos[item_id]]

    def __post_init__(self):
        self._image_pos = {k: i for i, k in enumerate(self.image_ids)}
        self._text_pos = {k: i for i, k in enumerate(self.text_ids)}

    def to_dict(self) -> dict:
        def sets(m):
            return [np.flatnonzero(row).tolist() for row in m]
        return {
            "n_attributes": self.n_attributes,
            "seed": self.seed,
            "images": [{"id": i, "attributes": a} for i, a in zip(self.image_ids, sets(self.image_attrs))],
            "texts": [{"id": i, "attributes": a} for i, a in zip(self.text_ids, sets(self.text_attrs))],
            "masked": [{"original_id": l.original_id, "masked_id": l.masked_id,
                        "modality": l.modality,
                        "attributes": np.flatnonzero(self.masked_attrs[l.masked_id]).tolist()}
                       for l in self.masked_links],
            "image_labels": None if self.image_labels is None else self.image_labels.tolist(),
        }


def containment_match(image_attrs, text_attrs) -> np.ndarray:
    """match[i, j] is True iff text j's attributes are a subset of image i's."""
    image_attrs = np.asarray(image_attrs, dtype=bool)
    text_attrs = np.asarray(text_attrs, dtype=bool)
    # text attribute not in image -> mismatch
    missing = text_attrs[None, :, :] & ~image_attrs[:, None, :]
    return ~missing.any(axis=2)


def _is_many_to_many(match):
    return bool((match.sum(axis=0) >= 2).any() and (match.sum(axis=1) >= 2).any())


def _mask(gen, attrs, mask_ratio):
    on = np.flatnonzero(attrs)
    keep = int(np.floor(on.size * (1.0 - mask_ratio)))
    keep = min(keep, on.size - 1)
    out = np.zeros_like(attrs)
    out[gen.choice(on, size=keep, replace=False)] = True
    return out


def generate_corpus(n_images: int, n_texts: int, n_attributes: int, seed: int, *,
                    mask_pair_fraction: float = 0.125, mask_ratio: float = 0.75,
                    n_classes: int = 0, attr_prob: float = 0.4,
                    keep_prob: float = 0.5) -> SyntheticCorpus:
    """Build a deterministic many-to-many corpus.

    With ``n_classes > 0`` the first ``n_classes`` attributes are mutually
    exclusive class attributes; every image carries exactly one, recorded in
    ``image_labels``.
    """
    if n_attributes < 4:
        raise InvalidArgumentError("n_attributes must be >= 4")
    if n_images < 2 or n_texts < 2:
        raise InvalidArgumentError("need at least 2 images and 2 texts")
    if not (0 < mask_pair_fraction <= 1 and 0 < mask_ratio <= 1):
        raise InvalidArgumentError("mask fractions must lie in (0, 1]")
    if n_classes < 0 or n_classes > n_attributes - 2:
        raise InvalidArgumentError("n_classes must leave at least 2 free attributes")
    gen = rng(seed)
    for _ in range(MAX_ATTEMPTS):
        images = gen.random((n_images, n_attributes)) < attr_prob
        labels = None
        if n_classes:
            labels = gen.integers(0, n_classes, n_images)
            images[:, :n_classes] = False
            images[np.arange(n_images), labels] = True
        # every image needs >= 2 attributes so a text can be a strict subset
        for i in np.flatnonzero(images.sum(axis=1) < 2):
            free = np.flatnonzero(~images[i, n_classes:]) + n_classes
            images[i, gen.choice(free, size=2 - images[i].sum(), replace=False)] = True
        texts = np.zeros((n_texts, n_attributes), dtype=bool)
        sources = gen.integers(0, n_images, n_texts)
        for j, src in enumerate(sources):
            on = np.flatnonzero(images[src])
            keep = on[gen.random(on.size) < keep_prob]
            if keep.size == 0:
                keep = gen.choice(on, size=1)
            if keep.size == on.size:
                keep = np.delete(keep, gen.integers(keep.size))
            texts[j, keep] = True
        match = containment_match(images, texts)
        if MIN_DENSITY <= match.mean() <= MAX_DENSITY and _is_many_to_many(match):
            break
    else:
        raise InvalidArgumentError(
            f"could not reach match density in [{MIN_DENSITY}, {MAX_DENSITY}] "
            f"after {MAX_ATTEMPTS} attempts")

    image_ids = [f"img{i:04d}" for i in range(n_images)]
    text_ids = [f"txt{j:04d}" for j in range(n_texts)]
    links, masked_attrs = [], {}
    for modality, ids, attrs in (("image", image_ids, images), ("text", text_ids, texts)):
        eligible = np.flatnonzero(attrs.sum(axis=1) >= 1)
        count = min(eligible.size, max(1, int(round(mask_pair_fraction * len(ids)))))
        for i in np.sort(gen.choice(eligible, size=count, replace=False)):
            mid = f"{ids[i]}_m"
            masked_attrs[mid] = _mask(gen, attrs[i], mask_ratio)
            links.append(MaskedLink(ids[i], mid, modality))
    return SyntheticCorpus(image_ids, text_ids, images, texts, match, links,
                           masked_attrs, labels, seed)


@dataclass(frozen=True)
class TrainerConfig:
    dim: int = 16
    lr: float = 1e-2
    steps: int = 2000
    batch_size: int | None = None
    mask_pair_fraction: float = 0.125
    mask_ratio: float = 0.75
    init_log_var: float = -10.0
    init_a: float = 10.0
    init_b: float = -10.0
    loss: LossParams = field(default_factory=LossParams)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidArgumentError("steps must be >= 0")
        if self.dim < 1:
            raise InvalidArgumentError("dim must be >= 1")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be positive")
        for name in ("mask_pair_fraction", "mask_ratio"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise InvalidArgumentError(f"{name} must lie in (0, 1]")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"] = dataclasses.asdict(self.loss)
        return d


@dataclass(eq=False)
class EmbeddingTable:
    """Per-item raw means and log-variances plus the contrastive scalars."""

    ids: list
    modalities: list
    raw_mu: np.ndarray
    log_var: np.ndarray
    a: float
    b: float

    def __post_init__(self):
        self._pos = {k: i for i, k in enumerate(self.ids)}

    def index(self, item_id) -> int:
        return self._pos[item_id]

    @property
    def mu(self) -> np.ndarray:
        return self.raw_mu / np.linalg.norm(self.raw_mu, axis=1, keepdims=True)

    def embedding(self, item_id) -> GaussianEmbedding:
        i = self._pos[item_id]
        return GaussianEmbedding.normalized_from(self.raw_mu[i], self.log_var[i], id=item_id,
                                                 modality=self.modalities[i])

    def embeddings(self, modality=None) -> list:
        return [self.embedding(k) for k, m in zip(self.ids, self.modalities)
                if modality is None or m == modality]

    def indices(self, modality) -> np.ndarray:
        return np.array([i for i, m in enumerate(self.modalities) if m == modality], dtype=np.intp)


@dataclass
class TrainResult:
    table: EmbeddingTable
    trace: list = field(default_factory=list)   # dicts: step, total, ppcl, inc_vt, inc_mask, vib

    TRACE_COLUMNS = ("step", "total") + TERMS


def init_table(corpus: SyntheticCorpus, cfg: TrainerConfig) -> EmbeddingTable:
    masked_img = [l.masked_id for l in corpus.masked_links if l.modality == "image"]
    masked_txt = [l.masked_id for l in corpus.masked_links if l.modality == "text"]
    ids = list(corpus.image_ids) + list(corpus.text_ids) + masked_img + masked_txt
    modalities = (["image"] * len(corpus.image_ids) + ["text"] * len(corpus.text_ids)
                  + ["image_masked"] * len(masked_img) + ["text_masked"] * len(masked_txt))
    gen = rng(cfg.seed, 1)
    raw_mu = gen.standard_normal((len(ids), cfg.dim))
    log_var = np.full((len(ids), cfg.dim), float(cfg.init_log_var))
    return EmbeddingTable(ids, modalities, raw_mu, log_var, float(cfg.init_a), float(cfg.init_b))


def _batches(corpus, cfg, step_gen):
    """Yield (image rows, text rows) for one step."""
    ni, nt = len(corpus.image_ids), len(corpus.text_ids)
    if cfg.batch_size is None or cfg.batch_size >= max(ni, nt):
        return np.arange(ni), np.arange(nt)
    return (np.sort(step_gen.choice(ni, cfg.batch_size, replace=False)),
            np.sort(step_gen.choice(nt, cfg.batch_size, replace=False)))


def make_batch(corpus: SyntheticCorpus, table: EmbeddingTable, img_rows=None,
               txt_rows=None) -> PairBatch:
    ni = len(corpus.image_ids)
    img_rows = np.arange(ni) if img_rows is None else np.asarray(img_rows)
    txt_rows = np.arange(len(corpus.text_ids)) if txt_rows is None else np.asarray(txt_rows)
    image_idx = img_rows
    text_idx = ni + txt_rows
    labels = np.where(corpus.match[np.ix_(img_rows, txt_rows)], 1, -1)
    in_batch = set(table.ids[i] for i in image_idx) | set(table.ids[i] for i in text_idx)
    links = [(table.index(l.original_id), table.index(l.masked_id))
             for l in corpus.masked_links if l.original_id in in_batch]
    links = np.array(links, dtype=np.intp).reshape(-1, 2)
    # indices stay global; the VIB term therefore covers the whole table
    return PairBatch(table.raw_mu, table.log_var, image_idx, text_idx, labels, links)


def train(corpus: SyntheticCorpus, cfg: TrainerConfig) -> TrainResult:
    """Plain gradient descent on the composite objective.

    Each logged step records the loss of the parameters *before* that
    step's update; a final row with ``step == cfg.steps`` records the
    returned state.
    """
    table = init_table(corpus, cfg)
    result = TrainResult(table)
    step_gen = rng(cfg.seed, 2)
    prev = None
    for step in range(cfg.steps + 1):
        img_rows, txt_rows = _batches(corpus, cfg, step_gen)
        batch = make_batch(corpus, table, img_rows, txt_rows)
        params = dataclasses.replace(cfg.loss, a=table.a, b=table.b)
        last = step == cfg.steps
        # non-finite values are reported below as NumericError
        with np.errstate(over="ignore", invalid="ignore"):
            total, parts, grad = objective_value_and_grad(batch, params, need_grad=not last)
        if not np.isfinite(total):
            bad = next((k for k, v in parts.items() if not np.isfinite(v)), "total")
            raise NumericError(f"non-finite loss at step {step} (term {bad})", index=step)
        result.trace.append({"step": step, "total": total, **parts})
        if prev is not None and total > prev * 1.05 + 1e-12:
            log.warning("loss rose from %.6g to %.6g at step %d", prev, total, step)
        prev = total
        if last:
            break
        table.raw_mu -= cfg.lr * grad.raw_mu
        table.log_var -= cfg.lr * grad.log_var
        np.maximum(table.log_var, LOG_VAR_FLOOR, out=table.log_var)
        table.a = max(table.a - cfg.lr * grad.a, MIN_A)
        table.b = table.b - cfg.lr * grad.b
        if not (np.all(np.isfinite(table.raw_mu)) and np.all(np.isfinite(table.log_var))):
            raise NumericError(f"non-finite parameters after step {step}", index=step)
    return result


def masked_inclusion_fraction(corpus, table, eps_inc) -> float:
    """Share of masked links with H(original in masked) > 0."""
    if not corpus.masked_links:
        return float("nan")
    mu, lv = table.mu, table.log_var
    o = np.array([table.index(l.original_id) for l in corpus.masked_links])
    m = np.array([table.index(l.masked_id) for l in corpus.masked_links])
    h = hypothesis_arrays(mu[o], lv[o], mu[m], lv[m], eps_inc)
    return float(np.mean(h > 0))


def retrieval_accuracy(corpus, table) -> float:
    """Top-1 image->text retrieval by CSD, counted as a hit if the text matches."""
    img = [table.embedding(i) for i in corpus.image_ids]
    txt = [table.embedding(t) for t in corpus.text_ids]
    hits = 0
    for i, zi in enumerate(img):
        d = [csd(zi, zt) for zt in txt]
        hits += bool(corpus.match[i, int(np.argmin(d))])
    return hits / len(img)


def mean_variance(table, modality) -> float:
    return float(np.mean(np.exp(table.log_var[table.indices(modality)])))


ABLATION_COLUMNS = ("name", "alpha1", "alpha2", "beta", "final_loss", "mean_var_image",
                    "mean_var_text", "var_ratio_text_image", "masked_inclusion_fraction",
                    "retrieval_accuracy")


def ablation_report(corpus: SyntheticCorpus, cfgs: Sequence[TrainerConfig],
                    names: Sequence[str] | None = None, return_results=False):
    """Train each config on the same corpus and tabulate the outcomes."""
    if len(cfgs) < 2:
        raise InvalidArgumentError("ablation needs at least two configs")
    base = dataclasses.replace(cfgs[0], loss=LossParams())
    for c in cfgs[1:]:
        if dataclasses.replace(c, loss=LossParams()) != base:
            raise InvalidArgumentError("ablation configs may differ only in loss parameters")
    names = list(names) if names is not None else [f"cfg{i}" for i in range(len(cfgs))]
    rows, results = [], []
    for name, cfg in zip(names, cfgs):
        res = train(corpus, cfg)
        t = res.table
        vi, vt = mean_variance(t, "image"), mean_variance(t, "text")
        rows.append({
            "name": name,
            "alpha1": cfg.loss.alpha1,
            "alpha2": cfg.loss.alpha2,
            "beta": cfg.loss.beta,
            "final_loss": res.trace[-1]["total"],
            "mean_var_image": vi,
            "mean_var_text": vt,
            "var_ratio_text_image": vt / vi,
            "masked_inclusion_fraction": masked_inclusion_fraction(corpus, t, cfg.loss.eps_inc),
            "retrieval_accuracy": retrieval_accuracy(corpus, t),
        })
        results.append(res)
    return (rows, results) if return_results else rows


@dataclass(eq=False)
class HierarchyCorpus:
    captions: list          # GaussianEmbedding, ids "g{k}", "m{k}.{j}", "s{k}.{j}.{l}"
    images: list            # GaussianEmbedding, one per specific caption
    null_text: GaussianEmbedding
    ground_truth: dict      # image id -> [general, mid, specific] caption ids
    levels: dict            # caption id -> 0 (general), 1 (mid), 2 (specific)


def hierarchy_corpus(n_topics: int = 4, n_mid: int = 2, n_specific: int = 2, seed: int = 0,
                     *, offset: float = 0.5, noise: float = 0.02,
                     var_narrow: float = 1e-5, var_image: float = 1e-4,
                     var_mid: float = 2e-3, var_general: float = 5e-3,
                     var_null: float = 5e-3) -> HierarchyCorpus:
    """Nested three-level caption hierarchy with one image per leaf.

    Every topic, mid-level branch and leaf owns a coordinate axis. A caption's
    mean is the normalized average of the leaf means below it; it is wide
    (``var_general`` / ``var_mid``) on its own axis and those of its
    descendants and narrow
    (``var_narrow``) everywhere else, so it covers its own subtree only.
    Images sit at their leaf mean plus small noise with ``var_image`` on
    every axis.
    """
    if min(n_topics, n_mid, n_specific) < 1:
        raise InvalidArgumentError("hierarchy sizes must be >= 1")
    per_topic = 1 + n_mid + n_mid * n_specific
    dim = n_topics * per_topic
    gen = rng(seed)

    def axis(k, *path):
        base = k * per_topic
        if not path:
            return base
        j = path[0]
        if len(path) == 1:
            return base + 1 + j
        return base + 1 + n_mid + j * n_specific + path[1]

    def unit(v):
        return v / np.linalg.norm(v)

    captions, images, gt, levels = [], [], {}, {}
    for k in range(n_topics):
        leaf_mus = {}
        for j in range(n_mid):
            for l in range(n_specific):
                v = np.zeros(dim)
                v[axis(k)] = 1.0
                v[axis(k, j)] = offset
                v[axis(k, j, l)] = offset
                leaf_mus[j, l] = unit(v)
        var = np.full(dim, var_narrow)
        var[axis(k)] = var_general
        var[[axis(k, j) for j in range(n_mid)]] = var_general
        var[[axis(k, j, l) for j in range(n_mid) for l in range(n_specific)]] = var_general
        g_id = f"g{k}"
        captions.append(GaussianEmbedding.normalized_from(
            np.mean(list(leaf_mus.values()), axis=0), np.log(var), id=g_id, modality="text"))
        levels[g_id] = 0
        for j in range(n_mid):
            var = np.full(dim, var_narrow)
            var[axis(k, j)] = var_mid
            var[[axis(k, j, l) for l in range(n_specific)]] = var_mid
            m_id = f"m{k}.{j}"
            captions.append(GaussianEmbedding.normalized_from(
                np.mean([leaf_mus[j, l] for l in range(n_specific)], axis=0), np.log(var),
                id=m_id, modality="text"))
            levels[m_id] = 1
            for l in range(n_specific):
                s_id = f"s{k}.{j}.{l}"
                captions.append(GaussianEmbedding.normalized_from(
                    leaf_mus[j, l], np.full(dim, np.log(var_narrow)), id=s_id, modality="text"))
                levels[s_id] = 2
                i_id = f"img{k}.{j}.{l}"
                mu = leaf_mus[j, l] + noise * gen.standard_normal(dim)
                images.append(GaussianEmbedding.normalized_from(
                    mu, np.full(dim, np.log(var_image)), id=i_id, modality="image"))
                gt[i_id] = [g_id, m_id, s_id]
    null_mu = np.zeros(dim)
    null_mu[[axis(k) for k in range(n_topics)]] = 1.0
    null = GaussianEmbedding.normalized_from(null_mu, np.full(dim, np.log(var_null)),
                                             id="null", modality="text")
    return HierarchyCorpus(captions, images, null, gt, levels)
