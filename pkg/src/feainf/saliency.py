"""Adaptive dynamic masks: learn perturbation masks against a detection node.

Masks of several grid sizes are trained so the masked image keeps the node's
activation while the masks stay sparse; their upsampled sum is thresholded
into a saliency map.  The sparsity weight is picked per image by minimising
a smoothness-times-mass quality index over a candidate set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .encoder import encode
from .inference import model_forward
from .lfm import extract_features


class ExplainError(RuntimeError):
    pass


def default_candidates():
    return tuple(sorted(a * j for a in (1e-2, 1e-1, 1.0, 1e1, 1e2) for j in range(1, 10)))


@dataclass
class ExplainConfig:
    sizes: tuple = tuple(range(6, 15))
    xi: float = 0.5
    iterations: int = 400
    lr: float = 2e-3
    percentile: float = 20.0
    candidates: tuple = field(default_factory=default_candidates)
    gamma: float = 1.0
    theta: float = 1.0
    max_refinements: int = 50
    chunk: int = 45  # candidates trained together in one batch

    def __post_init__(self):
        sizes = [tuple(s) if np.ndim(s) else (int(s), int(s)) for s in self.sizes]
        if len(set(sizes)) != len(sizes):
            raise ValueError("mask sizes must be pairwise distinct")
        self.sizes = tuple(sizes)
        self.candidates = tuple(sorted(float(c) for c in self.candidates))
        if not self.candidates:
            raise ValueError("need at least one candidate weight")


@dataclass
class MaskVector:
    values: np.ndarray
    iterations: int = 0
    lr: float = 0.0

    @property
    def size(self):
        return self.values.shape


@dataclass
class DetectionNode:
    kind: str  # "feature" or "prototype"
    image: np.ndarray  # (H, W, C)
    region: int
    reference: np.ndarray  # z_region(image), (C1,)
    prototype: int = None


@dataclass
class SaliencyMap:
    values: np.ndarray
    omega: float = 0.0
    lam_nu: float = None
    lam0: tuple = ()
    tau: float = None

    @property
    def is_zero(self):
        return not np.any(self.values)


# ----------------------------------------------------------------------
# detection nodes
def node_features(images, model, region):
    """z_region for a batch of images as a Tensor (N, C1)."""
    f = encode(images, model.encoder_params, model.encoder_config)
    return extract_features(f, model.bank, regions=[region])[:, 0, :]


def select_node(model, x0):
    """Feature node at the region with the largest disease logit."""
    x0 = np.asarray(x0, dtype=float)
    out = model_forward(x0[None], model)
    region = int(np.argmax(out["logits"].data[0]))
    return DetectionNode("feature", x0, region, out["features"].data[0, region].copy())


def select_prototype_node(model, j, image):
    """Node for disease prototype ``j`` on its source image: the region whose feature is nearest."""
    image = np.asarray(image, dtype=float)
    z = model_forward(image[None], model)["features"].data[0]
    region = int(np.argmin(np.linalg.norm(z - model.prototypes.pos[j], axis=1)))
    return DetectionNode("prototype", image, region, z[region].copy(), prototype=int(j))


def best_prototype(model, image, region):
    out = model_forward(np.asarray(image, dtype=float)[None], model)
    return int(np.argmax(out["g_pos"].data[0, region]))


# ----------------------------------------------------------------------
# masks
def upsample_mask(delta, height, width):
    """Bilinear resize of a (u, v) mask, or a stack (..., u, v), to (height, width)."""
    d = delta.values if isinstance(delta, MaskVector) else delta
    return tn.upsample_bilinear(d, height, width)


def _masked_batch(image, masks):
    """(B, H, W) mask Tensor times an (H, W, C) image -> (B, H, W, C)."""
    b, h, w = masks.shape
    return masks.reshape(b, h, w, 1) * image[None]


def consistency_loss(delta, node, model, lam):
    """(Sim, Mas, Con) Tensors for one mask; differentiable w.r.t. ``delta``."""
    d = tn.as_tensor(delta.values if isinstance(delta, MaskVector) else delta)
    h, w = node.image.shape[:2]
    g = upsample_mask(d, h, w).reshape(1, h, w)
    z = node_features(_masked_batch(node.image, g), model, node.region)
    sim = tn.sqdist(z, node.reference[None]).sum()
    mas = tn.tabs(d).sum() / float(d.size)
    return sim, mas, sim + mas * lam


def initial_lambda(node, model, config):
    """Sim/Mas ratio at the constant initial masks, one per size."""
    out = []
    for u, v in config.sizes:
        d0 = np.full((u, v), config.xi)
        sim, mas, _ = consistency_loss(d0, node, model, 0.0)
        out.append(float(sim.data) / float(mas.data))
    return tuple(out)


def _train_mask_grid(node, model, lams, config):
    """Train masks for a (B, S) grid of weights in one batch.

    Row b, column s is the mask of size ``config.sizes[s]`` trained with
    weight ``lams[b, s]``.  Adam is elementwise, so batching leaves each
    mask's trajectory identical to training it alone.  Returns the
    best-so-far masks ``[s][b]`` plus their (initial, best) Con values.
    """
    lams = np.asarray(lams, dtype=float)
    n_b, n_s = lams.shape
    img = node.image
    h, w = img.shape[:2]
    deltas = {s: np.full((n_b,) + config.sizes[s], config.xi) for s in range(n_s)}
    best = {s: deltas[s].copy() for s in range(n_s)}
    best_con = np.full((n_s, n_b), np.inf)
    first_con = None
    state = tn.AdamState()
    ref = node.reference[None]
    lam_t = lams.T  # (S, B)
    for it in range(config.iterations + 1):
        params = {s: tn.Tensor(deltas[s], requires_grad=it < config.iterations) for s in range(n_s)}
        ups = [upsample_mask(params[s], h, w) for s in range(n_s)]
        masks = tn.concat(ups, axis=0)  # (S*B, H, W)
        z = node_features(_masked_batch(img, masks), model, node.region)
        sim = tn.sqdist(z, ref).reshape(n_s, n_b)
        mas = tn.stack([tn.tabs(params[s]).sum(axis=(1, 2)) / float(np.prod(config.sizes[s]))
                        for s in range(n_s)])
        con = sim + mas * lam_t
        values = con.data
        if not np.all(np.isfinite(values)):
            raise ExplainError(f"non-finite consistency loss at iteration {it}")
        if first_con is None:
            first_con = values.copy()
        improved = values < best_con
        for s in range(n_s):
            if improved[s].any():
                best[s][improved[s]] = deltas[s][improved[s]]
        best_con = np.where(improved, values, best_con)
        if it == config.iterations:
            break
        con.sum().backward()
        grads = {s: params[s].grad for s in range(n_s)}
        tn.adam_step(deltas, grads, config.lr, state)
        for s in range(n_s):
            np.clip(deltas[s], 0.0, 1.0, out=deltas[s])
    return best, first_con, best_con


def optimize_masks(node, model, lams, config=None):
    """Train one mask per configured size; ``lams`` gives each size's weight."""
    config = config or ExplainConfig()
    lams = np.broadcast_to(np.asarray(lams, dtype=float), (len(config.sizes),))
    best, _, _ = _train_mask_grid(node, model, lams[None, :], config)
    return [MaskVector(best[s][0], config.iterations, config.lr) for s in range(len(config.sizes))]


# ----------------------------------------------------------------------
# saliency map and its quality
def stack_saliency(masks, height, width, percentile=20.0):
    """Sum the upsampled masks, keep the top ``percentile``% above the cutoff, min-max normalise.

    The cutoff is the largest value outside the top ceil(p% * HW) pixels, so
    that exactly that many pixels survive when values are distinct.
    """
    total = np.zeros((height, width))
    for m in masks:
        total += upsample_mask(np.asarray(getattr(m, "values", m), dtype=float), height, width).data
    n = total.size
    k = min(max(1, math.ceil(n * percentile / 100.0 - 1e-9)), n - 1)
    omega = float(np.sort(total.ravel())[::-1][k])
    kept = np.where(total >= omega, total - omega, 0.0)
    lo, hi = kept.min(), kept.max()
    values = (kept - lo) / (hi - lo) if hi > lo else np.zeros_like(kept)
    return SaliencyMap(values=values, omega=omega)


def _count_extrema_rows(s):
    """Triples (row, u, v) of the horizontal extremum rule, counted per row in O(W)."""
    d = np.diff(s, axis=1)  # d[:, a] = s[:, a+1] - s[:, a]
    n_rows, nd = d.shape
    sign = np.sign(d)
    brk = (d[:, :-1] * d[:, 1:]) < 0  # brk[:, m]: strict sign change between d[m] and d[m+1]
    pos_pre = np.concatenate([np.zeros((n_rows, 1)), np.cumsum(sign > 0, axis=1)], axis=1)
    neg_pre = np.concatenate([np.zeros((n_rows, 1)), np.cumsum(sign < 0, axis=1)], axis=1)
    last_brk = np.full(n_rows, -1)
    total = 0
    for b in range(1, nd):
        if b - 2 >= 0:
            last_brk = np.where(brk[:, b - 2], b - 2, last_brk)
        lo = np.maximum(last_brk, 0)
        opp = np.where(sign[:, b] > 0, neg_pre[:, b] - neg_pre[np.arange(n_rows), lo],
                       np.where(sign[:, b] < 0, pos_pre[:, b] - pos_pre[np.arange(n_rows), lo], 0))
        total += int(opp.sum())
    return total


def discrete_extreme_rate(saliency):
    """(r_h, r_v, r_t): horizontal and vertical extremum counts and their normalised rate."""
    s = np.asarray(getattr(saliency, "values", saliency), dtype=float)
    h, w = s.shape
    if h < 3 or w < 3:
        raise ValueError("extremum counting needs a map of at least 3x3")
    r_h = _count_extrema_rows(s)
    r_v = _count_extrema_rows(s.T)
    return r_h, r_v, (r_h + r_v) / (h * (w - 2) + w * (h - 2))


def quality_tau(saliency):
    s = np.asarray(getattr(saliency, "values", saliency), dtype=float)
    return discrete_extreme_rate(s)[2] * float(np.abs(s).sum())


# ----------------------------------------------------------------------
class MemoQ:
    """Memoising wrapper; ``table`` maps each evaluated weight to its quality."""

    def __init__(self, fn, table=None):
        self.fn = fn
        self.table = {} if table is None else dict(table)

    def __call__(self, lam):
        lam = float(lam)
        if lam not in self.table:
            self.table[lam] = float(self.fn(lam))
        return self.table[lam]


def _ratio(a, b):
    return 1.0 if a == b else a / b


def adaptive_weight_search(candidates, q, gamma=1.0, theta=1.0, max_refinements=50):
    """Refine the best candidate weight towards its better neighbour while quality improves."""
    cands = [float(c) for c in candidates]
    if not cands:
        raise ValueError("empty candidate set")
    q = q if isinstance(q, MemoQ) else MemoQ(q)
    scores = [q(c) for c in cands]
    i1 = int(np.argmin(scores))
    if len(cands) == 1:
        return cands[0]
    neighbours = [i for i in (i1 - 1, i1 + 1) if 0 <= i < len(cands)]
    i2 = min(neighbours, key=lambda i: (scores[i], i))
    l1, l2 = cands[i1], cands[i2]
    l3 = (l1 + gamma * l2) / (1.0 + gamma)
    for _ in range(max_refinements):
        if not _ratio(q(l1), q(l2)) < theta:
            break
        q3 = q(l3)
        if q3 < q(l1):
            l2, l1 = l1, l3
            l3 = (l1 + gamma * l2) / (1.0 + gamma)
        elif q(l1) <= q3 < q(l2):
            l2 = l3
            l3 = (l1 + gamma * l2) / (1.0 + gamma)
        else:
            l2 = l1
    return l1


# ----------------------------------------------------------------------
@dataclass
class Explanation:
    saliency: SaliencyMap
    node: DetectionNode
    lam0: tuple
    lam_nu: float
    table: dict  # lam_nu -> quality used by the search
    maps: dict  # lam_nu -> SaliencyMap
    masks: dict  # lam_nu -> list of MaskVector
    mask_terms: dict = field(default_factory=dict)  # lam_nu -> (Sim, Mas) per size


class _MapBuilder:
    """Trains masks for any batch of weights and caches map, quality and terms."""

    def __init__(self, node, model, config, lam0):
        self.node, self.model, self.config = node, model, config
        self.lam0 = np.asarray(lam0, dtype=float)
        self.maps, self.masks, self.terms = {}, {}, {}

    def build(self, lam_nus):
        todo = [l for l in dict.fromkeys(float(x) for x in lam_nus) if l not in self.maps]
        h, w = self.node.image.shape[:2]
        for start in range(0, len(todo), self.config.chunk):
            part = todo[start:start + self.config.chunk]
            lams = np.array(part)[:, None] * self.lam0[None, :]
            best, _, _ = _train_mask_grid(self.node, self.model, lams, self.config)
            for b, lam_nu in enumerate(part):
                mv = [MaskVector(best[s][b], self.config.iterations, self.config.lr)
                      for s in range(len(self.config.sizes))]
                smap = stack_saliency(mv, h, w, self.config.percentile)
                smap.lam_nu, smap.lam0 = lam_nu, tuple(self.lam0)
                smap.tau = quality_tau(smap)
                self.maps[lam_nu] = smap
                self.masks[lam_nu] = mv

    def terms_for(self, lam_nu):
        if lam_nu not in self.terms:
            rows = []
            for m in self.masks[lam_nu]:
                sim, mas, _ = consistency_loss(m.values, self.node, self.model, 0.0)
                rows.append((float(sim.data), float(mas.data)))
            self.terms[lam_nu] = rows
        return self.terms[lam_nu]

    def quality(self, lam_nu):
        """tau of the map; an all-zero map is rejected with +inf."""
        self.build([lam_nu])
        smap = self.maps[float(lam_nu)]
        return math.inf if smap.is_zero else smap.tau


def make_node(model, x, kind="feature", prototype=None):
    if kind == "feature":
        return select_node(model, x)
    if kind == "prototype":
        if prototype is None:
            prototype = best_prototype(model, x, select_node(model, x).region)
        return select_prototype_node(model, prototype, x)
    raise ValueError(f"unknown node kind {kind!r}")


def explain(model, x, kind="feature", config=None, prototype=None, node=None):
    """Adaptive-weight saliency map for image ``x``.

    All candidates are trained (batched), then the search refines around the
    best; the returned map has the smallest quality value seen.
    """
    config = config or ExplainConfig()
    node = node or make_node(model, x, kind, prototype)
    lam0 = initial_lambda(node, model, config)
    builder = _MapBuilder(node, model, config, lam0)
    builder.build(config.candidates)
    q = MemoQ(builder.quality)
    lam_nu = adaptive_weight_search(config.candidates, q, config.gamma, config.theta,
                                    config.max_refinements)
    return Explanation(
        saliency=builder.maps[lam_nu], node=node, lam0=lam0, lam_nu=lam_nu,
        table=dict(q.table), maps=builder.maps, masks=builder.masks,
    )


def fixed_weight_saliency(model, x, lam_nu=1.0, kind="feature", config=None, node=None):
    """Dynamic-mask saliency with one fixed weight multiplier (no search)."""
    config = config or ExplainConfig()
    node = node or make_node(model, x, kind)
    lam0 = initial_lambda(node, model, config)
    builder = _MapBuilder(node, model, config, lam0)
    builder.build([lam_nu])
    return builder.maps[float(lam_nu)], node


def sweep_lambda(model, x, lam_nus, kind="feature", config=None):
    """Rows of (lam_nu, mean Sim, mean Mas, tau) over the given weights."""
    config = config or ExplainConfig()
    node = make_node(model, x, kind)
    lam0 = initial_lambda(node, model, config)
    builder = _MapBuilder(node, model, config, lam0)
    builder.build(lam_nus)
    rows = []
    for lam in lam_nus:
        terms = np.array(builder.terms_for(float(lam)))
        smap = builder.maps[float(lam)]
        rows.append({"lam_nu": float(lam), "sim": float(terms[:, 0].mean()),
                     "mas": float(terms[:, 1].mean()), "tau": smap.tau, "zero_map": smap.is_zero})
    return rows, node


def upsampled_similarity_baseline(model, x, node=None):
    """Per-region similarity to the node's best disease prototype, upsampled and min-max scaled."""
    x = np.asarray(x, dtype=float)
    node = node or select_node(model, x)
    out = model_forward(x[None], model)
    g = out["g_pos"].data[0]  # (T, K)
    j = node.prototype if node.prototype is not None else int(np.argmax(g[node.region]))
    h1, w1 = model.encoder_config.feature_height, model.encoder_config.feature_width
    grid = g[:, j].reshape(h1, w1)
    up = tn.upsample_bilinear(grid, x.shape[0], x.shape[1]).data
    lo, hi = up.min(), up.max()
    values = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    return SaliencyMap(values=values, tau=quality_tau(values))


__all__ = [
    "ExplainConfig", "MaskVector", "DetectionNode", "SaliencyMap", "Explanation", "ExplainError",
    "select_node", "select_prototype_node", "upsample_mask", "consistency_loss", "optimize_masks",
    "stack_saliency", "discrete_extreme_rate", "quality_tau", "adaptive_weight_search", "explain",
    "fixed_weight_saliency", "sweep_lambda", "upsampled_similarity_baseline",
]
