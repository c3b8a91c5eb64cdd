"""LayerMatch: pretrain an encoder to predict a frozen generator's activations.

The encoder backbone maps an image to features at 32, 16, 8 and 4 pixels;
one 1x1 auxiliary head per generator stage reads the backbone feature at
that stage's resolution.  Training minimises

    L = w_match * (1/n) sum_i ||phi_i - phi_hat_i||^2  +  w_rec * ||I_rec - I_gen||^2

where ``I_rec`` regenerates the image after substituting one predicted
activation.  After training the heads are dropped and the backbone is kept.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.cluster import KMeans

from .autodiff import Conv2d, Module, SeededRNG, Tensor
from .autodiff import functional as F
from .generators import ACTIVATION_SHAPES, ProceduralGenerator, sample_latent
from .training import run_adam
from .validation import check_images, check_is_fitted

BACKBONE_WIDTHS = (16, 24, 32, 48)
BACKBONE_RESOLUTIONS = (32, 16, 8, 4)


class _DownStage(Module):
    def __init__(self, c_in, c_out, rng):
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)

    def forward(self, x):
        x = F.avg_pool2x(x)
        return F.leaky_relu(self.conv2(F.leaky_relu(self.conv1(x))))


class Backbone(Module):
    """Conv stem at full resolution followed by three 2x-downsampling stages.

    ``forward`` returns feature maps finest first: (16, 32, 32), (24, 16, 16),
    (32, 8, 8), (48, 4, 4) per sample.
    """

    widths = BACKBONE_WIDTHS

    def __init__(self, rng):
        self.stem = Conv2d(3, self.widths[0], 3, rng.spawn(0))
        self.stages = [_DownStage(a, b, rng.spawn(i + 1))
                       for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:]))]

    def forward(self, images):
        x = F.leaky_relu(self.stem(images))
        feats = [x]
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def copy(self):
        other = Backbone(SeededRNG(0))
        other.load_state_vector(self.state_vector())
        return other


class Encoder(Module):
    """Backbone plus one auxiliary head per matched generator stage."""

    def __init__(self, rng, shapes=ACTIVATION_SHAPES):
        self.shapes = tuple(tuple(s) for s in shapes)
        self.backbone = Backbone(rng.spawn(1))
        self.head_sources = []
        heads = []
        for i, (c, r, _) in enumerate(self.shapes):
            if r not in BACKBONE_RESOLUTIONS:
                raise ValueError(f"no backbone feature at resolution {r}")
            src = BACKBONE_RESOLUTIONS.index(r)
            self.head_sources.append(src)
            heads.append(Conv2d(BACKBONE_WIDTHS[src], c, 1, rng.spawn(100 + i), gain=1.0))
        self.heads = heads

    def forward(self, images):
        feats = self.backbone(images)
        return [head(feats[src]) for head, src in zip(self.heads, self.head_sources)]


def encode(encoder, images):
    """Predicted activations for images (N, 3, 32, 32) or a single (3, 32, 32) image."""
    single = np.ndim(images.data if isinstance(images, Tensor) else images) == 3
    x = images if isinstance(images, Tensor) else Tensor(check_images(images))
    if single and x.ndim == 3:
        x = F.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (3, 32, 32):
        raise ValueError(f"encoder expects (N, 3, 32, 32) images, got {x.shape}")
    out = encoder(x)
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def match_loss(phis, phi_hats, normalize=False):
    """(1/n) * sum over stages of the summed squared difference, batch-averaged.

    Single samples (3-d stage arrays) are treated as a batch of one.  With
    ``normalize`` each stage's sum is divided by its element count.
    """
    phis, phi_hats = list(phis), list(phi_hats)
    if len(phis) != len(phi_hats) or not phis:
        raise ValueError("activation sets differ in length or are empty")
    total = None
    batch = None
    for a, b in zip(phis, phi_hats):
        a, b = _as_tensor(a), _as_tensor(b)
        if a.shape != b.shape:
            raise ValueError(f"activation shape mismatch {a.shape} vs {b.shape}")
        batch = a.shape[0] if a.ndim == 4 else 1
        term = F.squared_l2(F.sub(a, b))
        if normalize:
            term = F.mul(term, batch / a.size)
        total = term if total is None else F.add(total, term)
    return F.mul(total, 1.0 / (len(phis) * batch))


def rec_loss(generator, latents, m, phi_hat_m, image=None):
    """||I_rec - I_gen||^2 with stage ``m`` replaced by ``phi_hat_m`` (batch-averaged)."""
    latents = np.atleast_2d(latents)
    phi = _as_tensor(phi_hat_m)
    if phi.ndim == 3:
        phi = F.reshape(phi, (1,) + phi.shape)
    if image is None:
        image, _ = generator.generate(latents)
    image = _as_tensor(image)
    if image.ndim == 3:
        image = F.reshape(image, (1,) + image.shape)
    rec = generator.resume(latents, m, phi)
    return F.mul(F.squared_l2(F.sub(rec, image.detach())), 1.0 / latents.shape[0])


def _params_bytes(generator):
    return generator.state_vector().tobytes()


class LayerMatch(BaseEstimator, TransformerMixin):
    """Pretrains a :class:`Backbone` by matching a frozen generator's activations.

    ``fit()`` needs no data: images and target activations are sampled from
    ``generator`` (a procedural generator when None).  ``transform(images)``
    returns the finest backbone feature map, (N, 16, 32, 32).

    Attributes after fit: ``encoder_`` (with heads), ``backbone_`` (heads
    removed) and ``curve_``, a list of ``(step, match_loss, rec_loss, lr)``.
    """

    def __init__(self, generator=None, steps=1000, batch_size=8, lr=1e-4, match_weight=1.0,
                 rec_weight=1.0, substitution="batch", normalize=False, random_state=0):
        self.generator = generator
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.match_weight = match_weight
        self.rec_weight = rec_weight
        self.substitution = substitution
        self.normalize = normalize
        self.random_state = random_state

    def _validate(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.match_weight < 0 or self.rec_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.substitution not in ("batch", "sample"):
            raise ValueError("substitution must be 'batch' or 'sample'")

    def _losses(self, generator, encoder, latents, m_rng):
        image, phis = generator.generate(latents)
        phis = [p.detach() for p in phis]
        hats = encoder(image.detach())
        lm = match_loss(phis, hats, self.normalize)
        n = generator.n_stages
        if self.substitution == "batch":
            ms = np.full(len(latents), m_rng.integers(1, n + 1))
        else:
            ms = m_rng.integers(1, n + 1, size=len(latents))
        lr_ = None
        for m in np.unique(ms):
            sel = np.flatnonzero(ms == m)
            hat = hats[m - 1]
            if len(sel) != len(latents):
                hat = _take(hat, sel)
            part = F.mul(rec_loss(generator, latents[sel], int(m), hat, _take(image, sel)),
                         len(sel) / len(latents))
            lr_ = part if lr_ is None else F.add(lr_, part)
        return lm, lr_

    def fit(self, X=None, y=None):
        self._validate()
        generator = self.generator if self.generator is not None else ProceduralGenerator()
        rng = SeededRNG(self.random_state)
        encoder = Encoder(rng.spawn(1), generator.activation_shapes)
        params = encoder.parameters()
        data_rng, m_rng = rng.spawn(2), rng.spawn(3)
        frozen = [p.requires_grad for p in generator.parameters()]
        generator.requires_grad_(False)
        curve = []

        def loss_fn(step):
            latents = sample_latent(data_rng, n=self.batch_size)
            lm, lr_ = self._losses(generator, encoder, latents, m_rng)
            curve.append([step, lm.item(), lr_.item()])
            total = F.add(F.mul(lm, float(self.match_weight)), F.mul(lr_, float(self.rec_weight)))
            return total

        def record_lr(step, loss, lr):
            curve[-1].append(lr)

        try:
            run_adam(params, loss_fn, self.steps, self.lr, record_lr, what="LayerMatch")
        finally:
            for p, flag in zip(generator.parameters(), frozen):
                p.requires_grad = flag
        self.encoder_ = encoder
        self.backbone_ = encoder.backbone
        self.curve_ = [tuple(c) for c in curve]
        return self

    def transform(self, X):
        check_is_fitted(self, "backbone_")
        return self.backbone_(Tensor(check_images(X, resolution=32)))[0].data


def _take(t, idx):
    """Differentiable row selection along the batch axis."""
    idx = np.asarray(idx)
    if len(idx) == t.shape[0] and np.all(idx == np.arange(t.shape[0])):
        return t
    out = t.data[idx]
    shape = t.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return F._make(out, (t,), vjp, "take")


def pretrain_layermatch(generator, cfg=None, rng=None, curve_path=None):
    """Run LayerMatch and return the backbone with heads removed.

    ``cfg`` is a dict of :class:`LayerMatch` parameters.  When
    ``curve_path`` is given the training curve is written there as CSV.
    """
    cfg = dict(cfg or {})
    if rng is not None:
        cfg["random_state"] = rng.child_seed()
    est = LayerMatch(generator=generator, **cfg).fit()
    if curve_path is not None:
        from .fileio import write_csv
        write_csv(curve_path, ["step", "match_loss", "rec_loss", "lr"], est.curve_, append=False)
    return est.backbone_


def cluster_purity(features, labels, k, rng):
    """k-means (k-means++ init, 20 Lloyd iterations) purity of per-point labels."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if len(features) == 0:
        raise ValueError("empty feature sample")
    if k < 1 or len(features) < k:
        raise ValueError("need k >= 1 and at least k samples")
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=20, tol=0.0,
                random_state=rng.child_seed())
    assign = km.fit_predict(features)
    hits = 0
    for c in range(k):
        members = labels[assign == c]
        if members.size:
            hits += np.bincount(members).max()
    return hits / len(labels)


def feature_cluster_purity(backbone, images, labels, k, pixels_per_image, rng):
    """Purity of k-means clusters of finest-resolution backbone pixel features."""
    images = check_images(images, resolution=32)
    labels = np.asarray(labels)
    feats = backbone(Tensor(images))[0].data  # (N, C, 32, 32)
    n, c, h, w = feats.shape
    flat = feats.transpose(0, 2, 3, 1).reshape(n, h * w, c)
    pick_rng = rng.spawn(1)
    xs, ys = [], []
    for i in range(n):
        idx = pick_rng.permutation(h * w)[:pixels_per_image]
        xs.append(flat[i, idx])
        ys.append(labels[i].ravel()[idx])
    return cluster_purity(np.concatenate(xs), np.concatenate(ys), k, rng.spawn(2))
