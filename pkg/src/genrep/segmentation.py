"""Image segmentation network, its training procedures and the baselines.

Every method in the comparison trains the same :class:`SegmentationNet`
(a :class:`~genrep.layermatch.Backbone` plus a fusion head); they differ
only in initialisation and training data.
"""

import logging

import numpy as np
from sklearn.base import BaseEstimator

from .autodiff import Conv2d, Module, SeededRNG, Tensor
from .autodiff import functional as F
from .generators import N_CLASSES, sample_latent
from .layermatch import BACKBONE_WIDTHS, Backbone
from .metrics import segmentation_metrics
from .training import batch_indices, run_adam
from .validation import check_images, check_is_fitted, check_label_maps

logger = logging.getLogger(__name__)

IGNORE = -1


class SegmentationNet(Module):
    """Backbone features upsampled to 32x32, concatenated, then two 1x1 convs."""

    def __init__(self, rng, n_classes=N_CLASSES, width=32):
        self.n_classes = n_classes
        self.backbone = Backbone(rng.spawn(1))
        self.fuse = Conv2d(int(np.sum(BACKBONE_WIDTHS)), width, 1, rng.spawn(2))
        self.classifier = Conv2d(width, n_classes, 1, rng.spawn(3), gain=1.0)

    def forward(self, images):
        feats = self.backbone(images)
        res = feats[0].shape[2]
        ups = [feats[0]] + [F.upsample(f, res // f.shape[2], "bilinear") for f in feats[1:]]
        x = F.leaky_relu(self.fuse(F.concat(ups, axis=1)))
        return self.classifier(x)


def _images_tensor(X, idx=None):
    return Tensor._wrap(X if idx is None else X[idx])


class SegmentationModel(BaseEstimator):
    """Estimator for :class:`SegmentationNet` trained with pixel cross-entropy.

    Parameters
    ----------
    backbone : Backbone or None
        Initial backbone weights (copied); None keeps the seeded random init.
        The head is always freshly initialised from ``random_state``, so a
        random and a pretrained run under one seed differ only in the
        backbone and see the same minibatch order.
    steps, batch_size, lr :
        Adam with cosine decay from ``lr`` to zero over ``steps``.

    Label maps may contain -1 for pixels excluded from the loss.
    """

    def __init__(self, n_classes=N_CLASSES, steps=1000, batch_size=8, lr=1e-3, backbone=None,
                 random_state=0):
        self.n_classes = n_classes
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.backbone = backbone
        self.random_state = random_state

    def _init_net(self):
        net = SegmentationNet(SeededRNG(self.random_state).spawn(201), self.n_classes)
        if self.backbone is not None:
            net.backbone.load_state_vector(self.backbone.state_vector())
        return net

    def fit(self, X, y, X_extra=None, y_extra=None):
        """Train on (X, y); optional (X_extra, y_extra) fill half of each batch."""
        X = check_images(X, resolution=32)
        y = check_label_maps(y, self.n_classes, allow_unlabeled=True)
        if len(X) != len(y):
            raise ValueError("images and label maps differ in count")
        self.net_ = self._init_net()
        self.loss_curve_ = self._train(self.net_, X, y, X_extra, y_extra, self.steps)
        return self

    def _train(self, net, X, y, X_extra, y_extra, steps):
        data_rng = SeededRNG(self.random_state).spawn(202)
        extra = X_extra is not None and len(X_extra) > 0
        if extra:
            X_extra = check_images(X_extra, resolution=32)
            y_extra = check_label_maps(y_extra, self.n_classes, allow_unlabeled=True)
            half = max(1, self.batch_size // 2)

        def loss_fn(step):
            if not extra:
                idx = batch_indices(data_rng, len(X), self.batch_size)
                return F.cross_entropy(net(_images_tensor(X, idx)), y[idx], IGNORE)
            i = batch_indices(data_rng, len(X), self.batch_size - half)
            j = batch_indices(data_rng, len(X_extra), half)
            xb = np.concatenate([X[i], X_extra[j]])
            yb = np.concatenate([y[i], y_extra[j]])
            return F.cross_entropy(net(_images_tensor(xb)), yb, IGNORE)

        if steps == 0:
            return []
        return run_adam(net.parameters(), loss_fn, steps, self.lr, what="segmentation")

    def initial_loss(self, X, y):
        """Cross-entropy of the freshly initialised network on (X, y)."""
        net = self._init_net()
        return F.cross_entropy(net(Tensor(check_images(X))),
                               check_label_maps(y, self.n_classes, True), IGNORE).item()

    def predict_proba(self, X, batch_size=32):
        check_is_fitted(self, "net_")
        X = check_images(X, resolution=32)
        out = [F.softmax(self.net_(_images_tensor(X[lo:lo + batch_size]))).data
               for lo in range(0, len(X), batch_size)]
        return np.concatenate(out)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y):
        return segmentation_metrics(self.predict(X), check_label_maps(y, self.n_classes),
                                    self.n_classes).mean_iou


def train_segmentation(model, pairs, steps=None, rng=None):
    """Fit ``model`` on ``(images, label_maps)``."""
    images, labels = pairs
    if len(images) == 0:
        raise ValueError("train_segmentation needs at least one labelled pair")
    if steps is not None:
        model.set_params(steps=steps)
    if rng is not None:
        model.set_params(random_state=rng.child_seed())
    return model.fit(images, labels)


def distill_from_projection(generator, projection, n_images, rng, steps=3000, batch_size=8,
                            lr=1e-3, literal=False):
    """Train a segmenter on generated images labelled by the projection model.

    With ``literal=True`` the segmenter consumes generator activations
    instead of images (a :class:`~genrep.projection.SemanticProjection`
    fitted to the projected labels); it then cannot be applied to real images.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    from .projection import SemanticProjection, project
    latents = sample_latent(rng.spawn(1), n=n_images)
    images, phis = [], [[] for _ in generator.activation_shapes]
    for lo in range(0, n_images, 64):
        img, ph = generator.generate(latents[lo:lo + 64])
        images.append(img.data)
        for acc, p in zip(phis, ph):
            acc.append(p.data)
    images = np.concatenate(images)
    phis = [np.concatenate(p) for p in phis]
    labels = np.concatenate([project(projection, [p[lo:lo + 64] for p in phis])[0]
                             for lo in range(0, n_images, 64)])
    seed = rng.spawn(2).child_seed()
    if literal:
        return SemanticProjection(steps=steps, lr=lr, batch_size=batch_size,
                                  random_state=seed).fit(phis, labels)
    model = SegmentationModel(steps=steps, batch_size=batch_size, lr=lr, random_state=seed)
    return model.fit(images, labels)


def finetune_from_backbone(backbone, labeled, steps=1000, rng=None, batch_size=8, lr=1e-3):
    """Fresh head on ``backbone`` (None for random init), whole network trained."""
    images, labels = labeled
    if len(images) == 0:
        raise ValueError("need at least one labelled sample")
    seed = rng.child_seed() if rng is not None else 0
    model = SegmentationModel(steps=steps, batch_size=batch_size, lr=lr, backbone=backbone,
                              random_state=seed)
    return model.fit(images, labels)


class PseudoLabelSegmentation(SegmentationModel):
    """Self-training baseline.

    Round 0 trains on the labelled data.  Each later round predicts the
    unlabelled images, keeps pixels whose top softmax probability is at
    least ``threshold`` as targets (others ignored) and retrains from the
    same initialisation with half of every batch drawn from the pseudo set.

    ``fit(X, y)`` follows the scikit-learn semi-supervised convention:
    images whose label map is entirely -1 are unlabelled.
    """

    def __init__(self, n_classes=N_CLASSES, steps=1000, batch_size=8, lr=1e-3, backbone=None,
                 random_state=0, threshold=0.9, rounds=2):
        super().__init__(n_classes, steps, batch_size, lr, backbone, random_state)
        self.threshold = threshold
        self.rounds = rounds

    def fit(self, X, y):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must be in (0, 1]")
        X = check_images(X, resolution=32)
        y = check_label_maps(y, self.n_classes, allow_unlabeled=True)
        unlabeled = np.all(y.reshape(len(y), -1) == IGNORE, axis=1)
        if unlabeled.all():
            raise ValueError("pseudo-labelling needs labelled data")
        XL, yL, XU = X[~unlabeled], y[~unlabeled], X[unlabeled]
        self.net_ = self._init_net()
        self.loss_curve_ = self._train(self.net_, XL, yL, None, None, self.steps)
        self.retained_fraction_ = []
        self.pseudo_labels_ = []
        for r in range(self.rounds if len(XU) else 0):
            probs = self.predict_proba(XU)
            pseudo = probs.argmax(axis=1)
            keep = probs.max(axis=1) >= self.threshold
            pseudo = np.where(keep, pseudo, IGNORE)
            self.retained_fraction_.append(float(keep.mean()))
            self.pseudo_labels_.append(pseudo)
            logger.info("pseudo-label round %d keeps %.4f of pixels", r + 1, keep.mean())
            self.net_ = self._init_net()
            self.loss_curve_ = self._train(self.net_, XL, yL, XU, pseudo, self.steps)
        return self


def train_pseudo_label(labeled, unlabeled, threshold=0.9, rounds=2, steps=1000, rng=None,
                       batch_size=8, lr=1e-3):
    """Functional wrapper over :class:`PseudoLabelSegmentation`."""
    XL, yL = labeled
    if len(XL) == 0:
        raise ValueError("pseudo-labelling needs labelled data")
    XU = np.asarray(unlabeled) if unlabeled is not None and len(unlabeled) else np.zeros((0,) + np.shape(XL)[1:])
    X = np.concatenate([np.asarray(XL), XU])
    y = np.concatenate([np.asarray(yL), np.full((len(XU),) + np.shape(yL)[1:], IGNORE)])
    seed = rng.child_seed() if rng is not None else 0
    return PseudoLabelSegmentation(steps=steps, batch_size=batch_size, lr=lr, random_state=seed,
                                   threshold=threshold, rounds=rounds).fit(X, y)


def label_fraction_split(n_items, fraction, seed):
    """Indices ``(labelled, unlabelled)`` with ``max(1, floor(fraction * N))`` labelled.

    One seeded permutation serves every fraction, so smaller labelled sets
    are prefixes (hence subsets) of larger ones.
    """
    n = n_items if isinstance(n_items, (int, np.integer)) else len(n_items)
    if n == 0:
        raise ValueError("empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    k = max(1, int(np.floor(fraction * n + 1e-9)))
    perm = SeededRNG(seed).spawn(301).permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])
