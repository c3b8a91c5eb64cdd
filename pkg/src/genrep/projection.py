"""Semantic projection: a light decoder from generator activations to label maps."""

import numpy as np
from sklearn.base import BaseEstimator

from .autodiff import BatchNorm2d, Conv2d, Module, SeededRNG, Tensor
from .autodiff import functional as F
from .generators import ACTIVATION_SHAPES, N_CLASSES, labels_for_latents, sample_latent
from .metrics import segmentation_metrics
from .training import batch_indices, run_adam
from .validation import check_activation_sets, check_is_fitted, check_label_maps


class CBlock(Module):
    """1x1 conv to the decoder width, dropout, batch norm.

    Dropout sits after the conv rather than in front of it: dropping whole
    channels of the 8-channel input leaves batch-norm statistics that do not
    transfer to inference and caps training accuracy well below 0.99.
    """

    def __init__(self, c_in, width, p, rng):
        self.p = p
        self.conv = Conv2d(c_in, width, 1, rng)
        self.bn = BatchNorm2d(width)
        self.rng = rng.spawn(7)
        self.drop_active = True

    def forward(self, x):
        x = F.dropout(self.conv(x), self.p, self.training and self.drop_active, self.rng)
        return self.bn(x)


class RBlock(Module):
    """Residual block of two 3x3 convs."""

    def __init__(self, width, rng):
        self.conv1 = Conv2d(width, width, 3, rng)
        self.conv2 = Conv2d(width, width, 3, rng, gain=0.5)

    def forward(self, x):
        return F.add(x, self.conv2(F.relu(self.conv1(x))))


class ProjectionDecoder(Module):
    """One CBlock per generator stage merged into an upsampling residual trunk.

    trunk = C_1(phi_1); for each later stage: trunk = R(up2(trunk)) + C_j(phi_j);
    logits = conv1x1(relu(trunk)).
    """

    def __init__(self, rng, n_classes=N_CLASSES, shapes=ACTIVATION_SHAPES, width=32, dropout=0.5):
        self.shapes = tuple(tuple(s) for s in shapes)
        self.n_classes = n_classes
        self.width = width
        self.cblocks = [CBlock(s[0], width, dropout, rng.spawn(10 + i))
                        for i, s in enumerate(self.shapes)]
        self.rblocks = [RBlock(width, rng.spawn(20 + i)) for i in range(len(self.shapes) - 1)]
        # small logits at init: a fresh decoder predicts close to uniform
        self.classifier = Conv2d(width, n_classes, 1, rng.spawn(30), gain=0.1)

    def recalibrate(self, phis):
        """Reset batch-norm running statistics to the dropout-free statistics of ``phis``.

        Dropout in front of batch norm inflates the variance seen in
        training, so running statistics gathered there do not match
        inference inputs.
        """
        saved = [(cb.bn.momentum, cb.drop_active) for cb in self.cblocks]
        for cb in self.cblocks:
            cb.bn.momentum, cb.drop_active = 0.0, False
        self.train()
        self.forward(phis)
        for cb, (mom, active) in zip(self.cblocks, saved):
            cb.bn.momentum, cb.drop_active = mom, active
        return self.eval()

    def forward(self, phis):
        x = self.cblocks[0](phis[0])
        for cb, rb, phi in zip(self.cblocks[1:], self.rblocks, phis[1:]):
            x = F.add(rb(F.upsample(x, 2, "bilinear")), cb(phi))
        return self.classifier(F.relu(x))


def _tensors(stages, idx=None):
    return [Tensor._wrap(s if idx is None else s[idx]) for s in stages]


class SemanticProjection(BaseEstimator):
    """Estimator wrapping :class:`ProjectionDecoder` (activations -> label map).

    ``fit(phis, y)`` takes activations as a list of stage arrays
    ``[(N, 8, 4, 4), ..., (N, 8, 32, 32)]`` (or a list of per-sample sets)
    and label maps ``(N, 32, 32)``.  Trained with pixel cross-entropy,
    Adam and cosine decay; ends in eval mode.
    """

    def __init__(self, n_classes=N_CLASSES, width=32, dropout=0.5, steps=500, lr=3e-3,
                 batch_size=4, random_state=0):
        self.n_classes = n_classes
        self.width = width
        self.dropout = dropout
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def _init_decoder(self, shapes):
        rng = SeededRNG(self.random_state).spawn(101)
        return ProjectionDecoder(rng, self.n_classes, shapes, self.width, self.dropout)

    def fit(self, phis, y):
        stages = check_activation_sets(phis)
        y = check_label_maps(y, self.n_classes)
        if len(y) == 0:
            raise ValueError("need at least one annotated sample")
        if len(y) != stages[0].shape[0]:
            raise ValueError("activations and label maps differ in sample count")
        shapes = [s.shape[1:] for s in stages]
        self.decoder_ = self._init_decoder(shapes).train()
        params = self.decoder_.parameters()
        data_rng = SeededRNG(self.random_state).spawn(102)

        def loss_fn(step):
            idx = batch_indices(data_rng, len(y), self.batch_size)
            return F.cross_entropy(self.decoder_(_tensors(stages, idx)), y[idx])

        self.loss_curve_ = run_adam(params, loss_fn, self.steps, self.lr, what="projection")
        self.decoder_.recalibrate(_tensors(stages))
        return self

    def predict_proba(self, phis):
        check_is_fitted(self, "decoder_")
        stages = check_activation_sets(phis, self.decoder_.shapes)
        return F.softmax(self.decoder_(_tensors(stages))).data

    def predict(self, phis):
        # argmax returns the first maximum, so ties go to the lowest class index
        return self.predict_proba(phis).argmax(axis=1)

    def score(self, phis, y):
        return segmentation_metrics(self.predict(phis), check_label_maps(y, self.n_classes),
                                    self.n_classes).mean_iou


def project(decoder, phis):
    """(label map, per-pixel class probabilities) of a decoder in eval mode."""
    if isinstance(decoder, SemanticProjection):
        decoder = decoder.decoder_
    stages = check_activation_sets(phis, decoder.shapes)
    was_training = decoder.training
    decoder.eval()
    probs = F.softmax(decoder(_tensors(stages))).data
    decoder.train(was_training)
    return probs.argmax(axis=1), probs


def train_projection(generator, projection, annotated, steps=None, rng=None):
    """Fit ``projection`` on annotated pairs ``[(phis_i, labels_i), ...]``.

    ``generator`` is only consulted for the expected activation shapes; it
    is never modified.
    """
    annotated = list(annotated)
    if not annotated:
        raise ValueError("train_projection needs at least one annotated pair")
    if steps is not None:
        projection.set_params(steps=steps)
    if rng is not None:
        projection.set_params(random_state=rng.child_seed())
    phis = check_activation_sets([a[0] for a in annotated], generator.activation_shapes)
    labels = np.stack([np.asarray(a[1]) for a in annotated])
    return projection.fit(phis, labels)


def annotate(generator, latents):
    """Activations from ``generator`` and exact labels from the analytic scene."""
    _, phis = generator.generate(latents)
    return [p.data for p in phis], labels_for_latents(latents)


def evaluate_projection_curve(generator, sizes=(1, 2, 5, 10, 15, 20), test_size=30,
                              seeds=(0, 1, 2), steps=500, batch_size=4):
    """Rows ``{n, seed, accuracy, mean_iou}`` for projections trained on n samples."""
    sizes = sorted(set(int(s) for s in sizes))
    if not sizes:
        raise ValueError("sizes must be non-empty")
    rows = []
    for seed in seeds:
        rng = SeededRNG(seed)
        train_latents = sample_latent(rng.spawn(1), n=max(sizes))
        test_latents = sample_latent(rng.spawn(2), n=test_size)
        train_phis, train_y = annotate(generator, train_latents)
        test_phis, test_y = annotate(generator, test_latents)
        for n in sizes:
            model = SemanticProjection(steps=steps, batch_size=batch_size,
                                       random_state=rng.spawn(3, n).child_seed())
            model.fit([p[:n] for p in train_phis], train_y[:n])
            m = segmentation_metrics(model.predict(test_phis), test_y, model.n_classes)
            rows.append({"n": n, "seed": seed, "accuracy": m.pixel_accuracy,
                         "mean_iou": m.mean_iou})
    return rows
