"""Staged latent-to-image generators that expose their internal activations.

Two generators share one interface:

* :class:`ProceduralGenerator` renders a 3-class scene (background, circle,
  rectangle) analytically.  Stage ``j`` holds an 8-channel render at
  resolution ``4 * 2**(j-1)`` built as a Laplacian pyramid,
  ``phi_j = up2(phi_{j-1}) + detail_j(l)``, so it is exact ground truth
  and still propagates a substituted feature downstream.
* :class:`NeuralGenerator` is a small style-modulated conv net distilled
  from the procedural one.

Activation channels: 0-2 composited colour, 3-5 soft occupancy of
background / circle / rectangle, 6-7 signed distances to circle and
rectangle (scaled by 2).
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Adam, Conv2d, Linear, Module, NonFiniteError, Tape, Tensor, cosine_lr
from .autodiff import functional as F

LATENT_DIM = 12
N_STAGES = 4
CHANNELS = 8
BASE_RES = 4
IMAGE_RES = BASE_RES * 2 ** (N_STAGES - 1)
N_CLASSES = 3
ACTIVATION_SHAPES = tuple((CHANNELS, BASE_RES * 2 ** j, BASE_RES * 2 ** j) for j in range(N_STAGES))

# (low, high) for each scene parameter in latent_to_scene order
_RANGES = np.array(
    [[0.2, 0.8], [0.2, 0.8], [0.08, 0.25],            # circle centre x, y, radius
     [0.2, 0.8], [0.2, 0.8], [0.06, 0.3], [0.06, 0.3],  # rect centre x, y, half-extents
     [0, 1], [0, 1], [0, 1],                            # circle colour
     [0, 1], [0, 1], [0, 1],                            # rect colour
     [0, 1], [0, 1], [0, 1]])                           # background colour


def _scene_matrix():
    a = np.zeros((16, LATENT_DIM))
    a[:12, :12] = np.eye(12)
    # rect blue mirrors circle blue; background opposes both object colours
    a[12, 9] = -1.0
    r = 1.0 / np.sqrt(2.0)
    a[13, [7, 10]] = -r
    a[14, [8, 11]] = -r
    a[15, [11, 7]] = r, -r
    return a


SCENE_GAIN = 1.5
SCENE_MATRIX = _scene_matrix()


@dataclass(frozen=True)
class SceneParams:
    circle_center: tuple
    radius: float
    rect_center: tuple
    half_extents: tuple
    circle_color: tuple
    rect_color: tuple
    background: tuple

    def as_array(self):
        return np.array([*self.circle_center, self.radius, *self.rect_center, *self.half_extents,
                         *self.circle_color, *self.rect_color, *self.background])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def scene_vector(latents):
    """Raw scene parameters for latents of shape (N, 12) -> (N, 16).

    ``params = low + (high - low) * sigmoid(SCENE_GAIN * SCENE_MATRIX @ l)``.
    """
    logits = SCENE_GAIN * latents @ SCENE_MATRIX.T
    return _RANGES[:, 0] + (_RANGES[:, 1] - _RANGES[:, 0]) * _sigmoid(logits)


def latent_to_scene(latent):
    latent = np.asarray(latent.data if isinstance(latent, Tensor) else latent, dtype=np.float64)
    if latent.shape != (LATENT_DIM,):
        raise ValueError(f"latent must have shape ({LATENT_DIM},), got {latent.shape}")
    v = scene_vector(latent[None])[0]
    return SceneParams(
        circle_center=(v[0], v[1]), radius=v[2],
        rect_center=(v[3], v[4]), half_extents=(v[5], v[6]),
        circle_color=tuple(v[7:10]), rect_color=tuple(v[10:13]), background=tuple(v[13:16]))


def sample_latent(rng, k=LATENT_DIM, sigma=1.0, n=None):
    """i.i.d. N(0, sigma^2) latent(s); shape (k,) or (n, k)."""
    if k < 1 or sigma < 0:
        raise ValueError("need k >= 1 and sigma >= 0")
    shape = (k,) if n is None else (n, k)
    return sigma * rng.normal(shape)


def _signed_distances(v, res):
    """Circle and rectangle signed distances (positive inside), (N, res, res) each."""
    c = (np.arange(res) + 0.5) / res
    x = c[None, None, :]
    y = c[None, :, None]
    p = v[:, :, None, None]
    sd_c = p[:, 2] - np.sqrt((x - p[:, 0]) ** 2 + (y - p[:, 1]) ** 2)
    sd_r = np.minimum(p[:, 5] - np.abs(x - p[:, 3]), p[:, 6] - np.abs(y - p[:, 4]))
    return sd_c, sd_r


def render(latents, res):
    """Analytic 8-channel render at ``res`` for latents (N, 12) -> (N, 8, res, res)."""
    v = scene_vector(np.atleast_2d(latents))
    sd_c, sd_r = _signed_distances(v, res)
    tau = 2.0 * res
    occ_c = _sigmoid(tau * sd_c)
    occ_r = _sigmoid(tau * sd_r)
    occ_bg = _sigmoid(-tau * np.maximum(sd_c, sd_r))
    col = lambda a, b: v[:, a:b, None, None]
    under = occ_c[:, None] * col(7, 10) + (1.0 - occ_c[:, None]) * col(13, 16)
    color = occ_r[:, None] * col(10, 13) + (1.0 - occ_r[:, None]) * under
    return np.concatenate(
        [color, occ_bg[:, None], occ_c[:, None], occ_r[:, None],
         2.0 * sd_c[:, None], 2.0 * sd_r[:, None]], axis=1)


def ground_truth_labels(params, resolution=IMAGE_RES):
    """Hard z-ordered label map: rectangle (2) over circle (1) over background (0)."""
    if resolution < 4:
        raise ValueError("resolution must be at least 4")
    v = params.as_array()[None] if isinstance(params, SceneParams) else np.atleast_2d(params)
    sd_c, sd_r = _signed_distances(v, resolution)
    lab = np.where(sd_r > 0, 2, np.where(sd_c > 0, 1, 0)).astype(np.int64)
    return lab[0] if isinstance(params, SceneParams) else lab


def labels_for_latents(latents, resolution=IMAGE_RES):
    return ground_truth_labels(scene_vector(np.atleast_2d(latents)), resolution)


# ------------------------------------------------------------------ interface

class GeneratorModel(Module):
    """Staged generator: ``phi_1 = first(l)``, ``phi_j = stage(j, l, phi_{j-1})``, image = head(phi_n)."""

    n_stages = N_STAGES
    activation_shapes = ACTIVATION_SHAPES
    latent_dim = LATENT_DIM

    def first(self, latents):
        raise NotImplementedError

    def stage(self, j, latents, prev):
        raise NotImplementedError

    def head(self, phi):
        raise NotImplementedError

    def generate(self, latents):
        """Batched forward: latents (N, k) -> (image Tensor, [phi_1..phi_n])."""
        latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
        if latents.shape[1] != self.latent_dim:
            raise ValueError(f"latent dimension {latents.shape[1]} != {self.latent_dim}")
        phis = [self.first(latents)]
        for j in range(2, self.n_stages + 1):
            phis.append(self.stage(j, latents, phis[-1]))
        return self.head(phis[-1]), phis

    def resume(self, latents, m, phi_m):
        """Image re-generated after substituting stage ``m`` (1-based) with ``phi_m``."""
        latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
        if not 1 <= m <= self.n_stages:
            raise ValueError(f"stage index {m} outside [1, {self.n_stages}]")
        phi = phi_m if isinstance(phi_m, Tensor) else Tensor(phi_m)
        expect = (latents.shape[0],) + tuple(self.activation_shapes[m - 1])
        if phi.shape != expect:
            raise ValueError(f"substituted feature has shape {phi.shape}, expected {expect}")
        for j in range(m + 1, self.n_stages + 1):
            phi = self.stage(j, latents, phi)
        return self.head(phi)


def generate_with_activations(generator, latent):
    """Single latent (k,) -> (image (3, 32, 32) array, list of stage arrays)."""
    image, phis = generator.generate(np.asarray(latent)[None])
    return image.data[0], [p.data[0] for p in phis]


def resume_forward(generator, latent, m, phi_m):
    """Single-sample substitution; differentiable when ``phi_m`` is a tensor of shape (1, ...)."""
    latent = np.asarray(latent)
    if isinstance(phi_m, Tensor):
        if phi_m.ndim == 3:
            phi_m = F.reshape(phi_m, (1,) + phi_m.shape)
        return generator.resume(latent[None] if latent.ndim == 1 else latent, m, phi_m)
    phi = np.asarray(phi_m, dtype=np.float64)
    out = generator.resume(latent[None], m, Tensor(phi[None] if phi.ndim == 3 else phi))
    return out.data[0]


def soft_clamp(x, beta=20.0):
    """Smooth approximation of clip(x, 0, 1)."""
    return F.sub(F.softplus(x, beta), F.softplus(F.sub(x, 1.0), beta))


def _color_head_weight():
    w = np.zeros((3, CHANNELS, 1, 1))
    w[[0, 1, 2], [0, 1, 2]] = 1.0
    return w


class ProceduralGenerator(GeneratorModel):
    """Analytic renderer with Laplacian-pyramid stage coupling.

    ``mode="linear"`` reads the colour channels straight out of the last
    stage; ``mode="nonlinear"`` passes them through :func:`soft_clamp`.
    The generator has no trainable parameters.
    """

    def __init__(self, mode="linear"):
        if mode not in ("linear", "nonlinear"):
            raise ValueError(f"unknown head mode {mode!r}")
        self.mode = mode
        self._head_w = Tensor(_color_head_weight())

    def resolution(self, j):
        return BASE_RES * 2 ** (j - 1)

    def first(self, latents):
        return Tensor(render(latents, BASE_RES))

    def detail(self, j, latents):
        coarse = Tensor(render(latents, self.resolution(j - 1)))
        return render(latents, self.resolution(j)) - F.upsample(coarse, 2, "bilinear").data

    def stage(self, j, latents, prev):
        return F.add(F.upsample(prev, 2, "bilinear"), Tensor(self.detail(j, latents)))

    def head(self, phi):
        img = F.conv2d(phi, self._head_w)
        return soft_clamp(img) if self.mode == "nonlinear" else img

    def describe(self):
        return f"procedural-{self.mode}"


class _NeuralStage(Module):
    def __init__(self, rng, hidden):
        self.conv1 = Conv2d(CHANNELS, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, CHANNELS, 3, rng, gain=1.0)
        self.style = Linear(LATENT_DIM, 2 * CHANNELS, rng, gain=0.1)

    def forward(self, latents, prev):
        h = F.upsample(prev, 2, "nearest")
        h = self.conv2(F.leaky_relu(self.conv1(h)))
        st = self.style(Tensor(latents))
        scale = F.reshape(F.slice_channels(st, 0, CHANNELS), (-1, CHANNELS, 1, 1))
        shift = F.reshape(F.slice_channels(st, CHANNELS, 2 * CHANNELS), (-1, CHANNELS, 1, 1))
        return F.add(F.mul(h, F.add(scale, 1.0)), shift)


class NeuralGenerator(GeneratorModel):
    """Style-modulated conv generator with the procedural stage layout.

    Stage 1 is an affine map l -> 8x4x4; stages 2..4 are nearest upsample,
    conv3x3, leaky ReLU, conv3x3 followed by a per-channel scale/shift
    predicted from the latent.  The head is a learned 1x1 conv to RGB
    (``0.5 * (1 + tanh)`` rescaled in nonlinear mode).
    """

    def __init__(self, rng, mode="linear", hidden=32):
        if mode not in ("linear", "nonlinear"):
            raise ValueError(f"unknown head mode {mode!r}")
        self.mode = mode
        self.hidden = hidden
        self.input = Linear(LATENT_DIM, CHANNELS * BASE_RES * BASE_RES, rng)
        self.stages = [_NeuralStage(rng.spawn(j), hidden) for j in range(2, N_STAGES + 1)]
        self.to_rgb = Conv2d(CHANNELS, 3, 1, rng, gain=1.0)

    def first(self, latents):
        out = self.input(Tensor(latents))
        return F.reshape(out, (-1, CHANNELS, BASE_RES, BASE_RES))

    def stage(self, j, latents, prev):
        return self.stages[j - 2](latents, prev)

    def head(self, phi):
        img = self.to_rgb(phi)
        if self.mode == "nonlinear":
            img = F.mul(F.add(F.tanh(img), 1.0), 0.5)
        return img

    def describe(self):
        return f"neural-{self.mode}"


def generator_loss(student, teacher, latents):
    """Per-sample summed squared error over all stages and the image, batch-averaged."""
    t_img, t_phis = teacher.generate(latents)
    s_img, s_phis = student.generate(latents)
    n = latents.shape[0]
    total = F.squared_l2(F.sub(s_img, t_img.detach()))
    for s, t in zip(s_phis, t_phis):
        total = F.add(total, F.squared_l2(F.sub(s, t.detach())))
    return F.mul(total, 1.0 / n)


def image_mse(student, teacher, latents):
    a, _ = student.generate(latents)
    b, _ = teacher.generate(latents)
    return float(np.mean((a.data - b.data) ** 2))


def distill_neural_generator(proc, steps=5000, rng=None, batch_size=8, lr=3e-3, log=None):
    """Fit a :class:`NeuralGenerator` to ``proc`` on freshly sampled latents.

    Returns the frozen generator; ``log`` (a list) receives ``(step, loss)``.
    """
    from .autodiff import SeededRNG
    if steps < 0:
        raise ValueError("steps must be non-negative")
    rng = rng if rng is not None else SeededRNG(0)
    net = NeuralGenerator(rng.spawn(1), mode=proc.mode)
    data_rng = rng.spawn(2)
    params = net.parameters()
    opt = Adam(params, lr)
    for step in range(steps):
        latents = sample_latent(data_rng, n=batch_size)
        with Tape() as tape:
            loss = generator_loss(net, proc, latents)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"generator distillation diverged at step {step}")
        if log is not None:
            log.append((step, value))
        grads = tape.backward(loss, params)
        opt.step(grads, cosine_lr(step, steps, lr))
    net.requires_grad_(False)
    return net
