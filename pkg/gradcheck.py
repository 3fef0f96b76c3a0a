"""
Gradient certification: analytic gradients against central differences.

Loss checks draw random logits and targets on grids from 1x2 to 16x16.
Network checks differentiate loss(softmax(forward(model, image))) with
respect to every weight and bias of a small three-conv model.
"""

from typing import List, Tuple

import numpy as np

from core import PixelDistribution, softmax
from errors import InvalidInputError
from instrumentation import gradcheck_max_relative_error
from losses import finite_diff_grad, loss_grad, loss_value, relative_error
from models import GradcheckReport, LayerKind, LayerSpec, LossKind, LossSpec
from net import FcnModel, backward, forward

LOSS_TOLERANCE = 1e-5
NET_TOLERANCE = 1e-4
# TV trials keep every |p_i - g_i| at least this far from its kink
TV_KINK_MARGIN = 1e-6


def _random_instance(rng: np.random.Generator, spec: LossSpec, h: float) -> Tuple[np.ndarray, PixelDistribution]:
    while True:
        height, width = rng.integers(1, 17, size=2)
        if height * width < 2:
            width = 2
        logits = rng.standard_normal((height, width))
        g = softmax(rng.standard_normal((height, width)))
        if spec.kind != LossKind.tv:
            return logits, g
        p = softmax(logits).values
        # A step of h moves no p_i by more than h * max(p)
        if np.min(np.abs(p - g.values)) >= max(TV_KINK_MARGIN, 10 * h * p.max()):
            return logits, g


def check_loss_gradients(
    spec: LossSpec, trials: int = 100, seed: int = 0, h: float = 1e-5
) -> GradcheckReport:
    """Worst relative error of loss_grad against finite_diff_grad over random trials"""
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        logits, g = _random_instance(rng, spec, h)
        analytic = loss_grad(spec, softmax(logits), g)
        numeric = finite_diff_grad(spec, logits, g, h=h)
        worst = max(worst, relative_error(analytic, numeric))

    gradcheck_max_relative_error.labels(loss=spec.kind.value).set(worst)
    return GradcheckReport(
        target="loss",
        loss=spec.kind,
        trials=trials,
        h=h,
        seed=seed,
        max_rel_error=worst,
        tolerance=LOSS_TOLERANCE,
        passed=worst <= LOSS_TOLERANCE,
    )


def toy_layers() -> List[LayerSpec]:
    """Conv 1->4 (3x3), ReLU, pool, conv 4->4 (3x3), ReLU, conv 4->1 (1x1)"""
    return [
        LayerSpec(kind=LayerKind.conv, in_channels=1, out_channels=4, kernel_size=3),
        LayerSpec(kind=LayerKind.relu),
        LayerSpec(kind=LayerKind.maxpool),
        LayerSpec(kind=LayerKind.conv, in_channels=4, out_channels=4, kernel_size=3),
        LayerSpec(kind=LayerKind.relu),
        LayerSpec(kind=LayerKind.conv, in_channels=4, out_channels=1, kernel_size=1),
    ]


def _flatten(model: FcnModel) -> List[np.ndarray]:
    params = []
    for index in model.conv_indices():
        params.extend([model.weights[index], model.biases[index]])
    return params


def check_model_gradients(
    spec: LossSpec, seed: int = 0, h: float = 1e-6, size: int = 16
) -> GradcheckReport:
    """
    Backprop gradients of the toy model against central differences over
    every parameter, on a random size x size image and target.
    """
    if not 1e-7 <= h <= 1e-3:
        raise InvalidInputError(f"Step h={h} outside [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    model = FcnModel.initialize(toy_layers(), seed=seed)
    for index in model.conv_indices():
        model.biases[index][...] = 0.1 * rng.standard_normal(model.biases[index].shape)
    image = rng.standard_normal((1, size, size))
    d = model.downsample_factor
    g = softmax(rng.standard_normal((size // d, size // d)))

    def objective() -> float:
        return loss_value(spec, softmax(forward(model, image)), g)

    upstream = loss_grad(spec, softmax(forward(model, image)), g)
    grads = backward(model, image, upstream)
    analytic = []
    for index in model.conv_indices():
        analytic.extend(grads[index])

    numeric = []
    for param in _flatten(model):
        grad = np.zeros_like(param)
        for position in np.ndindex(param.shape):
            original = param[position]
            param[position] = original + h
            plus = objective()
            param[position] = original - h
            minus = objective()
            param[position] = original
            grad[position] = (plus - minus) / (2.0 * h)
        numeric.append(grad)

    worst = relative_error(
        np.concatenate([a.ravel() for a in analytic]),
        np.concatenate([n.ravel() for n in numeric]),
    )
    gradcheck_max_relative_error.labels(loss=spec.kind.value).set(worst)
    return GradcheckReport(
        target="net",
        loss=spec.kind,
        trials=sum(p.size for p in _flatten(model)),
        h=h,
        seed=seed,
        max_rel_error=worst,
        tolerance=NET_TOLERANCE,
        passed=worst <= NET_TOLERANCE,
    )
