"""
Softmax-paired training losses.

Five probability distances (chi-square, total variation, cosine,
Bhattacharyya, KL) and two regression baselines (Euclidean, Huber), each
with its value and its analytic gradient with respect to the pre-softmax
logits. Gradients are descent-compatible: every loss is minimized.

The Bhattacharyya gradient is often printed with a -1/(2S) factor in front
of the bracket p_i * sum_{j!=i} sqrt(p_j g_j) - sqrt(p_i g_i) * (1 - p_i),
where S = sum_j sqrt(p_j g_j). Differentiating -ln S through the softmax
gives +1/(2S) instead, and the finite-difference oracle agrees; the +1/(2S)
form is what ships here.
"""

import numpy as np
from pydantic import BaseModel, ConfigDict

from core import GridMap, PixelDistribution, as_grid, check_same_shape, softmax, softmax_jvp
from errors import InvalidInputError
from models import LossKind, LossSpec


class LossResult(BaseModel):
    """Loss value together with its gradient w.r.t. the logits"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    value: float
    grad_logits: np.ndarray


def _floored(p: np.ndarray, epsilon: float) -> np.ndarray:
    return np.maximum(p, epsilon)


def loss_value(spec: LossSpec, p: PixelDistribution, g: PixelDistribution) -> float:
    """
    Distance between the predicted distribution p and the target g.

    Args:
        spec: Loss selector and parameters
        p: Predicted distribution
        g: Ground-truth distribution

    Returns:
        Scalar loss; 0 when p == g

    Raises:
        ShapeMismatchError: If p and g differ in shape
    """
    check_same_shape(p.values, g.values, "prediction and ground truth")
    pv, gv = p.values, g.values
    kind = spec.kind

    if kind == LossKind.chi2:
        pf = _floored(pv, spec.epsilon)
        # sum (g - p)^2 / p == sum g^2 / p - 1 for distributions; this form
        # does not cancel catastrophically near p == g.
        return float(np.sum((gv - pf) ** 2 / pf))

    if kind == LossKind.tv:
        return float(0.5 * np.sum(np.abs(gv - pv)))

    if kind == LossKind.cosine:
        norm = np.linalg.norm(pv) * np.linalg.norm(gv)
        return float(max(1.0 - np.sum(pv * gv) / norm, 0.0))

    if kind == LossKind.bhattacharyya:
        coefficient = max(np.sum(np.sqrt(pv * gv)), spec.epsilon)
        return float(max(-np.log(coefficient), 0.0))

    if kind == LossKind.kl:
        pf = _floored(pv, spec.epsilon)
        mask = gv > 0
        return float(max(np.sum(gv[mask] * np.log(gv[mask] / pf[mask])), 0.0))

    if kind == LossKind.euclidean:
        return float(np.sum((pv - gv) ** 2))

    if kind == LossKind.huber:
        a = np.abs(pv - gv)
        delta = spec.huber_delta
        quadratic = 0.5 * a**2
        linear = delta * (a - 0.5 * delta)
        return float(np.sum(np.where(a <= delta, quadratic, linear)))

    raise InvalidInputError(f"Unknown loss kind: {kind}")


def loss_grad(spec: LossSpec, p: PixelDistribution, g: PixelDistribution) -> GridMap:
    """
    Gradient of the loss with respect to the logits that produced p.

    The probability distances use the fused softmax forms; the regression
    losses compute dL/dp and chain it through softmax_jvp.
    """
    check_same_shape(p.values, g.values, "prediction and ground truth")
    pv, gv = p.values, g.values
    kind = spec.kind

    if kind == LossKind.chi2:
        pf = _floored(pv, spec.epsilon)
        ratio = gv**2 / pf
        # p_i * sum_{j!=i} g_j^2/p_j - (g_i^2/p_i)(1 - p_i)
        return pv * np.sum(ratio) - ratio

    if kind == LossKind.tv:
        # sign(0) = 0 at the kinks
        s = np.sign(gv - pv)
        return 0.5 * pv * (np.sum(s * pv) - s)

    if kind == LossKind.cosine:
        p_norm = np.linalg.norm(pv)
        g_norm = np.linalg.norm(gv)
        c = p_norm * g_norm
        r = np.sum(pv * gv) / c
        w = gv - pv * (g_norm / p_norm) * r
        return (pv * np.sum(pv * w) - pv * w) / c

    if kind == LossKind.bhattacharyya:
        root = np.sqrt(pv * gv)
        coefficient = np.sum(root)
        # Disjoint supports give a zero coefficient
        return (pv * coefficient - root) / (2.0 * max(coefficient, spec.epsilon))

    if kind == LossKind.kl:
        return pv - gv

    if kind == LossKind.euclidean:
        return softmax_jvp(p, 2.0 * (pv - gv))

    if kind == LossKind.huber:
        diff = pv - gv
        delta = spec.huber_delta
        upstream = np.where(np.abs(diff) <= delta, diff, delta * np.sign(diff))
        return softmax_jvp(p, upstream)

    raise InvalidInputError(f"Unknown loss kind: {kind}")


def evaluate_logits(spec: LossSpec, logits: GridMap, g: PixelDistribution) -> LossResult:
    """Apply softmax to logits and return loss value and logit gradient"""
    p = softmax(logits)
    return LossResult(value=loss_value(spec, p, g), grad_logits=loss_grad(spec, p, g))


def finite_diff_grad(
    spec: LossSpec, logits: GridMap, g: PixelDistribution, h: float = 1e-5
) -> GridMap:
    """
    Central-difference gradient of loss_value(softmax(logits), g).

    This oracle is the reference for every analytic gradient above.

    Raises:
        InvalidInputError: If h is outside [1e-7, 1e-3]
    """
    if not 1e-7 <= h <= 1e-3:
        raise InvalidInputError(f"Step h={h} outside [1e-7, 1e-3]")

    x = as_grid(logits, "logits").copy()
    check_same_shape(x, g.values, "logits and ground truth")
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + h
        plus = loss_value(spec, softmax(x), g)
        x[index] = original - h
        minus = loss_value(spec, softmax(x), g)
        x[index] = original
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """||a - n|| / max(||a|| + ||n||, floor)"""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = np.linalg.norm(np.ravel(analytic)) + np.linalg.norm(np.ravel(numeric))
    return float(diff / max(scale, floor))
