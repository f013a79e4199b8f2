"""Action-discriminative Grad-CAM on the last convolutional activations.

For action a with pre-softmax score h^a and final activations L (K channels,
Z spatial positions)::

    alpha_k = (1 / Z) * sum_ij  d h^a / d L^k_ij
    map     = ReLU(sum_k alpha_k * L^k)

The map is upsampled bilinearly to the 84x84 input and added to the red
channel of the newest stacked frame for display.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .networks import PolicyValueNet, net_forward
from .tensor import Tensor

INPUT_SIZE = 84


class ActivationMap(NamedTuple):
    map: np.ndarray
    action: int
    upsampled: np.ndarray


def importance_from_head(head: Callable[[Tensor], Tensor], activations: np.ndarray, action: int) -> np.ndarray:
    """alpha for a head mapping a [1, K, H, W] activation batch to [1, A] scores."""
    acts = Tensor(np.asarray(activations)[None], requires_grad=True)
    with T.Tape() as tape:
        scores = head(acts)
        if not 0 <= action < scores.shape[-1]:
            raise ValueError(f"action {action} out of range for {scores.shape[-1]} actions")
        h = scores[0, action]
    if id(h) not in tape._produced:
        return np.zeros(acts.shape[1], dtype=acts.dtype)
    (grad,) = tape.gradient(h, [acts])
    return grad[0].mean(axis=(1, 2))


def neuron_importance(net: PolicyValueNet, obs, action: int, activations: np.ndarray | None = None) -> np.ndarray:
    """Per-channel importance of the H3 activations for `action`'s logit."""
    if not 0 <= action < net.num_actions:
        raise ValueError(f"action {action} out of range for {net.num_actions} actions")
    if activations is None:
        activations = net_forward(net, obs).activations.data
    return importance_from_head(lambda a: net.head(a)[0], activations, action)


def action_map(alpha: np.ndarray, activations: np.ndarray, action: int = -1, size: int = INPUT_SIZE) -> ActivationMap:
    """Rectified importance-weighted channel sum and its bilinear upsampling."""
    alpha = np.asarray(alpha)
    activations = np.asarray(activations)
    if activations.ndim != 3 or alpha.shape != activations.shape[:1]:
        raise ValueError(f"alpha {alpha.shape} does not match activations {activations.shape}")
    weighted = np.tensordot(alpha, activations, axes=1)
    cam = np.maximum(weighted, 0.0)
    up = T.bilinear_resize(Tensor(cam), size, size).data
    return ActivationMap(cam, action, np.maximum(up, 0.0))


def grad_cam(net: PolicyValueNet, obs, action: int | None = None) -> ActivationMap:
    """Grad-CAM for one observation; defaults to the greedy action."""
    out = net_forward(net, obs)
    if action is None:
        action = int(np.argmax(out.logits.data))
    alpha = neuron_importance(net, obs, action, out.activations.data)
    return action_map(alpha, out.activations.data, action)


def normalize_map(upsampled: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 255]; a flat map becomes all zeros."""
    lo, hi = float(upsampled.min()), float(upsampled.max())
    if hi - lo <= 0:
        return np.zeros(upsampled.shape, dtype=np.uint8)
    return np.rint((upsampled - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render_overlay(amap: ActivationMap, obs) -> np.ndarray:
    """Newest frame as grey RGB bytes with the map saturating-added to red."""
    obs = np.asarray(obs.data if isinstance(obs, Tensor) else obs)
    base = np.rint(np.clip(obs[-1], 0.0, 1.0) * 255.0).astype(np.uint8)
    if base.shape != amap.upsampled.shape:
        raise ValueError(f"map {amap.upsampled.shape} does not match frame {base.shape}")
    img = np.repeat(base[:, :, None], 3, axis=2)
    red = base.astype(np.uint16) + normalize_map(amap.upsampled)
    img[:, :, 0] = np.minimum(red, 255).astype(np.uint8)
    return img


def peak_location(amap: ActivationMap) -> tuple[int, int]:
    r, c = np.unravel_index(int(np.argmax(amap.upsampled)), amap.upsampled.shape)
    return int(r), int(c)
