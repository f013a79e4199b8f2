"""scikit-learn style wrappers around training, inference and Grad-CAM.

PPOAgent learns from its environment rather than from (X, y), so ``fit``
ignores its arguments; ``predict`` and ``predict_proba`` act on stacked
observations. FramePreprocessor and GradCAM are stateless transformers.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import tensor as T
from ._validation import check_frames, check_observations, check_positive_int
from .checkpoint import load_checkpoint, save_checkpoint
from .envs import to_grayscale_resize
from .gradcam import grad_cam
from .networks import NetworkVariant, PolicyValueNet
from .ppo import PPOConfig, evaluate_policy, train


class PPOAgent(BaseEstimator):
    def __init__(
        self,
        variant="SAN",
        env="blinkingchase",
        env_params=None,
        total_timesteps=200_000,
        seed=0,
        learning_rate=2.5e-4,
        epochs=4,
        minibatches=4,
        horizon=128,
        workers=8,
        clip_eps=0.1,
        gamma=0.99,
        gae_lambda=0.95,
        entropy_coef=0.01,
        value_coef=0.5,
        max_grad_norm=0.5,
    ):
        self.variant = variant
        self.env = env
        self.env_params = env_params
        self.total_timesteps = total_timesteps
        self.seed = seed
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.minibatches = minibatches
        self.horizon = horizon
        self.workers = workers
        self.clip_eps = clip_eps
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.entropy_coef = entropy_coef
        self.value_coef = value_coef
        self.max_grad_norm = max_grad_norm

    def ppo_config(self) -> PPOConfig:
        names = set(PPOConfig.field_names())
        return PPOConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X=None, y=None, metrics_path=None):
        NetworkVariant.parse(self.variant)
        check_positive_int(self.total_timesteps, "total_timesteps")
        result = train(self.variant, self.env, self.ppo_config(), self.seed, env_params=self.env_params, metrics_path=metrics_path)
        self.net_ = result.net
        self.metrics_ = result.metrics
        self.n_actions_ = result.net.num_actions
        return self

    def _net(self) -> PolicyValueNet:
        if not hasattr(self, "net_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted; call fit or load first")
        return self.net_

    def predict_proba(self, X) -> np.ndarray:
        net = self._net()
        X, single = check_observations(X, net.dtype)
        probs = T.softmax(net(X).logits).data
        return probs[0] if single else probs

    def predict(self, X) -> np.ndarray:
        """Greedy actions."""
        probs = np.atleast_2d(self.predict_proba(X))
        actions = probs.argmax(axis=1)
        return actions[0] if np.asarray(X).ndim == 3 else actions

    def score(self, X=None, y=None, episodes=10, greedy=False) -> float:
        """Mean episode return; X and y are ignored."""
        return evaluate_policy(self._net(), self.env, episodes, self.seed + 10_000, greedy=greedy, env_params=self.env_params).mean

    def save(self, path) -> None:
        save_checkpoint(path, self._net())

    @classmethod
    def load(cls, path, **params) -> "PPOAgent":
        ckpt = load_checkpoint(path, params.get("variant"))
        params.setdefault("variant", ckpt.variant)
        agent = cls(**params)
        agent.net_ = ckpt.to_network()
        agent.n_actions_ = ckpt.num_actions
        return agent


class FramePreprocessor(TransformerMixin, BaseEstimator):
    """Raw RGB frames [N, H, W, 3] to grayscale [N, size, size] in [0, 1]."""

    def __init__(self, size=84):
        self.size = size

    def fit(self, X, y=None):
        check_frames(X)
        check_positive_int(self.size, "size")
        return self

    def transform(self, X) -> np.ndarray:
        X, single = check_frames(X)
        out = np.stack([to_grayscale_resize(f, self.size) for f in X])
        return out[0] if single else out


class GradCAM(TransformerMixin, BaseEstimator):
    """Observations [N, 4, 84, 84] to upsampled action maps [N, 84, 84].

    ``agent`` is a fitted PPOAgent; ``action`` None explains each
    observation's greedy action.
    """

    def __init__(self, agent=None, action=None):
        self.agent = agent
        self.action = action

    def fit(self, X=None, y=None):
        if self.agent is None:
            raise ValueError("GradCAM needs a fitted PPOAgent")
        self.agent._net()
        return self

    def transform(self, X) -> np.ndarray:
        net = self.agent._net() if self.agent is not None else None
        if net is None:
            raise NotFittedError("GradCAM has no agent")
        X, single = check_observations(X, net.dtype)
        cams = [grad_cam(net, obs, self.action) for obs in X]
        self.actions_ = np.array([c.action for c in cams])
        maps = np.stack([c.upsampled for c in cams])
        return maps[0] if single else maps
