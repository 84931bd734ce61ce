"""scikit-learn style front end for the routed diffusion transformer."""

from __future__ import annotations

import logging
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as tc
from .data import to_model_range, to_pixel_range
from .diffusion import StepResult, draw_batch, make_schedule, q_sample, sample, training_step
from .metrics import TrajectoryLog
from .model import ModelConfig, init_params, model_forward
from .ratio import RatioTable, batch_mean_ratio, snap_for_inference
from .routing import init_routers
from .validation import check_classes, check_images, check_timesteps

log = logging.getLogger(__name__)

STEP_KEY = "train/step"


class DiffCRDiT(BaseEstimator):
    """Class-conditional DiT with learned per-layer, per-timestep-region
    token-routing ratios.

    ``fit`` trains on images in pixel range [0, 1]; ``sample`` generates
    new ones. With ``routing=False`` the routers and ratio table are
    skipped and a plain dense DiT is trained.
    """

    def __init__(self, image_side=16, patch_side=2, hidden_dim=64, heads=4, layers=8,
                 mlp_ratio=4, n_classes=10, train_timesteps=200, sample_steps=50, regions=4,
                 target_ratio=0.3, ratio_loss_coeff=0.3, ratio_loss_coeff_end=None,
                 cfg_scale=4.5, routing=True, learning_rate=1e-3, weight_decay=3e-2,
                 batch_size=32, steps=2000, uncond_prob=0.1, beta_start=None, beta_end=None,
                 log_every=10, random_state=0):
        self.image_side = image_side
        self.patch_side = patch_side
        self.hidden_dim = hidden_dim
        self.heads = heads
        self.layers = layers
        self.mlp_ratio = mlp_ratio
        self.n_classes = n_classes
        self.train_timesteps = train_timesteps
        self.sample_steps = sample_steps
        self.regions = regions
        self.target_ratio = target_ratio
        self.ratio_loss_coeff = ratio_loss_coeff
        self.ratio_loss_coeff_end = ratio_loss_coeff_end
        self.cfg_scale = cfg_scale
        self.routing = routing
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.steps = steps
        self.uncond_prob = uncond_prob
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.log_every = log_every
        self.random_state = random_state

    # -- configuration -----------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_side=self.image_side, patch_side=self.patch_side, hidden_dim=self.hidden_dim,
            heads=self.heads, layers=self.layers, mlp_ratio=self.mlp_ratio,
            classes=self.n_classes, train_timesteps=self.train_timesteps,
            sample_steps=self.sample_steps, regions=self.regions,
            target_ratio=self.target_ratio, ratio_loss_coeff=self.ratio_loss_coeff,
            cfg_scale=self.cfg_scale)

    def schedule(self):
        return make_schedule(self.train_timesteps, self.beta_start, self.beta_end)

    def ratio_coeff_at(self, step: int) -> float:
        """Ratio-loss weight at 1-based ``step``; linear ramp when an end value is set."""
        if self.ratio_loss_coeff_end is None or self.steps <= 1:
            return self.ratio_loss_coeff
        frac = (step - 1) / (self.steps - 1)
        return self.ratio_loss_coeff + frac * (self.ratio_loss_coeff_end - self.ratio_loss_coeff)

    def initialize(self) -> "DiffCRDiT":
        """Fresh weights, zero ratio table, empty optimizer state."""
        config = self.model_config()
        rng = tc.Rng(self.random_state)
        params = init_params(config, rng)
        if self.routing:
            params.update(init_routers(config.layers, config.hidden_dim))
            self.ratio_table_ = RatioTable(config.layers, config.regions)
        else:
            self.ratio_table_ = None
        self.params_ = params
        self.opt_state_ = {}
        self.n_steps_ = 0
        self.history_: list[StepResult] = []
        self.trajectory_ = TrajectoryLog()
        return self

    # -- training ----------------------------------------------------------

    def fit(self, X, y=None, callback: Optional[Callable[["DiffCRDiT", int], None]] = None):
        """Train for ``steps`` minibatch steps on images ``X`` with labels ``y``.

        ``callback(self, step)`` runs after every step.
        """
        X = check_images(X, self.image_side)
        y = check_classes(y, len(X), self.n_classes)
        self.initialize()
        return self._train(to_model_range(X), y, self.steps, callback)

    def _train(self, X: np.ndarray, y: np.ndarray, n_steps: int, callback) -> "DiffCRDiT":
        config = self.model_config()
        schedule = self.schedule()
        rng = tc.Rng(self.random_state)
        for _ in range(n_steps):
            step = self.n_steps_ + 1
            batch = draw_batch(X, y, rng, step, self.batch_size, config.train_timesteps,
                               null_class=config.classes, uncond_prob=self.uncond_prob)
            res = training_step(self.params_, self.ratio_table_, self.opt_state_, batch, config,
                                schedule, lr=self.learning_rate, weight_decay=self.weight_decay,
                                ratio_coeff=self.ratio_coeff_at(step))
            self.n_steps_ = step
            self.history_.append(res)
            if self.log_every and step % self.log_every == 0:
                self._log_trajectory(step, res)
            if callback is not None:
                callback(self, step)
        return self

    def _log_trajectory(self, step: int, res: StepResult) -> None:
        table = None if self.ratio_table_ is None else self.ratio_table_.numpy()
        self.trajectory_.append(step, table, res)
        log.info("step %d loss %.5f diffusion %.5f ratio %.6f mean ratio %.4f",
                 step, res.total, res.diffusion, res.ratio, res.batch_mean_ratio)

    # -- inference ---------------------------------------------------------

    def snapped_table(self) -> Optional[RatioTable]:
        check_is_fitted(self, "params_")
        return None if self.ratio_table_ is None else snap_for_inference(self.ratio_table_)

    def mean_ratio(self) -> float:
        """Mean continuous ratio over layers and all timesteps (regions weighted by size)."""
        check_is_fitted(self, "params_")
        if self.ratio_table_ is None:
            return 0.0
        return batch_mean_ratio(self.ratio_table_, np.arange(self.train_timesteps), self.train_timesteps)

    def predict(self, X_t, t, y=None, dense: bool = False) -> np.ndarray:
        """Predicted noise for noised images ``X_t`` (model range) at timesteps ``t``."""
        check_is_fitted(self, "params_")
        X_t = check_images(X_t, self.image_side)
        t = check_timesteps(t, len(X_t), self.train_timesteps)
        y = check_classes(y, len(X_t), self.n_classes, allow_null=True)
        table = None if dense else self.snapped_table()
        return model_forward(self.params_, self.model_config(), X_t, t, y, ratios=table, mode="infer").data

    def sample(self, n_samples: int = 1, y=None, random_state: int = 0, dense: bool = False,
               cfg_scale: Optional[float] = None, steps: Optional[int] = None) -> np.ndarray:
        """Generate ``n_samples`` images (pixel range) with snapped ratios."""
        check_is_fitted(self, "params_")
        y = check_classes(y, n_samples, self.n_classes)
        table = None if dense else self.snapped_table()
        out = sample(self.params_, self.model_config(), table, y, steps=steps, cfg_scale=cfg_scale,
                     seed=random_state, schedule=self.schedule())
        return to_pixel_range(out)

    def router_maps(self, X, timesteps, y=None, random_state: int = 0) -> dict:
        """Router score maps ``{(layer, t): (grid, grid) array}`` for one image.

        The image (pixel range) is noised to each timestep with seeded noise
        and pushed through the inference forward.
        """
        check_is_fitted(self, "params_")
        X = check_images(X, self.image_side)[:1]
        config = self.model_config()
        y = check_classes(y, 1, self.n_classes, allow_null=True)
        schedule = self.schedule()
        table = self.snapped_table()
        maps = {}
        for t in timesteps:
            eps = tc.Rng(random_state).generator("maps", int(t)).standard_normal(X.shape)
            x_t = q_sample(to_model_range(X), np.array([t]), eps, schedule)
            scores: dict = {}
            if table is None:
                raise ValueError("router maps need a routed model (routing=True)")
            model_forward(self.params_, config, x_t, t, y, ratios=table, mode="infer", scores_out=scores)
            for layer, s in scores.items():
                maps[(layer, int(t))] = s[0].reshape(config.grid, config.grid)
        return maps

    # -- state -------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every learned or optimizer array by name, in a stable order."""
        check_is_fitted(self, "params_")
        out = {f"param/{k}": v.data for k, v in self.params_.items()}
        if self.ratio_table_ is not None:
            out["ratio_table"] = self.ratio_table_.numpy()
        for kind in ("m", "v"):
            for k, v in self.opt_state_.get(kind, {}).items():
                out[f"adam_{kind}/{k}"] = v
        out[STEP_KEY] = np.array([self.n_steps_], dtype=np.int64)
        out["train/adam_step"] = np.array([self.opt_state_.get("step", 0)], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict) -> "DiffCRDiT":
        self.initialize()
        expected = set(self.state_arrays()) - {k for k in self.state_arrays() if k.startswith("adam_")}
        missing = expected - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks arrays: {sorted(missing)[:5]}")
        for k, v in self.params_.items():
            src = arrays[f"param/{k}"]
            if src.shape != v.shape:
                raise ValueError(f"{k}: checkpoint shape {src.shape} != model shape {v.shape}")
            v.data = np.array(src, dtype=np.float64)
        if self.ratio_table_ is not None:
            self.ratio_table_.values.data = np.array(arrays["ratio_table"], dtype=np.float64)
        adam_step = int(arrays["train/adam_step"][0])
        if adam_step:
            self.opt_state_ = {"step": adam_step, "m": {}, "v": {}}
            for key, arr in arrays.items():
                for kind in ("m", "v"):
                    pre = f"adam_{kind}/"
                    if key.startswith(pre):
                        self.opt_state_[kind][key[len(pre):]] = np.array(arr, dtype=np.float64)
        self.n_steps_ = int(arrays[STEP_KEY][0])
        return self
