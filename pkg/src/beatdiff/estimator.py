"""scikit-learn style front end for the task-switchable beat diffusion model."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .denoiser import DenoiserConfig
from .engine import DiffusionCheckpoint, SynthesisRequest, TrainConfig, TrainingArrays, synthesize_batch, train
from .ingest.dataset import BeatDataset
from .signal import Mask, TaskKind, build_mask
from .spectral import SpectralConfig


class BeatDiffusion(BaseEstimator):
    """One denoiser for generation, gap imputation and next-beat forecasting.

    ``fit(X, y, prev=None)`` takes beats ``X`` of shape (n, L) with values in
    [0, 1], class labels ``y`` ("N", "V", "F") and optionally the preceding
    beat of each row in ``prev`` (NaN rows where there is none). A
    :class:`BeatDataset` may be passed as ``X`` instead, in which case labels
    and predecessors come from the dataset.

    Defaults follow the full-scale settings (T=1000, beta in [1e-4, 0.02],
    lr 1e-3); desk-scale runs shrink ``n_steps`` and the network.
    """

    def __init__(
        self,
        n_fft=64,
        hop=4,
        window="hann",
        n_steps=1000,
        beta_min=1e-4,
        beta_max=0.02,
        spacing="linear",
        variance="beta",
        base_channels=32,
        channel_mults=(1, 2, 2, 4),
        subblocks_per_block=3,
        convs_per_subblock=2,
        d_emb=32,
        emb_channels=1,
        group_norm=False,
        state_skip=True,
        learning_rate=1e-3,
        batch_size=32,
        epochs=10,
        task_weights=(1 / 3, 1 / 3, 1 / 3),
        aux_weight=1.0,
        aux_snr_weight=False,
        ema_decay=0.0,
        paste_observed=True,
        dtype="float32",
        random_state=0,
    ):
        self.n_fft = n_fft
        self.hop = hop
        self.window = window
        self.n_steps = n_steps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.spacing = spacing
        self.variance = variance
        self.base_channels = base_channels
        self.channel_mults = channel_mults
        self.subblocks_per_block = subblocks_per_block
        self.convs_per_subblock = convs_per_subblock
        self.d_emb = d_emb
        self.emb_channels = emb_channels
        self.group_norm = group_norm
        self.state_skip = state_skip
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.task_weights = task_weights
        self.aux_weight = aux_weight
        self.aux_snr_weight = aux_snr_weight
        self.ema_decay = ema_decay
        self.paste_observed = paste_observed
        self.dtype = dtype
        self.random_state = random_state

    def _configs(self):
        spectral = SpectralConfig(self.n_fft, self.hop, self.window)
        denoiser = DenoiserConfig(
            base_channels=self.base_channels,
            channel_mults=tuple(self.channel_mults),
            subblocks_per_block=self.subblocks_per_block,
            convs_per_subblock=self.convs_per_subblock,
            d_emb=self.d_emb,
            emb_channels=self.emb_channels,
            group_norm=self.group_norm,
            state_skip=self.state_skip,
            seed=self.random_state,
        )
        trainer = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            task_weights=tuple(self.task_weights),
            aux_weight=self.aux_weight,
            aux_snr_weight=self.aux_snr_weight,
            ema_decay=self.ema_decay,
            T=self.n_steps,
            beta_min=self.beta_min,
            beta_max=self.beta_max,
            spacing=self.spacing,
            variance=self.variance,
            seed=self.random_state,
            dtype=self.dtype,
        )
        return spectral, denoiser, trainer

    def fit(self, X, y=None, prev=None, checkpoint_dir=None):
        spectral, denoiser, trainer = self._configs()
        if isinstance(X, BeatDataset):
            data = TrainingArrays.from_dataset(X)
        else:
            if y is None:
                raise ValueError("labels are required")
            X = check_array(X, dtype=np.float64)
            if X.min() < 0 or X.max() > 1:
                raise ValueError("beats must be normalized to [0, 1]")
            data = TrainingArrays.from_arrays(X, y, prev)
        self.checkpoint_, self.log_ = train(data, trainer, denoiser, spectral, checkpoint_dir)
        self.beat_length_ = data.X.shape[1]
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint: DiffusionCheckpoint) -> "BeatDiffusion":
        d, s, t = checkpoint.model.cfg, checkpoint.spectral, checkpoint.train or TrainConfig(T=checkpoint.schedule.T)
        est = cls(
            n_fft=s.n_fft, hop=s.hop, window=s.window, n_steps=checkpoint.schedule.T, beta_min=t.beta_min,
            beta_max=t.beta_max, spacing=checkpoint.schedule.spacing, variance=checkpoint.schedule.variance,
            base_channels=d.base_channels, channel_mults=d.channel_mults, subblocks_per_block=d.subblocks_per_block,
            convs_per_subblock=d.convs_per_subblock, d_emb=d.d_emb, emb_channels=d.emb_channels, group_norm=d.group_norm,
            state_skip=d.state_skip,
            learning_rate=t.learning_rate, batch_size=t.batch_size, epochs=t.epochs, task_weights=t.task_weights,
            aux_weight=t.aux_weight, aux_snr_weight=t.aux_snr_weight, ema_decay=t.ema_decay, dtype=t.dtype, random_state=t.seed,
        )
        est.checkpoint_ = checkpoint
        est.beat_length_ = checkpoint.beat_length
        return est

    def save(self, path):
        check_is_fitted(self)
        self.checkpoint_.save(path)

    @classmethod
    def load(cls, path) -> "BeatDiffusion":
        return cls.from_checkpoint(DiffusionCheckpoint.load(path))

    # ------------------------------------------------------------ synthesis

    def sample(self, requests):
        check_is_fitted(self)
        c = self.checkpoint_
        return synthesize_batch(requests, c.model, c.schedule, c.spectral, self.beat_length_, self.paste_observed)

    def _seed(self, random_state, i):
        base = self.random_state if random_state is None else random_state
        return (int(base), i)

    def generate(self, y, random_state=None):
        """One new beat per entry of ``y``."""
        reqs = [SynthesisRequest(TaskKind.GENERATION, lab, seed=self._seed(random_state, i)) for i, lab in enumerate(y)]
        return self.sample(reqs)

    def impute(self, X, masks, y, random_state=None):
        """Fill the gap of each beat; ``masks`` holds :class:`Mask` objects or (start, end) gaps."""
        X = check_array(X, dtype=np.float64)
        ms = [m if isinstance(m, Mask) else build_mask(TaskKind.IMPUTATION, X.shape[1], gap=tuple(m)) for m in masks]
        reqs = [
            SynthesisRequest(TaskKind.IMPUTATION, lab, x, m, self._seed(random_state, i))
            for i, (x, m, lab) in enumerate(zip(X, ms, y))
        ]
        return self.sample(reqs)

    def forecast(self, prev, y, random_state=None):
        """The beat following each row of ``prev``, of class ``y``."""
        prev = check_array(prev, dtype=np.float64)
        reqs = [SynthesisRequest(TaskKind.FORECASTING, lab, x, seed=self._seed(random_state, i)) for i, (x, lab) in enumerate(zip(prev, y))]
        return self.sample(reqs)
