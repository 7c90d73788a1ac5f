"""Toy flow-matching networks.

A FlowModel is a small tanh MLP predicting a 2D velocity from the noisy
sample, a sinusoidal timestep embedding, a class embedding (with a null
slot for the unconditional branch), and - in distilled students - a
guidance-strength embedding initialized to zero so a fresh student starts
exactly at its teacher-conditional behavior.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, embedding
from .data import NULL_CLASS

WIDTH = 128
N_FREQS = 8            # sinusoidal feature pairs
FEAT_DIM = 2 * N_FREQS
TAP_LAYERS = (1, 2)    # hidden layers exposed to the discriminator


def sinusoidal_features(t) -> np.ndarray:
    """(n, 16) sin/cos features at octave frequencies of a scalar in [0,1]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.pi * (2.0 ** np.arange(N_FREQS))
    phase = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


class FlowModel:
    """3-hidden-layer velocity MLP; ``with_w`` adds the guidance embedding."""

    def __init__(self, seed: int, with_w: bool = False, width: int = WIDTH):
        # students (with_w) also receive the jump destination t_end, so the
        # single-phase finetune trains a separate conditioning slot instead
        # of overwriting the phase-boundary jumps few-step sampling uses
        self.with_w = with_w
        self.width = width
        rng = np.random.default_rng(seed)
        H = width

        def lin(fan_in, fan_out):
            return Tensor(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in),
                          requires_grad=True)

        self.params: dict[str, Tensor] = {
            "Wx": lin(2, H), "bx": Tensor(np.zeros(H), requires_grad=True),
            "Wt": lin(FEAT_DIM, H),
            "class_emb": Tensor(0.1 * rng.standard_normal((3, H)),
                                requires_grad=True),
            "W1": lin(H, H), "b1": Tensor(np.zeros(H), requires_grad=True),
            "W2": lin(H, H), "b2": Tensor(np.zeros(H), requires_grad=True),
            "Wo": lin(H, 2), "bo": Tensor(np.zeros(2), requires_grad=True),
        }
        if with_w:
            self.params["Ww"] = Tensor(np.zeros((FEAT_DIM, H)), requires_grad=True)
            self.params["Wte"] = Tensor(np.zeros((FEAT_DIM, H)), requires_grad=True)

    # -- differentiable path ------------------------------------------------

    def forward(self, x: Tensor, t, c, w=None, t_end=None,
                return_features: bool = False):
        """Velocity prediction on the tape; t, c, w, t_end are plain arrays."""
        p = self.params
        tf = Tensor(sinusoidal_features(np.broadcast_to(t, (x.shape[0],))))
        h = x @ p["Wx"] + p["bx"] + tf @ p["Wt"] + embedding(p["class_emb"], c)
        if self.with_w:
            if w is None or t_end is None:
                raise ValueError("distilled model needs w and t_end")
            wf = Tensor(sinusoidal_features(
                np.broadcast_to(np.asarray(w, dtype=np.float64) / 8.0, (x.shape[0],))))
            ef = Tensor(sinusoidal_features(np.broadcast_to(t_end, (x.shape[0],))))
            h = h + wf @ p["Ww"] + ef @ p["Wte"]
        h0 = h.tanh()
        h1 = (h0 @ p["W1"] + p["b1"]).tanh()
        h2 = (h1 @ p["W2"] + p["b2"]).tanh()
        v = h2 @ p["Wo"] + p["bo"]
        if return_features:
            return v, [h0, h1, h2]
        return v

    # -- fast inference path --------------------------------------------------

    def forward_np(self, x: np.ndarray, t, c, w=None, t_end=None,
                   return_features: bool = False):
        """Same computation as forward(), numpy only (bitwise identical)."""
        p = {k: v.data for k, v in self.params.items()}
        tf = sinusoidal_features(np.broadcast_to(t, (len(x),)))
        h = x @ p["Wx"] + p["bx"] + tf @ p["Wt"] + p["class_emb"][np.asarray(c)]
        if self.with_w:
            if w is None or t_end is None:
                raise ValueError("distilled model needs w and t_end")
            wf = sinusoidal_features(
                np.broadcast_to(np.asarray(w, dtype=np.float64) / 8.0, (len(x),)))
            ef = sinusoidal_features(np.broadcast_to(t_end, (len(x),)))
            h = h + wf @ p["Ww"] + ef @ p["Wte"]
        h0 = np.tanh(h)
        h1 = np.tanh(h0 @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        v = h2 @ p["Wo"] + p["bo"]
        if return_features:
            return v, [h0, h1, h2]
        return v

    # -- parameter plumbing ---------------------------------------------------

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            src = np.asarray(arrays[k], dtype=np.float64)
            if src.shape != v.data.shape:
                raise ValueError(f"shape mismatch for '{k}'")
            v.data = src.copy()

    def copy(self) -> "FlowModel":
        twin = FlowModel(seed=0, with_w=self.with_w, width=self.width)
        twin.load_arrays(self.param_arrays())
        return twin

    def init_from(self, other: "FlowModel") -> None:
        """Copy every shared parameter; extra (w) parameters stay zero."""
        for k, v in other.params.items():
            if k in self.params:
                self.params[k].data = v.data.copy()


def null_labels(n: int) -> np.ndarray:
    return np.full(n, NULL_CLASS, dtype=np.int64)


class DiscriminatorHeads:
    """One small relu head per tapped hidden layer, each emitting a scalar."""

    def __init__(self, seed: int, width: int = WIDTH, taps=TAP_LAYERS,
                 hidden: int = 64):
        self.taps = tuple(taps)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for tap in self.taps:
            self.params[f"V1_{tap}"] = Tensor(
                rng.standard_normal((width, hidden)) / np.sqrt(width),
                requires_grad=True)
            self.params[f"c1_{tap}"] = Tensor(np.zeros(hidden), requires_grad=True)
            self.params[f"V2_{tap}"] = Tensor(
                rng.standard_normal((hidden, 1)) / np.sqrt(hidden),
                requires_grad=True)
            self.params[f"c2_{tap}"] = Tensor(np.zeros(1), requires_grad=True)

    def forward(self, features: list) -> list:
        """Per-head scalars for a feature list indexed by hidden layer."""
        outs = []
        for tap in self.taps:
            f = features[tap]
            f = f if isinstance(f, Tensor) else Tensor(f)
            h = (f @ self.params[f"V1_{tap}"] + self.params[f"c1_{tap}"]).relu()
            outs.append(h @ self.params[f"V2_{tap}"] + self.params[f"c2_{tap}"])
        return outs
