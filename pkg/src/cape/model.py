"""Patch-based transformer encoder with a learned dictionary of
compartmental prototypes.

Each block runs multi-head self-attention over the patch sequence, infers a
per-patch softmax mixture over the K prototype embeddings, modulates the
patch representation with the mixture-weighted prototypes (Hadamard), and
finishes with a pre-norm feed-forward block. One reconstruction head serves
masked pretraining and zero-shot forecasting; per-horizon linear heads serve
finetuned forecasting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ROLE_MONO_INC = "mono_inc"
ROLE_MONO_DEC = "mono_dec"
ROLE_INFECTIOUS = "infectious"
ROLE_FREE = "free"
VALID_ROLES = (ROLE_MONO_INC, ROLE_MONO_DEC, ROLE_INFECTIOUS, ROLE_FREE)


def default_roles(K: int) -> list[str]:
    """One increasing, one decreasing, ~6/16 infectious, rest unconstrained."""
    if K < 2:
        return [ROLE_FREE] * K
    n_inf = max(0, round((K - 2) * 6 / 14))
    roles = [ROLE_MONO_INC, ROLE_MONO_DEC] + [ROLE_INFECTIOUS] * n_inf
    roles += [ROLE_FREE] * (K - len(roles))
    return roles


@dataclass
class ModelConfig:
    T: int = 36
    patch_len: int = 4
    d: int = 64
    L: int = 2
    heads: int = 4
    K: int = 16
    horizon: int = 4
    ff_mult: int = 2
    constraint_roles: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.T % self.patch_len != 0:
            raise ValueError(f"T={self.T} not divisible by patch_len={self.patch_len}")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not self.constraint_roles:
            self.constraint_roles = default_roles(self.K)
        if len(self.constraint_roles) != self.K:
            raise ValueError(f"need {self.K} roles, got {len(self.constraint_roles)}")
        for r in self.constraint_roles:
            if r not in VALID_ROLES:
                raise ValueError(f"unknown role {r!r}")

    @property
    def C(self) -> int:
        return self.T // self.patch_len

    def role_indices(self, role: str) -> list[int]:
        return [k for k, r in enumerate(self.constraint_roles) if r == role]

    def to_dict(self) -> dict:
        return {"T": self.T, "patch_len": self.patch_len, "d": self.d,
                "L": self.L, "heads": self.heads, "K": self.K,
                "horizon": self.horizon, "ff_mult": self.ff_mult,
                "constraint_roles": ",".join(self.constraint_roles)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        roles = d.get("constraint_roles", "")
        return cls(T=int(d["T"]), patch_len=int(d["patch_len"]), d=int(d["d"]),
                   L=int(d["L"]), heads=int(d["heads"]), K=int(d["K"]),
                   horizon=int(d["horizon"]), ff_mult=int(d["ff_mult"]),
                   constraint_roles=roles.split(",") if roles else [])


@dataclass
class ForwardOutput:
    final: Tensor                 # (B, C, d)
    mixtures: list[Tensor]        # per layer, each (B, C, K)
    reconstruction: Tensor | None = None  # (B, T)
    forecast: Tensor | None = None        # (B, h)

    def mixture_field(self) -> np.ndarray:
        """Stacked (L, B, C, K) mixture weights as plain arrays."""
        return np.stack([m.data for m in self.mixtures], axis=0)


def mixture_weights(h: Tensor, E: Tensor, W_k: Tensor, W_s: Tensor) -> Tensor:
    """Per-patch softmax over prototypes.

    logits[..., c, k] = (W_k e_k) . (W_s h_c); the softmax normalizes over
    the prototype axis only.
    """
    proj_h = ad.matmul(h, ad.transpose(W_s))          # (..., C, d)
    proj_e = ad.matmul(E, ad.transpose(W_k))          # (K, d)
    logits = ad.matmul(proj_h, ad.transpose(proj_e))  # (..., C, K)
    return ad.softmax(logits, axis=-1)


class CapeModel:
    """Encoder stack plus heads; owns all learnable parameters."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(np.random.SeedSequence((seed, 0xCA9E))))

    # -- parameter management ------------------------------------------------

    def _add(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Tensor(values, requires_grad=True)

    def _linear_init(self, rng, fan_in: int, fan_out: int) -> np.ndarray:
        std = math.sqrt(2.0 / (fan_in + fan_out))
        return rng.normal(0.0, std, size=(fan_in, fan_out))

    def _build(self, rng) -> None:
        cfg = self.config
        d, p, C, K = cfg.d, cfg.patch_len, cfg.C, cfg.K
        self._add("embed.W", self._linear_init(rng, p, d))
        self._add("embed.b", np.zeros(d))
        self._add("embed.pos", rng.normal(0.0, 0.02, size=(C, d)))
        # unit-norm-scale rows keep prototype-similarity logits O(1); larger
        # rows saturate the mixture softmax and stall its gradients
        self._add("prototypes.E", rng.normal(0.0, 1.0 / math.sqrt(d), size=(K, d)))
        ff = cfg.ff_mult * d
        for i in range(cfg.L):
            for w in ("Wq", "Wk", "Wv", "Wo"):
                self._add(f"layer{i}.attn.{w}", self._linear_init(rng, d, d))
            self._add(f"layer{i}.attn.b", np.zeros(d))
            self._add(f"layer{i}.ln1.g", np.ones(d))
            self._add(f"layer{i}.ln1.b", np.zeros(d))
            self._add(f"layer{i}.mix.Wk", self._linear_init(rng, d, d))
            self._add(f"layer{i}.mix.Ws", self._linear_init(rng, d, d))
            self._add(f"layer{i}.mix.Wf", self._linear_init(rng, d, d))
            self._add(f"layer{i}.ln2.g", np.ones(d))
            self._add(f"layer{i}.ln2.b", np.zeros(d))
            self._add(f"layer{i}.ff.W1", self._linear_init(rng, d, ff))
            self._add(f"layer{i}.ff.b1", np.zeros(ff))
            self._add(f"layer{i}.ff.W2", self._linear_init(rng, ff, d))
            self._add(f"layer{i}.ff.b2", np.zeros(d))
        self._add("recon.W", self._linear_init(rng, d, p))
        self._add("recon.b", np.zeros(p))
        self._add("calib", np.array([1.0, 0.0, 1.0, 0.0]))  # scale/shift lo, hi
        self.add_forecast_head(cfg.horizon)

    def add_forecast_head(self, horizon: int) -> None:
        """Create the linear head for one horizon if absent (deterministic
        in (seed, horizon), so load order does not matter)."""
        name = f"forecast{horizon}.W"
        if name in self.params:
            return
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0xF0, horizon)))
        cfg = self.config
        self._add(name, self._linear_init(rng, cfg.C * cfg.d, horizon))
        self._add(f"forecast{horizon}.b", np.zeros(horizon))

    def init_forecast_head_from_recon(self, horizon: int) -> None:
        """Warm-start a forecast head from the reconstruction head: the last
        patch's block predicts the first min(h, patch_len) steps."""
        self.add_forecast_head(horizon)
        cfg = self.config
        w = np.zeros((cfg.C * cfg.d, horizon))
        n = min(horizon, cfg.patch_len)
        w[(cfg.C - 1) * cfg.d:, :n] = self.params["recon.W"].data[:, :n]
        self.params[f"forecast{horizon}.W"] = Tensor(w, requires_grad=True)
        b = np.zeros(horizon)
        b[:n] = self.params["recon.b"].data[:n]
        self.params[f"forecast{horizon}.b"] = Tensor(b, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def clone(self) -> "CapeModel":
        out = CapeModel(self.config, seed=self.seed)
        out.params = {n: Tensor(t.data.copy(), requires_grad=True)
                      for n, t in self.params.items()}
        return out

    def prototype_param_names(self) -> list[str]:
        return ["prototypes.E"]

    def encoder_param_names(self) -> list[str]:
        return [n for n in self.params if n != "prototypes.E"]

    # -- forward pieces -------------------------------------------------------

    def embed_patches(self, x: np.ndarray) -> Tensor:
        """(B, T) series -> (B, C, d) patch embeddings with positions."""
        cfg = self.config
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != cfg.T:
            raise ValueError(f"expected length {cfg.T}, got {x.shape[-1]}")
        patches = Tensor(x.reshape(x.shape[0], cfg.C, cfg.patch_len))
        emb = ad.add(ad.matmul(patches, self.params["embed.W"]),
                     self.params["embed.b"])
        emb = ad.add(emb, self.params["embed.pos"])
        if squeeze:
            emb = ad.reshape(emb, (cfg.C, cfg.d))
        return emb

    def _attention(self, x: Tensor, i: int) -> Tensor:
        cfg = self.config
        B, C, d = x.shape
        H = cfg.heads
        dh = d // H
        normed = ad.layer_norm(x, self.params[f"layer{i}.ln1.g"],
                               self.params[f"layer{i}.ln1.b"])

        def split_heads(t):
            t = ad.reshape(t, (B, C, H, dh))
            return ad.transpose(t, (0, 2, 1, 3))  # (B, H, C, dh)

        q = split_heads(ad.matmul(normed, self.params[f"layer{i}.attn.Wq"]))
        k = split_heads(ad.matmul(normed, self.params[f"layer{i}.attn.Wk"]))
        v = split_heads(ad.matmul(normed, self.params[f"layer{i}.attn.Wv"]))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                        1.0 / math.sqrt(dh))
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)       # (B, H, C, dh)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, C, d))
        out = ad.add(ad.matmul(ctx, self.params[f"layer{i}.attn.Wo"]),
                     self.params[f"layer{i}.attn.b"])
        return ad.add(x, out)

    def block_forward(self, x: Tensor, i: int,
                      ablate_attention: bool = False) -> tuple[Tensor, Tensor]:
        """One encoder block: attention, mixture inference, prototype
        modulation, feed-forward. Returns (next representation, mixture)."""
        h = x if ablate_attention else self._attention(x, i)
        pi = mixture_weights(h, self.params["prototypes.E"],
                             self.params[f"layer{i}.mix.Wk"],
                             self.params[f"layer{i}.mix.Ws"])
        # sum_k pi_k (h . e_k) factors into h . (pi @ E)
        mixed = ad.mul(h, ad.matmul(pi, self.params["prototypes.E"]))
        u = ad.matmul(mixed, self.params[f"layer{i}.mix.Wf"])
        normed = ad.layer_norm(u, self.params[f"layer{i}.ln2.g"],
                               self.params[f"layer{i}.ln2.b"])
        hidden = ad.relu(ad.add(ad.matmul(normed, self.params[f"layer{i}.ff.W1"]),
                                self.params[f"layer{i}.ff.b1"]))
        ffo = ad.add(ad.matmul(hidden, self.params[f"layer{i}.ff.W2"]),
                     self.params[f"layer{i}.ff.b2"])
        return ad.add(u, ffo), pi

    def encode(self, x: np.ndarray, mask: np.ndarray | None = None,
               ablate_attention: bool = False) -> tuple[Tensor, list[Tensor]]:
        """Run the full stack on (B, T) input; mask (B, C) zero-fills patches
        before embedding."""
        cfg = self.config
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (x.shape[0], cfg.C):
                raise ValueError(f"mask shape {mask.shape} != {(x.shape[0], cfg.C)}")
            patched = x.reshape(x.shape[0], cfg.C, cfg.patch_len).copy()
            patched[mask] = 0.0
            x = patched.reshape(x.shape[0], cfg.T)
        rep = self.embed_patches(x)
        mixtures = []
        for i in range(cfg.L):
            rep, pi = self.block_forward(rep, i, ablate_attention)
            mixtures.append(pi)
        return rep, mixtures

    def forward(self, x: np.ndarray, mode: str = "pretrain",
                mask: np.ndarray | None = None, horizon: int | None = None,
                ablate_attention: bool = False) -> ForwardOutput:
        cfg = self.config
        if mode not in ("pretrain", "forecast"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "pretrain" and mask is None:
            raise ValueError("pretrain mode requires a mask")
        final, mixtures = self.encode(x, mask, ablate_attention)
        out = ForwardOutput(final=final, mixtures=mixtures)
        B = final.shape[0]
        if mode == "pretrain":
            rec = ad.add(ad.matmul(final, self.params["recon.W"]),
                         self.params["recon.b"])
            out.reconstruction = ad.reshape(rec, (B, cfg.T))
        else:
            h = horizon if horizon is not None else cfg.horizon
            name = f"forecast{h}.W"
            if name not in self.params:
                raise ValueError(f"no forecast head for horizon {h}; "
                                 "call add_forecast_head first")
            flat = ad.reshape(final, (B, cfg.C * cfg.d))
            out.forecast = ad.add(ad.matmul(flat, self.params[name]),
                                  self.params[f"forecast{h}.b"])
        return out

    # -- prototype-side utilities ---------------------------------------------

    def mixture_estimator(self, H: Tensor) -> Tensor:
        """Patch-averaged softmax similarity of embeddings (C, d) against the
        prototype dictionary: returns a (K,) point on the simplex."""
        logits = ad.matmul(H, ad.transpose(self.params["prototypes.E"]))
        return ad.tmean(ad.softmax(logits, axis=-1), axis=0)

    def dfe_embedding(self) -> tuple[Tensor, Tensor]:
        """Encode the zero-infection series; return its (C, d) embedding and
        the patch-averaged prototype mixture at that baseline."""
        cfg = self.config
        final, _ = self.encode(np.zeros(cfg.T))
        e_dfe = ad.reshape(final, (cfg.C, cfg.d))
        return e_dfe, self.mixture_estimator(e_dfe)

    def zero_shot_forecast(self, x: np.ndarray, horizon: int | None = None) -> np.ndarray:
        """Frozen-weights forecast: mask the final patch and read the
        reconstruction head's output there.

        Horizons beyond one patch roll the window forward on its own
        predictions, so errors compound with each extra patch.
        """
        cfg = self.config
        x = np.asarray(x, dtype=float).reshape(-1)
        if len(x) != cfg.T:
            raise ValueError(f"expected length {cfg.T}, got {len(x)}")
        h = horizon if horizon is not None else cfg.patch_len
        window = x.copy()
        preds: list[float] = []
        while len(preds) < h:
            mask = np.zeros((1, cfg.C), dtype=bool)
            mask[0, -1] = True
            out = self.forward(window[None, :], mode="pretrain", mask=mask)
            patch = out.reconstruction.data[0, -cfg.patch_len:]
            preds.extend(patch.tolist())
            window = np.concatenate([window[cfg.patch_len:], patch])
        return np.array(preds[:h])
