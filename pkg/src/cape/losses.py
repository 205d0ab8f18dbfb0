"""Training objectives.

Pretraining combines masked reconstruction, a patch-wise contrastive loss
over two crops of the same series, and (weighted by lambda) the
epidemic-aware alignment losses: monotonic hinges on tagged prototypes,
a squared second-difference smoothness penalty, and a hinge keeping the
calibrated reproduction-number bracket inside the disease's plausible range.
Finetuning swaps the self-supervised pair for forecast MSE.

The reproduction-number bracket comes from a next-generation-matrix proxy:
columns of F measure how much mass a small perturbation of one prototype
injects into the others at the zero-infection baseline, columns of V how
mass placed on one prototype redistributes; the bracket is
sigma_min(F)/sigma_max(V) .. sigma_max(F)/sigma_min(V), computed without
ever inverting V, then opened/closed by a learned affine calibration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .linalg import R0Bounds, SingularMatrixError, singular_values_op
from .model import ROLE_INFECTIOUS, ROLE_MONO_DEC, ROLE_MONO_INC, CapeModel

log = logging.getLogger(__name__)

_SING_FLOOR = 1e-10


class DegenerateBatchError(ValueError):
    pass


@dataclass
class LossWeights:
    """Knobs shared by the pretrain and finetune objectives."""
    lambda_align: float = 1e-5      # pretrain default; finetuning uses more
    epsilon_mono: float = 0.01
    alpha_mix: float = 0.1
    perturb_eps: float = 0.05
    r0_range: tuple[float, float] = (0.0, 20.0)
    masked_only: bool = False       # reconstruction over masked patches only
    normalize_contrastive: bool = True
    ngm_subset: str = "all"         # "all" or "infectious"

    def __post_init__(self):
        if self.lambda_align < 0 or self.epsilon_mono <= 0:
            raise ValueError("lambda_align must be >= 0 and epsilon_mono > 0")
        if not 0 < self.alpha_mix < 1:
            raise ValueError("alpha_mix must be in (0, 1)")
        if self.perturb_eps <= 0:
            raise ValueError("perturb_eps must be > 0")
        if self.r0_range[0] > self.r0_range[1]:
            raise ValueError(f"invalid r0_range {self.r0_range}")
        if self.ngm_subset not in ("all", "infectious"):
            raise ValueError(f"unknown ngm_subset {self.ngm_subset!r}")


# ---------------------------------------------------------------------------
# reconstruction

def recon_loss(x_hat: Tensor, x: np.ndarray,
               mask: np.ndarray | None = None,
               masked_only: bool = False) -> Tensor:
    """MSE between reconstruction and original, over every time step by
    default; masked_only restricts it to the zero-filled patches."""
    x = np.asarray(x, dtype=float)
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    diff = ad.sub(x_hat, Tensor(x))
    if masked_only:
        if mask is None:
            raise ValueError("masked_only needs the mask")
        B, T = x.shape
        C = mask.shape[-1]
        step_mask = np.repeat(np.asarray(mask, dtype=float), T // C, axis=-1)
        total = step_mask.sum()
        if total == 0:
            raise ValueError("masked_only with an empty mask")
        return ad.mul(ad.tsum(ad.mul(ad.square(diff), Tensor(step_mask))),
                      1.0 / total)
    return ad.tmean(ad.square(diff))


# ---------------------------------------------------------------------------
# contrastive

def contrastive_loss(X: Tensor, Xp: Tensor, normalize: bool = True) -> Tensor:
    """Patch-wise contrastive objective over two aligned view batches.

    X and Xp are (B, n, d): per sample, the representations of the n
    overlapping patches in each view, index-aligned so (j, c) in both refers
    to the same absolute time span. Per anchor (j, c) the loss pulls the
    cross-view twin closer and pushes away (a) the other samples at the same
    patch, in both views, and (b) the other overlap patches of the same
    sample, in both views. The anchor's own cross-view terms stay in the
    log-sums.
    """
    if X.ndim != 3 or X.shape != Xp.shape:
        raise ValueError(f"expected matching (B, n, d), got {X.shape} vs {Xp.shape}")
    B, n, _ = X.shape
    if B == 1 and n == 1:
        raise DegenerateBatchError("contrastive loss needs more than one "
                                   "sample or more than one overlap patch")
    if normalize:
        X = ad.l2_normalize(X)
        Xp = ad.l2_normalize(Xp)
    pos = ad.tsum(ad.mul(X, Xp), axis=-1)                       # (B, n)

    xt = ad.transpose(X, (1, 0, 2))                             # (n, B, d)
    xpt = ad.transpose(Xp, (1, 0, 2))
    cross_inst = ad.matmul(xt, ad.transpose(xpt, (0, 2, 1)))    # (n, B, B)
    same_inst = ad.matmul(xt, ad.transpose(xt, (0, 2, 1)))
    off_b = Tensor(1.0 - np.eye(B))
    inst = ad.log(ad.add(ad.tsum(ad.exp(cross_inst), axis=-1),
                         ad.tsum(ad.mul(ad.exp(same_inst), off_b), axis=-1)))
    inst = ad.transpose(inst, (1, 0))                           # (B, n)

    cross_tmp = ad.matmul(X, ad.transpose(Xp, (0, 2, 1)))       # (B, n, n)
    same_tmp = ad.matmul(X, ad.transpose(X, (0, 2, 1)))
    off_n = Tensor(1.0 - np.eye(n))
    tmp = ad.log(ad.add(ad.tsum(ad.exp(cross_tmp), axis=-1),
                        ad.tsum(ad.mul(ad.exp(same_tmp), off_n), axis=-1)))

    per_anchor = ad.add(ad.sub(inst, pos), tmp)
    return ad.tmean(per_anchor)


# ---------------------------------------------------------------------------
# prototype-shape regularizers

def monotonic_loss(pi_k: Tensor, direction: str, epsilon: float) -> Tensor:
    """Hinge on first differences of one prototype's weight sequence.

    direction="dec" penalizes increases (and flats, via the epsilon margin);
    "inc" penalizes decreases. pi_k is (C,) or (B, C).
    """
    if direction not in ("inc", "dec"):
        raise ValueError(f"direction must be 'inc' or 'dec', got {direction!r}")
    C = pi_k.shape[-1]
    if C < 2:
        raise ValueError("monotonic loss needs at least 2 patches")
    if pi_k.ndim == 1:
        later, earlier = pi_k[1:], pi_k[:-1]
    else:
        later = pi_k[:, 1:]
        earlier = pi_k[:, :-1]
    step = ad.sub(later, earlier) if direction == "dec" else ad.sub(earlier, later)
    hinge = ad.relu(ad.add(step, epsilon))
    if pi_k.ndim == 1:
        return ad.tmean(hinge)
    return ad.tmean(ad.tmean(hinge, axis=-1))


def smoothness_loss(pi: Tensor) -> Tensor:
    """Sum of squared second differences along the patch axis, all
    prototypes; (C, K) or (B, C, K)."""
    C = pi.shape[-2]
    if C < 3:
        log.warning("smoothness loss needs C >= 3 (got %d); returning 0", C)
        return Tensor(0.0)
    if pi.ndim == 2:
        a, b, c = pi[2:, :], pi[1:-1, :], pi[:-2, :]
    else:
        a, b, c = pi[:, 2:, :], pi[:, 1:-1, :], pi[:, :-2, :]
    curv = ad.add(ad.sub(a, ad.mul(b, 2.0)), c)
    sq = ad.square(curv)
    if pi.ndim == 2:
        return ad.tsum(sq)
    return ad.tmean(ad.tsum(sq, axis=(1, 2)))


# ---------------------------------------------------------------------------
# differentiable reproduction-number proxy

@dataclass
class NgmProxyResult:
    F: Tensor
    V: Tensor
    raw_bounds: R0Bounds
    calibrated_bounds: R0Bounds
    loss: Tensor
    indices: list[int]


def _mix_with_baseline(weights_vec: Tensor, e_dfe: Tensor, E: Tensor,
                       alpha: float) -> Tensor:
    """Blend the baseline embedding with a prototype combination, broadcast
    over all patch rows: (1 - alpha) * E_dfe + alpha * (w @ E)."""
    C = e_dfe.shape[0]
    combo = ad.matmul(ad.reshape(weights_vec, (1, weights_vec.shape[0])), E)
    tiled = ad.matmul(Tensor(np.ones((C, 1))), combo)
    return ad.add(ad.mul(e_dfe, 1.0 - alpha), ad.mul(tiled, alpha))


def ngm_proxy(model: CapeModel, r0_range: tuple[float, float],
              perturb_eps: float = 0.05, alpha: float = 0.1,
              subset: str = "all") -> NgmProxyResult:
    """Build the F/V pair from prototype-space perturbations at the
    zero-infection baseline, bracket the spectral radius by singular-value
    ratios, calibrate with the model's learned affine map, and return the
    range hinge loss.

    Raises SingularMatrixError when V is numerically singular; callers skip
    the loss term for that step.
    """
    cfg = model.config
    K = cfg.K
    if subset == "infectious":
        indices = cfg.role_indices(ROLE_INFECTIOUS)
        if len(indices) < 2:
            raise ValueError("infectious subset needs at least 2 prototypes")
    else:
        indices = list(range(K))
    e_dfe, pi_star = model.dfe_embedding()
    E = model.params["prototypes.E"]

    f_cols = []
    v_cols = []
    for pos, j in enumerate(indices):
        bump = np.zeros(K)
        bump[j] = perturb_eps
        perturbed = ad.add(pi_star, Tensor(bump))
        perturbed = ad.div(perturbed, ad._expand_last(ad.tsum(perturbed), K))
        pi_new = model.mixture_estimator(
            _mix_with_baseline(perturbed, e_dfe, E, alpha))
        f_cols.append(ad.relu(ad.sub(pi_new[indices], pi_star[indices])))

        unit = np.zeros(K)
        unit[j] = 1.0
        pi_evolved = model.mixture_estimator(
            _mix_with_baseline(Tensor(unit), e_dfe, E, alpha))
        sub_vec = pi_evolved[indices]
        outflow = ad.sub(Tensor(np.ones(1)), pi_evolved[j:j + 1])
        pieces = []
        if pos > 0:
            pieces.append(ad.relu(sub_vec[:pos]))
        pieces.append(outflow)
        if pos < len(indices) - 1:
            pieces.append(ad.relu(sub_vec[pos + 1:]))
        v_cols.append(ad.concat(pieces, axis=0))

    F = ad.stack(f_cols, axis=1)
    V = ad.stack(v_cols, axis=1)

    sf = singular_values_op(F)
    sv = singular_values_op(V)
    n = len(indices)
    if sv.data[-1] < _SING_FLOOR * max(sv.data[0], 1e-300):
        raise SingularMatrixError(
            f"V numerically singular: sigma_min={sv.data[-1]:.3e}")
    raw_lo = ad.div(sf[n - 1:n], sv[0:1])
    raw_hi = ad.div(sf[0:1], sv[n - 1:n])
    calib = model.params["calib"]
    cal_lo = ad.add(ad.mul(raw_lo, calib[0:1]), calib[1:2])
    cal_hi = ad.add(ad.mul(raw_hi, calib[2:3]), calib[3:4])

    lo_d, hi_d = r0_range
    loss = ad.add(ad.tsum(ad.relu(ad.sub(lo_d, cal_hi))),
                  ad.tsum(ad.relu(ad.sub(cal_lo, hi_d))))
    return NgmProxyResult(
        F=F, V=V,
        raw_bounds=R0Bounds(float(raw_lo.data[0]), float(raw_hi.data[0])),
        calibrated_bounds=R0Bounds(float(cal_lo.data[0]), float(cal_hi.data[0])),
        loss=loss, indices=indices)


# ---------------------------------------------------------------------------
# combined objectives

@dataclass
class LossParts:
    total: Tensor
    components: dict = field(default_factory=dict)
    ngm_skipped: bool = False

    def value(self, name: str) -> float:
        t = self.components.get(name)
        return float(t.data) if t is not None else 0.0


def align_loss(mixture_final: Tensor, model: CapeModel, weights: LossWeights,
               ngm: NgmProxyResult | None = None,
               skip_ngm: bool = False) -> LossParts:
    """Sum of the reproduction-number hinge, the monotonic hinges over
    tagged prototypes, and the smoothness penalty (final-layer mixtures)."""
    cfg = model.config
    components: dict = {}
    mono_total = None
    for direction, role in (("inc", ROLE_MONO_INC), ("dec", ROLE_MONO_DEC)):
        for k in cfg.role_indices(role):
            pi_k = mixture_final[:, :, k] if mixture_final.ndim == 3 \
                else mixture_final[:, k]
            term = monotonic_loss(pi_k, direction, weights.epsilon_mono)
            mono_total = term if mono_total is None else ad.add(mono_total, term)
    if mono_total is None:
        mono_total = Tensor(0.0)
    components["mono"] = mono_total
    smooth = smoothness_loss(mixture_final)
    components["smooth"] = smooth
    ngm_skipped = False
    if skip_ngm:
        ngm_term = Tensor(0.0)
    else:
        try:
            if ngm is None:
                ngm = ngm_proxy(model, weights.r0_range, weights.perturb_eps,
                                weights.alpha_mix, weights.ngm_subset)
            ngm_term = ngm.loss
            components["ngm_bounds"] = Tensor(
                [ngm.calibrated_bounds.lower, ngm.calibrated_bounds.upper])
        except SingularMatrixError as exc:
            log.debug("reproduction-number term skipped: %s", exc)
            ngm_term = Tensor(0.0)
            ngm_skipped = True
    components["ngm"] = ngm_term
    total = ad.add(ad.add(ngm_term, mono_total), smooth)
    return LossParts(total=total, components=components, ngm_skipped=ngm_skipped)


def pretrain_loss(model: CapeModel, x: np.ndarray, mask: np.ndarray,
                  view_a: np.ndarray, view_b: np.ndarray,
                  omega_a: np.ndarray, omega_b: np.ndarray,
                  weights: LossWeights) -> LossParts:
    """recon + contrastive + lambda * align on one batch.

    view_a/view_b are (B, T) crops; omega_a/omega_b are (B, n) aligned
    patch-index arrays (n shared across the batch).
    """
    out = model.forward(x, mode="pretrain", mask=mask)
    rec = recon_loss(out.reconstruction, x, mask, weights.masked_only)

    za, _ = model.encode(view_a)
    zb, _ = model.encode(view_b)
    B = za.shape[0]
    rows = np.arange(B)[:, None]
    xa = za[rows, np.asarray(omega_a)]
    xb = zb[rows, np.asarray(omega_b)]
    cl = contrastive_loss(xa, xb, weights.normalize_contrastive)

    align = align_loss(out.mixtures[-1], model, weights)
    total = ad.add(ad.add(rec, cl), ad.mul(align.total, weights.lambda_align))
    components = {"recon": rec, "contrastive": cl, "align": align.total}
    components.update(align.components)
    return LossParts(total=total, components=components,
                     ngm_skipped=align.ngm_skipped)


def finetune_loss(model: CapeModel, x: np.ndarray, y: np.ndarray,
                  weights: LossWeights, horizon: int | None = None) -> LossParts:
    """Forecast MSE + lambda * align on one batch."""
    y = np.asarray(y, dtype=float)
    out = model.forward(x, mode="forecast", horizon=horizon)
    if out.forecast.shape != y.shape:
        raise ValueError(f"target shape {y.shape} != forecast {out.forecast.shape}")
    mse = ad.tmean(ad.square(ad.sub(out.forecast, Tensor(y))))
    align = align_loss(out.mixtures[-1], model, weights)
    total = ad.add(mse, ad.mul(align.total, weights.lambda_align))
    components = {"mse": mse, "align": align.total}
    components.update(align.components)
    return LossParts(total=total, components=components,
                     ngm_skipped=align.ngm_skipped)
