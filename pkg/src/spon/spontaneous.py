"""Spontaneous activations: input-independent per-site vectors alpha.

A profiled site normally computes W @ mask(x); augmenting it computes
W @ (mask(x) + alpha), so the correction W @ alpha is input-independent and
can be folded into a per-site bias after calibration, adding no matmuls at
inference.

Two calibration routes:

* closed form: the constant bias minimizing the expected squared residual
  of masking is the mean residual b* = mean(W x - W mask(x)); storing it
  directly as a bias also certifies the identity L(b*) = L(0) - ||b*||^2 on
  the calibration set.
* distillation: gradient descent on alpha alone, minimizing the mean
  token-level KL from the dense model's output distribution to the sparse
  augmented model's, with masks treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .model import (
    LinearSite,
    ModelConfig,
    ModelWeights,
    corpus_tokens,
    run_model,
)
from .sparsify import (
    SparsityAccounting,
    SparsityProfile,
    apply_mask,
    collect_site_inputs,
    mask_transform,
    _token_blocks,
)
from .tensor import Adam, Tape, Tensor

STATE_UNFOLDED = "unfolded"
STATE_FOLDED = "folded"


class FoldStateError(ValueError):
    """Params are in the wrong folded/unfolded state for the operation."""


@dataclass
class SpontaneousParams:
    """Per-site alpha vectors plus calibration provenance."""

    alphas: dict[LinearSite, np.ndarray]
    method: str = "zero"
    state: str = STATE_UNFOLDED
    metadata: dict = field(default_factory=dict)

    def validate_for(self, config: ModelConfig) -> "SpontaneousParams":
        for site, alpha in self.alphas.items():
            site.validate(config.n_layers)
            want = config.site_in_dim(site.kind)
            if alpha.shape != (want,):
                raise ValueError(
                    f"alpha for {site} has shape {alpha.shape}, expected ({want},)"
                )
        return self

    @staticmethod
    def zeros(config: ModelConfig, sites: Iterable[LinearSite]) -> "SpontaneousParams":
        alphas = {
            LinearSite(*s).validate(config.n_layers): np.zeros(
                config.site_in_dim(LinearSite(*s).kind), dtype=np.float32
            )
            for s in sites
        }
        return SpontaneousParams(alphas=alphas)

    def copy(self) -> "SpontaneousParams":
        return SpontaneousParams(
            alphas={s: a.copy() for s, a in self.alphas.items()},
            method=self.method, state=self.state, metadata=dict(self.metadata),
        )

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "method": self.method,
            "state": self.state,
            "sites": [
                {"layer": s.layer, "site": s.kind,
                 "alpha": [float(v) for v in self.alphas[s]]}
                for s in sorted(self.alphas)
            ],
            "metadata": self.metadata,
        }

    @staticmethod
    def from_json_dict(d: Mapping) -> "SpontaneousParams":
        return SpontaneousParams(
            alphas={
                LinearSite(e["layer"], e["site"]): np.asarray(e["alpha"], dtype=np.float32)
                for e in d["sites"]
            },
            method=d.get("method", "zero"),
            state=d.get("state", STATE_UNFOLDED),
            metadata=dict(d.get("metadata", {})),
        )


def _augmented_transform(
    profile: SparsityProfile,
    alpha_tensors: dict[tuple[int, str], Tensor],
    accounting: SparsityAccounting | None = None,
):
    masked = mask_transform(profile, accounting)

    def transform(layer: int, kind: str, x: Tensor) -> Tensor:
        x = masked(layer, kind, x)
        alpha = alpha_tensors.get((layer, kind))
        if alpha is not None:
            x = T.add(x, alpha)
        return x

    return transform


def spon_forward(
    weights: ModelWeights,
    config: ModelConfig,
    token_ids: np.ndarray,
    profile: SparsityProfile,
    params: SpontaneousParams | None,
    accounting: SparsityAccounting | None = None,
) -> np.ndarray:
    """Sparse forward with each augmented site computing W @ (mask(x) + alpha)."""
    profile.validate_for(config)
    alphas: dict[tuple[int, str], Tensor] = {}
    if params is not None:
        if params.state != STATE_UNFOLDED:
            raise FoldStateError("params are folded; run the sparse forward on the "
                                 "folded weights instead")
        params.validate_for(config)
        alphas = {(s.layer, s.kind): Tensor(a) for s, a in params.alphas.items()}
    run = run_model(weights, config, token_ids,
                    site_transform=_augmented_transform(profile, alphas, accounting))
    return run.logits_array()


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Mean per-token KL(p || q) from logits, in float64 via log-softmax."""
    p_logits, q_logits = np.asarray(p_logits), np.asarray(q_logits)
    if p_logits.shape != q_logits.shape:
        raise T.DimensionError(
            f"logit shapes disagree: {p_logits.shape} vs {q_logits.shape}"
        )
    v = p_logits.shape[-1]
    logp = T.log_softmax_np(p_logits.astype(np.float64).reshape(-1, v))
    logq = T.log_softmax_np(q_logits.astype(np.float64).reshape(-1, v))
    return float((np.exp(logp) * (logp - logq)).sum(axis=-1).mean())


def fold(weights: ModelWeights, params: SpontaneousParams) -> ModelWeights:
    """Absorb each alpha into its site's bias: bias += W @ alpha.

    Marks `params` folded (a second fold is rejected). Sites whose alpha is
    exactly zero and which carry no bias are left absent so that folding a
    zero vector is a byte-level no-op on the weights.
    """
    if params.state != STATE_UNFOLDED:
        raise FoldStateError("params already folded")
    folded = weights.copy()
    for site, alpha in sorted(params.alphas.items()):
        w = folded.layers[site.layer].site_weight(site.kind)
        extra = alpha.astype(np.float64) @ w.astype(np.float64)
        if site in folded.biases:
            folded.biases[site] = (
                folded.biases[site].astype(np.float64) + extra
            ).astype(np.float32)
        elif np.any(alpha != 0):
            folded.biases[site] = extra.astype(np.float32)
    params.state = STATE_FOLDED
    params.metadata = dict(params.metadata, folded=True)
    return folded


# ---------------------------------------------------------------------------
# closed-form calibration

@dataclass
class SiteResidualStats:
    loss_zero_bias: float      # L(0): mean squared residual without correction
    loss_mean_bias: float      # L(b*): mean squared residual after correction
    bias_norm_sq: float        # ||b*||^2

    def to_json_dict(self) -> dict:
        return {"loss_zero_bias": self.loss_zero_bias,
                "loss_mean_bias": self.loss_mean_bias,
                "bias_norm_sq": self.bias_norm_sq}


@dataclass
class ResidualMeanResult:
    weights: ModelWeights
    params: SpontaneousParams
    site_stats: dict[LinearSite, SiteResidualStats]


def residual_bias_stats(x: np.ndarray, tau: float, w: np.ndarray
                        ) -> tuple[np.ndarray, SiteResidualStats]:
    """Closed-form optimal constant bias for one site.

    x is [tokens, d_in]; the per-token residual of masking is
    e = (x - mask(x)) @ w, the optimal bias its mean, and the stats report
    the mean squared residual before and after subtracting it (float64).
    """
    residual_in = (np.asarray(x) - apply_mask(x, tau)).astype(np.float64)
    e = residual_in @ np.asarray(w).astype(np.float64)
    b_star = e.mean(axis=0)
    stats = SiteResidualStats(
        loss_zero_bias=float((e ** 2).sum(axis=1).mean()),
        loss_mean_bias=float(((e - b_star) ** 2).sum(axis=1).mean()),
        bias_norm_sq=float((b_star ** 2).sum()),
    )
    return b_star, stats


def calibrate_residual_mean(
    weights: ModelWeights,
    config: ModelConfig,
    calib_tokens: bytes | np.ndarray,
    profile: SparsityProfile,
    sites: Iterable[LinearSite],
    batch: int = 16,
) -> ResidualMeanResult:
    """Closed-form bias b* = mean(W x - W mask(x)) per site, stored as bias.

    Site inputs are captured while the model runs sparsified, so each bias
    corrects the residual its site actually sees at sparse inference time.
    """
    profile.validate_for(config)
    captured, n_tokens = collect_site_inputs(
        weights, config, calib_tokens, sites, profile=profile, batch=batch
    )
    new_weights = weights.copy()
    stats: dict[LinearSite, SiteResidualStats] = {}
    for site, x in captured.items():
        if x.shape[0] == 0:
            raise ValueError(f"no tokens captured at {site}")
        tau = profile.thresholds.get(site, 0.0)
        w = new_weights.layers[site.layer].site_weight(site.kind)
        b_star, stats[site] = residual_bias_stats(x, tau, w)
        prior = new_weights.biases.get(site)
        total = b_star if prior is None else prior.astype(np.float64) + b_star
        new_weights.biases[site] = total.astype(np.float32)
    params = SpontaneousParams(
        alphas={}, method="residual_mean", state=STATE_FOLDED,
        metadata={
            "num_tokens": n_tokens,
            "sites": [[s.layer, s.kind] for s in sorted(stats)],
            "site_stats": {f"{s.layer}.{s.kind}": stats[s].to_json_dict()
                           for s in sorted(stats)},
        },
    )
    return ResidualMeanResult(weights=new_weights, params=params, site_stats=stats)


# ---------------------------------------------------------------------------
# distillation calibration

@dataclass
class DistillHyper:
    lr: float = 1e-5
    steps: int = 400
    batch: int = 8
    block: int = 128
    log_every: int = 50
    holdout_frac: float = 0.1


@dataclass
class DistillResult:
    params: SpontaneousParams
    checkpoints: list[tuple[int, float]]   # (step, held-out mean KL)
    best_step: int
    best_heldout_kl: float
    initial_heldout_kl: float


def _teacher_logp(weights: ModelWeights, config: ModelConfig, blocks: np.ndarray,
                  batch: int) -> np.ndarray:
    out = np.empty((len(blocks), blocks.shape[1], config.vocab_size), dtype=np.float32)
    for start in range(0, len(blocks), batch):
        ids = blocks[start: start + batch]
        logits = run_model(weights, config, ids).logits.data
        out[start: start + len(ids)] = T.log_softmax_np(logits).reshape(
            len(ids), blocks.shape[1], -1
        )
    return out


def calibrate_kl_distill(
    dense_weights: ModelWeights,
    config: ModelConfig,
    calib_tokens: bytes | np.ndarray,
    profile: SparsityProfile,
    sites: Iterable[LinearSite],
    hyper: DistillHyper | None = None,
    seed: int = 0,
) -> DistillResult:
    """Train alpha (and only alpha) to minimize KL(dense || sparse+alpha).

    Alphas start at zero, exactly the uncompensated-sparsity baseline. A
    held-out slice of the calibration blocks is scored every `log_every`
    steps; the returned alphas are the best-scoring snapshot, so the final
    held-out KL never exceeds the step-0 baseline.
    """
    hyper = hyper or DistillHyper()
    profile.validate_for(config)
    sites = [LinearSite(*s).validate(config.n_layers) for s in sites]
    if not sites:
        raise ValueError("no injection sites requested")
    block = min(hyper.block, config.context_len)
    tokens = corpus_tokens(calib_tokens)
    blocks = _token_blocks(tokens, block)
    n_hold = max(1, int(round(len(blocks) * hyper.holdout_frac)))
    if len(blocks) - n_hold < 1:
        raise ValueError("calibration set too small for a fit/held-out split")
    fit, hold = blocks[: len(blocks) - n_hold], blocks[len(blocks) - n_hold:]

    teacher_fit = _teacher_logp(dense_weights, config, fit, batch=16)
    teacher_hold = _teacher_logp(dense_weights, config, hold, batch=16)
    vocab = config.vocab_size

    params = SpontaneousParams.zeros(config, sites)
    params.method = "kl_distill"

    def heldout_kl(alphas: dict[LinearSite, np.ndarray]) -> float:
        tensors = {(s.layer, s.kind): Tensor(a) for s, a in alphas.items()}
        transform = _augmented_transform(profile, tensors)
        tot, count = 0.0, 0
        for start in range(0, len(hold), 16):
            ids = hold[start: start + 16]
            run = run_model(dense_weights, config, ids, site_transform=transform)
            logq = T.log_softmax_np(run.logits.data.astype(np.float64))
            logp = teacher_hold[start: start + len(ids)].reshape(-1, vocab).astype(np.float64)
            tot += (np.exp(logp) * (logp - logq)).sum()
            count += logp.shape[0]
        return tot / count

    initial = heldout_kl(params.alphas)
    checkpoints = [(0, initial)]
    best_step, best_kl = 0, initial
    best_alphas = {s: a.copy() for s, a in params.alphas.items()}

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5D15]))
    opt = Adam(hyper.lr)
    order: list[int] = []
    final_train_kl = initial
    for step in range(1, hyper.steps + 1):
        while len(order) < hyper.batch:
            order.extend(rng.permutation(len(fit)).tolist())
        picks = np.asarray(order[: hyper.batch])
        order = order[hyper.batch:]

        tape = Tape()
        named = {f"alpha.{s.layer}.{s.kind}": tape.parameter(params.alphas[s])
                 for s in sites}
        tensors = {(s.layer, s.kind): named[f"alpha.{s.layer}.{s.kind}"] for s in sites}
        run = run_model(dense_weights, config, fit[picks],
                        tape=tape, site_transform=_augmented_transform(profile, tensors))
        loss = T.kl_to_teacher(teacher_fit[picks].reshape(-1, vocab), run.logits)
        T.backward(loss, tape)
        opt.step(named)
        final_train_kl = loss.item()

        if step % hyper.log_every == 0 or step == hyper.steps:
            kl = heldout_kl(params.alphas)
            checkpoints.append((step, kl))
            if kl < best_kl:
                best_step, best_kl = step, kl
                best_alphas = {s: a.copy() for s, a in params.alphas.items()}

    params.alphas = best_alphas
    params.metadata = {
        "steps": hyper.steps, "lr": hyper.lr, "batch": hyper.batch, "block": block,
        "seed": seed, "best_step": best_step, "final_kl": best_kl,
        "initial_kl": initial, "final_train_kl": final_train_kl,
        "kl_direction": "KL(dense || sparse_augmented)",
    }
    return DistillResult(
        params=params, checkpoints=checkpoints, best_step=best_step,
        best_heldout_kl=best_kl, initial_heldout_kl=initial,
    )
