"""Perplexity, divergence and representation-shift metrics, plus ablations.

The t-SNE picture from the hidden-representation analysis is replaced by
assertable numbers: per-token L2 distances to the dense model's final
residual stream, centroid shift, and a total-variance ratio. A deterministic
2-component PCA is provided for plot-ready coordinates.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .model import (
    LinearSite,
    ModelConfig,
    ModelWeights,
    corpus_blocks,
    corpus_tokens,
    mean_nll,
    run_model,
    token_nll,
)
from .sparsify import SparsityAccounting, SparsityProfile, mask_transform, measure_sparsity
from .spontaneous import (
    DistillHyper,
    SpontaneousParams,
    _augmented_transform,
    calibrate_kl_distill,
    kl_divergence,
)
from .tensor import Tensor

MODES = ("dense", "sparse", "spon")


# ---------------------------------------------------------------------------
# perplexity

def perplexity(
    weights: ModelWeights,
    config: ModelConfig,
    corpus: bytes | np.ndarray,
    forward_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    block: int | None = None,
    batch: int = 16,
) -> float:
    """exp of the mean next-token NLL over non-overlapping blocks (float64)."""
    tokens = corpus_tokens(corpus)
    if len(tokens) < 2:
        raise ValueError("perplexity needs at least 2 tokens")
    block = min(block or config.context_len, len(tokens) - 1)
    blocks = corpus_blocks(tokens, block)
    return float(np.exp(mean_nll(weights, config, blocks, forward_fn, batch=batch)))


# ---------------------------------------------------------------------------
# hidden representation shift

@dataclass
class ReprShiftMetrics:
    per_token_l2: np.ndarray
    mean_l2: float
    centroid_shift: float
    variance_ratio: float

    def to_json_dict(self) -> dict:
        return {
            "mean_l2": self.mean_l2,
            "centroid_shift": self.centroid_shift,
            "variance_ratio": self.variance_ratio,
        }


def repr_shift(dense_hidden: np.ndarray, other_hidden: np.ndarray) -> ReprShiftMetrics:
    """Distribution shift of final-residual states relative to the dense run.

    Both captures must come from identical prompts and positions. Distances
    are 0 for dense-vs-dense; a pure translation shows up in the centroid
    shift with variance ratio 1.
    """
    a = np.asarray(dense_hidden, dtype=np.float64)
    b = np.asarray(other_hidden, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"prompt mismatch: capture shapes {a.shape} vs {b.shape}")
    per_token = np.linalg.norm(b - a, axis=-1)
    centroid_a, centroid_b = a.mean(axis=0), b.mean(axis=0)
    var_a = ((a - centroid_a) ** 2).sum(axis=-1).mean()
    var_b = ((b - centroid_b) ** 2).sum(axis=-1).mean()
    if var_a == 0.0:
        ratio = 1.0 if var_b == 0.0 else float("inf")
    else:
        ratio = float(var_b / var_a)
    return ReprShiftMetrics(
        per_token_l2=per_token,
        mean_l2=float(per_token.mean()),
        centroid_shift=float(np.linalg.norm(centroid_b - centroid_a)),
        variance_ratio=ratio,
    )


def hidden_states(
    weights: ModelWeights,
    config: ModelConfig,
    prompt_ids: np.ndarray,
    profile: SparsityProfile | None = None,
    params: SpontaneousParams | None = None,
    batch: int = 16,
) -> np.ndarray:
    """Final residual-stream states (before the final norm) for a prompt set."""
    transform = None
    if profile is not None:
        if params is not None:
            alphas = {(s.layer, s.kind): Tensor(a) for s, a in params.alphas.items()}
            transform = _augmented_transform(profile, alphas)
        else:
            transform = mask_transform(profile)
    chunks = []
    for start in range(0, len(prompt_ids), batch):
        run = run_model(weights, config, prompt_ids[start: start + batch],
                        site_transform=transform, capture_hidden=True)
        chunks.append(run.capture.hidden)
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# PCA for plot-ready coordinates

@dataclass
class Pca2:
    coords: np.ndarray          # [n, 2]
    eigenvalues: tuple[float, float]


def _power_iterate(c: np.ndarray, rng: np.random.Generator,
                   iters: int = 10_000, tol: float = 1e-14) -> tuple[np.ndarray, float]:
    v = rng.standard_normal(c.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        nxt = c @ v
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return np.zeros_like(v), 0.0
        nxt /= norm
        if np.linalg.norm(nxt - v) < tol:
            v = nxt
            break
        v = nxt
    lam = float(v @ c @ v)
    # deterministic sign: largest-magnitude component is positive
    pivot = int(np.argmax(np.abs(v)))
    if v[pivot] < 0:
        v = -v
    return v, lam


def pca2(points: np.ndarray, seed: int = 0) -> Pca2:
    """Top-2 principal components via power iteration on the covariance."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("pca2 needs at least 3 points of shape [n, d]")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9CA2]))
    v1, l1 = _power_iterate(cov, rng)
    deflated = cov - l1 * np.outer(v1, v1)
    v2, l2 = _power_iterate(deflated, rng)
    # rank-deficient input: no meaningful second direction
    if l2 <= 1e-12 * max(l1, 1.0):
        v2, l2 = np.zeros_like(v2), 0.0
    coords = np.stack([centered @ v1, centered @ v2], axis=1)
    return Pca2(coords=coords, eigenvalues=(l1, l2))


# ---------------------------------------------------------------------------
# eval reports

def fingerprint(payload) -> str:
    if payload is None:
        return "none"
    if isinstance(payload, bytes):
        raw = payload
    else:
        raw = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:16]


def model_fingerprint(weights: ModelWeights) -> str:
    h = hashlib.sha256()
    for name, arr in weights.named_tensors().items():
        h.update(name.encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


@dataclass
class EvalReport:
    mode: str
    perplexity: float
    mean_kl_vs_dense: float
    sparsity_achieved: float
    shift: ReprShiftMetrics
    fingerprints: dict[str, str] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.perplexity < 1.0:
            raise ValueError("perplexity below 1 indicates a broken NLL")
        if self.mean_kl_vs_dense < -1e-9:
            raise ValueError("negative KL indicates a broken divergence")

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "label": self.label,
            "perplexity": self.perplexity,
            "mean_kl_vs_dense": self.mean_kl_vs_dense,
            "sparsity_achieved": self.sparsity_achieved,
            "repr_shift": self.shift.to_json_dict(),
            "fingerprints": self.fingerprints,
        }


def evaluate_model(
    dense_weights: ModelWeights,
    config: ModelConfig,
    eval_tokens: bytes | np.ndarray,
    mode: str = "dense",
    exec_weights: ModelWeights | None = None,
    profile: SparsityProfile | None = None,
    params: SpontaneousParams | None = None,
    shift_prompts: int = 50,
    batch: int = 16,
    label: str = "",
) -> EvalReport:
    """Full report for one model variant against the dense reference.

    `exec_weights` defaults to the dense weights; pass folded weights to
    evaluate a bias-compensated model. Perplexity, mean KL and achieved
    sparsity are measured over the same non-overlapping blocks; the shift
    metrics use the first `shift_prompts` blocks as the capture set.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    exec_weights = exec_weights if exec_weights is not None else dense_weights
    tokens = corpus_tokens(eval_tokens)
    blocks = corpus_blocks(tokens, min(config.context_len, len(tokens) - 1))
    accounting = SparsityAccounting() if (profile and mode != "dense") else None

    transform = None
    if mode == "sparse":
        if profile is None:
            raise ValueError("sparse mode needs a sparsity profile")
        transform = mask_transform(profile, accounting)
    elif mode == "spon":
        if profile is None:
            raise ValueError("spon mode needs a sparsity profile")
        alphas = {}
        if params is not None:
            if params.state != "unfolded" and params.alphas:
                raise ValueError("folded params cannot be executed; fold into weights")
            alphas = {(s.layer, s.kind): Tensor(a) for s, a in params.alphas.items()}
        transform = _augmented_transform(profile, alphas, accounting)

    def variant_forward(ids: np.ndarray) -> np.ndarray:
        return run_model(exec_weights, config, ids, site_transform=transform).logits_array()

    nll_total, kl_total, token_count = 0.0, 0.0, 0
    for start in range(0, len(blocks), batch):
        chunk = blocks[start: start + batch]
        inputs, targets = chunk[:, :-1], chunk[:, 1:]
        variant_logits = variant_forward(inputs)
        v = variant_logits.shape[-1]
        flat = variant_logits.reshape(-1, v)
        nll_total += token_nll(flat, targets.reshape(-1)).sum()
        if mode != "dense":
            dense_logits = run_model(dense_weights, config, inputs).logits_array()
            kl_total += kl_divergence(dense_logits.reshape(-1, v), flat) * flat.shape[0]
        token_count += flat.shape[0]

    ppl = float(np.exp(nll_total / token_count))
    mean_kl = float(kl_total / token_count) if mode != "dense" else 0.0
    sparsity = measure_sparsity(accounting).overall if (
        accounting is not None and accounting.total) else 0.0

    prompts = blocks[: min(shift_prompts, len(blocks)), :-1]
    dense_hidden = hidden_states(dense_weights, config, prompts, batch=batch)
    if mode == "dense":
        shift = repr_shift(dense_hidden, dense_hidden)
    else:
        other_hidden = hidden_states(exec_weights, config, prompts,
                                     profile=profile,
                                     params=params if mode == "spon" else None,
                                     batch=batch)
        shift = repr_shift(dense_hidden, other_hidden)

    fingerprints = {
        "config": fingerprint(config.to_dict()),
        "model": model_fingerprint(exec_weights),
        "profile": fingerprint(profile.to_json_dict() if profile else None),
        "params": fingerprint(params.to_json_dict() if params else None),
    }
    return EvalReport(
        mode=mode, perplexity=ppl, mean_kl_vs_dense=mean_kl,
        sparsity_achieved=float(sparsity), shift=shift,
        fingerprints=fingerprints, label=label,
    )


# ---------------------------------------------------------------------------
# ablation harness

DEFAULT_SITE_SETS: dict[str, tuple[str, ...]] = {
    "kv_attn": ("k_proj", "v_proj"),
    "gate_up_mlp": ("gate_proj", "up_proj"),
    "q_plus_down": ("q_proj", "down_proj"),
    "o_plus_down": ("o_proj", "down_proj"),
    "down_only": ("down_proj",),
    "all_sites": tuple(k for k in ("q_proj", "k_proj", "v_proj", "o_proj",
                                   "gate_proj", "up_proj", "down_proj")),
    "attention_only": ("q_proj", "k_proj", "v_proj", "o_proj"),
    "mlp_only": ("gate_proj", "up_proj", "down_proj"),
}


@dataclass
class AblationEntry:
    label: str
    descriptor: dict
    report: EvalReport


@dataclass
class AblationResult:
    kind: str                      # "site_sets" or "layers"
    shared: dict                   # corpus_id, seed, target_sparsity, budget
    entries: list[AblationEntry]

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "kind": self.kind,
            "shared": self.shared,
            "entries": [
                {"label": e.label, "descriptor": e.descriptor,
                 "report": e.report.to_json_dict()}
                for e in self.entries
            ],
        }


def _split_for_ablation(corpus: bytes | np.ndarray, config: ModelConfig,
                        calib_size: int) -> tuple[np.ndarray, np.ndarray]:
    tokens = corpus_tokens(corpus)
    n_eval = max(config.context_len + 1, len(tokens) // 10)
    if len(tokens) <= n_eval + config.context_len:
        raise ValueError("corpus too small to split into calibration and eval regions")
    eval_tokens = tokens[len(tokens) - n_eval:]
    calib = tokens[: min(calib_size, len(tokens) - n_eval)]
    return calib, eval_tokens


def _shared_block(corpus_id: str, seed: int, profile: SparsityProfile,
                  hyper: DistillHyper) -> dict:
    return {
        "corpus_id": corpus_id,
        "seed": seed,
        "target_sparsity": profile.target_sparsity,
        "distill_steps": hyper.steps,
        "distill_lr": hyper.lr,
    }


def ablate_sites(
    dense_weights: ModelWeights,
    config: ModelConfig,
    corpus: bytes | np.ndarray,
    profile: SparsityProfile,
    site_sets: Mapping[str, Sequence[str]] | None = None,
    hyper: DistillHyper | None = None,
    seed: int = 0,
    calib_size: int = 16_384,
) -> AblationResult:
    """Distill alpha for each candidate injection-site set under one budget."""
    hyper = hyper or DistillHyper()
    site_sets = dict(site_sets) if site_sets is not None else dict(DEFAULT_SITE_SETS)
    if any(not kinds for kinds in site_sets.values()):
        raise ValueError("every site set must be nonempty")
    calib, eval_tokens = _split_for_ablation(corpus, config, calib_size)
    corpus_id = hashlib.sha256(corpus_tokens(corpus).tobytes()).hexdigest()[:16]
    entries = []
    for name, kinds in site_sets.items():
        sites = config.all_sites(kinds)
        distilled = calibrate_kl_distill(
            dense_weights, config, calib, profile, sites, hyper, seed=seed)
        report = evaluate_model(
            dense_weights, config, eval_tokens, mode="spon",
            profile=profile, params=distilled.params, label=name)
        entries.append(AblationEntry(
            label=name,
            descriptor={"site_kinds": list(kinds),
                        "heldout_kl": distilled.best_heldout_kl},
            report=report,
        ))
    return AblationResult(kind="site_sets",
                          shared=_shared_block(corpus_id, seed, profile, hyper),
                          entries=entries)


def ablate_layers(
    dense_weights: ModelWeights,
    config: ModelConfig,
    corpus: bytes | np.ndarray,
    profile: SparsityProfile,
    hyper: DistillHyper | None = None,
    seed: int = 0,
    calib_size: int = 16_384,
) -> AblationResult:
    """One run per layer index, down-projection only, identical budgets."""
    hyper = hyper or DistillHyper()
    calib, eval_tokens = _split_for_ablation(corpus, config, calib_size)
    corpus_id = hashlib.sha256(corpus_tokens(corpus).tobytes()).hexdigest()[:16]
    entries = []
    for layer in range(config.n_layers):
        sites = [LinearSite(layer, "down_proj")]
        distilled = calibrate_kl_distill(
            dense_weights, config, calib, profile, sites, hyper, seed=seed)
        report = evaluate_model(
            dense_weights, config, eval_tokens, mode="spon",
            profile=profile, params=distilled.params, label=f"layer_{layer}")
        entries.append(AblationEntry(
            label=f"layer_{layer}",
            descriptor={"layer": layer, "heldout_kl": distilled.best_heldout_kl},
            report=report,
        ))
    return AblationResult(kind="layers",
                          shared=_shared_block(corpus_id, seed, profile, hyper),
                          entries=entries)
