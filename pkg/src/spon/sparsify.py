"""Magnitude-threshold input sparsification.

Thresholds are calibrated per linear site as an empirical quantile of the
absolute activation values observed on a calibration run, then applied at
inference by zeroing every input entry whose magnitude does not exceed the
site's threshold. Entries exactly at the threshold are masked (non-strict),
so the achieved fraction on the calibration multiset is never below target.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .model import (
    HookCapture,
    LinearSite,
    ModelConfig,
    ModelWeights,
    SiteTransform,
    corpus_tokens,
    run_model,
)
from .tensor import Tensor

MIN_CALIBRATION_TOKENS = 1024


@dataclass
class SparsityProfile:
    """Per-site thresholds tau plus the sparsity level they were fit for."""

    target_sparsity: float
    thresholds: dict[LinearSite, float]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError("target_sparsity must lie in [0, 1)")
        for site, tau in self.thresholds.items():
            if not (math.isfinite(tau) and tau >= 0.0):
                raise ValueError(f"threshold for {site} must be finite and >= 0")

    @property
    def sites(self) -> list[LinearSite]:
        return sorted(self.thresholds)

    def validate_for(self, config: ModelConfig) -> "SparsityProfile":
        for site in self.thresholds:
            site.validate(config.n_layers)
        return self

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "target": self.target_sparsity,
            "thresholds": [
                {"layer": s.layer, "site": s.kind, "tau": self.thresholds[s]}
                for s in self.sites
            ],
            "metadata": self.metadata,
        }

    @staticmethod
    def from_json_dict(d: Mapping) -> "SparsityProfile":
        return SparsityProfile(
            target_sparsity=d["target"],
            thresholds={
                LinearSite(e["layer"], e["site"]): float(e["tau"]) for e in d["thresholds"]
            },
            metadata=dict(d.get("metadata", {})),
        )


def apply_mask(x: np.ndarray, tau: float) -> np.ndarray:
    """Zero every entry with |x| <= tau; idempotent and exactly sparse."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    x = np.asarray(x)
    return np.where(np.abs(x) > tau, x, np.zeros((), dtype=x.dtype))


def quantile_threshold(magnitudes: np.ndarray, target: float) -> float:
    """Exact-sort quantile with the non-strict tie rule.

    Returns the smallest observed magnitude tau such that masking |x| <= tau
    removes at least a `target` fraction of the multiset; 0 when target is 0.
    """
    if not 0.0 <= target < 1.0:
        raise ValueError("target must lie in [0, 1)")
    flat = np.sort(np.abs(np.asarray(magnitudes).ravel()))
    k = math.ceil(target * flat.size)
    if k == 0:
        return 0.0
    return float(flat[k - 1])


class SparsityAccounting:
    """Masked/total entry counts per site, collected during sparse runs."""

    def __init__(self) -> None:
        self.masked: dict[LinearSite, int] = {}
        self.total: dict[LinearSite, int] = {}

    def add(self, site: LinearSite, kept_mask: np.ndarray) -> None:
        self.masked[site] = self.masked.get(site, 0) + int(kept_mask.size - kept_mask.sum())
        self.total[site] = self.total.get(site, 0) + int(kept_mask.size)


@dataclass
class SparsityStats:
    per_site: dict[LinearSite, float]
    overall: float

    def to_json_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_site": [
                {"layer": s.layer, "site": s.kind, "fraction": self.per_site[s]}
                for s in sorted(self.per_site)
            ],
        }


def measure_sparsity(accounting: SparsityAccounting) -> SparsityStats:
    """Exact masked fractions per site and pooled over all profiled sites."""
    if not accounting.total:
        raise ValueError("accounting has no recorded sites; run with accounting enabled")
    per_site = {s: accounting.masked[s] / accounting.total[s] for s in accounting.total}
    overall = sum(accounting.masked.values()) / sum(accounting.total.values())
    return SparsityStats(per_site=per_site, overall=overall)


def mask_transform(
    profile: SparsityProfile,
    accounting: SparsityAccounting | None = None,
) -> SiteTransform:
    """Site transform applying the profile's thresholds (mask is a constant
    for differentiation purposes: masked entries get zero gradient)."""
    taus = {(s.layer, s.kind): tau for s, tau in profile.thresholds.items()}

    def transform(layer: int, kind: str, x: Tensor) -> Tensor:
        tau = taus.get((layer, kind))
        if tau is None:
            return x
        kept = np.abs(x.data) > tau
        if accounting is not None:
            accounting.add(LinearSite(layer, kind), kept)
        return T.mul(x, Tensor(kept.astype(x.dtype)))

    return transform


def sparse_forward(
    weights: ModelWeights,
    config: ModelConfig,
    token_ids: np.ndarray,
    profile: SparsityProfile,
    accounting: SparsityAccounting | None = None,
) -> np.ndarray:
    """Forward pass with each profiled site's input masked before its matmul."""
    profile.validate_for(config)
    run = run_model(weights, config, token_ids,
                    site_transform=mask_transform(profile, accounting))
    return run.logits_array()


def _token_blocks(tokens: np.ndarray, block: int) -> np.ndarray:
    n = len(tokens) // block
    if n < 1:
        raise ValueError(f"need at least {block} tokens, got {len(tokens)}")
    return tokens[: n * block].reshape(n, block).astype(np.int64)


def collect_site_inputs(
    weights: ModelWeights,
    config: ModelConfig,
    calib_tokens: bytes | np.ndarray,
    sites: Iterable[LinearSite],
    profile: SparsityProfile | None = None,
    batch: int = 16,
) -> tuple[dict[LinearSite, np.ndarray], int]:
    """Pool raw (pre-mask) site inputs over a calibration run.

    With a profile, the run executes sparsified, so each site sees the input
    distribution it would see at sparse inference time. Returns the pooled
    arrays ([tokens, d_in] per site) and the number of tokens consumed.
    """
    sites = [LinearSite(*s).validate(config.n_layers) for s in sites]
    if not sites:
        raise ValueError("no sites requested")
    tokens = corpus_tokens(calib_tokens)
    blocks = _token_blocks(tokens, config.context_len)
    transform = mask_transform(profile) if profile is not None else None
    pooled: dict[LinearSite, list[np.ndarray]] = {s: [] for s in sites}
    for start in range(0, len(blocks), batch):
        ids = blocks[start: start + batch]
        run = run_model(weights, config, ids,
                        site_transform=transform, capture_sites=sites)
        for s in sites:
            pooled[s].append(run.capture.site_inputs[s])
    n_tokens = len(blocks) * config.context_len
    return {s: np.concatenate(chunks, axis=0) for s, chunks in pooled.items()}, n_tokens


def calibrate_thresholds(
    weights: ModelWeights,
    config: ModelConfig,
    calib_tokens: bytes | np.ndarray,
    sites: Iterable[LinearSite],
    target_sparsity: float,
    batch: int = 16,
) -> SparsityProfile:
    """Fit per-site tau as the target-quantile of pooled |activation|."""
    tokens = corpus_tokens(calib_tokens)
    if len(tokens) < MIN_CALIBRATION_TOKENS:
        raise ValueError(
            f"need >= {MIN_CALIBRATION_TOKENS} calibration tokens, got {len(tokens)}"
        )
    captured, n_tokens = collect_site_inputs(weights, config, tokens, sites, batch=batch)
    thresholds = {
        site: quantile_threshold(x, target_sparsity) for site, x in captured.items()
    }
    metadata = {
        "num_tokens": n_tokens,
        "corpus_id": hashlib.sha256(tokens.tobytes()).hexdigest()[:16],
        "seed": config.seed,
    }
    return SparsityProfile(target_sparsity=target_sparsity, thresholds=thresholds,
                           metadata=metadata)
