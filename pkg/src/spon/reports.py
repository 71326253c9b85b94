"""Artifact writers: canonical JSON, flat CSV series, and rendered figures.

Artifacts are reproducible byte-for-byte: canonical JSON is sorted-key with
a trailing newline and no timestamps, CSV floats use Python repr (lossless
round-trip), and figures are written through the Agg backend with metadata
stripped. Every JSON artifact carries schema_version for forward
compatibility; readers reject mismatches.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1


class ArtifactVersionError(ValueError):
    """Artifact schema_version does not match this build."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json_artifact(path: str | Path, obj: dict) -> None:
    payload = dict(obj)
    payload.setdefault("schema_version", SCHEMA_VERSION)
    Path(path).write_text(canonical_json(payload), encoding="utf-8")


def load_json_artifact(path: str | Path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArtifactVersionError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ArtifactVersionError(f"{path}: expected a JSON object")
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ArtifactVersionError(
            f"{path}: schema_version {version!r} != supported {SCHEMA_VERSION}"
        )
    return obj


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


# ---------------------------------------------------------------------------
# figures (Agg backend, deterministic output)

def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=120, metadata={"Software": None})
    _plt().close(fig)


def save_ablation_bars(result, path: str | Path, dense_ppl: float | None = None) -> None:
    """Horizontal perplexity bars, one per ablation configuration."""
    plt = _plt()
    labels = [e.label for e in result.entries]
    ppls = [e.report.perplexity for e in result.entries]
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(labels) + 1.5))
    ax.barh(labels, ppls, color="#4878a8")
    if dense_ppl is not None:
        ax.axvline(dense_ppl, color="#555555", linestyle="--", label="dense")
        ax.legend()
    ax.set_xlabel("held-out perplexity")
    ax.set_title(f"injection-site ablation @ {result.shared['target_sparsity']:.0%} sparsity")
    ax.invert_yaxis()
    fig.tight_layout()
    _save(fig, path)


def save_layer_curve(result, path: str | Path, dense_ppl: float | None = None) -> None:
    """Perplexity as a function of the single injected layer index."""
    plt = _plt()
    layers = [e.descriptor["layer"] for e in result.entries]
    ppls = [e.report.perplexity for e in result.entries]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(layers, ppls, marker="o", color="#4878a8", label="single-layer injection")
    if dense_ppl is not None:
        ax.axhline(dense_ppl, color="#555555", linestyle="--", label="dense")
    ax.set_xlabel("layer index (down projection)")
    ax.set_ylabel("held-out perplexity")
    ax.set_xticks(layers)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def save_shift_scatter(coords_by_variant: dict[str, np.ndarray], path: str | Path) -> None:
    """2-D PCA scatter of final hidden states, one colour per variant."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 5))
    colors = {"dense": "#555555", "sparse": "#c05438", "spon": "#4878a8"}
    for i, (name, coords) in enumerate(coords_by_variant.items()):
        ax.scatter(coords[:, 0], coords[:, 1], s=6, alpha=0.55,
                   color=colors.get(name, f"C{i}"), label=name)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.set_title("final residual states, shared PCA basis")
    ax.legend(markerscale=2)
    fig.tight_layout()
    _save(fig, path)


def save_shift_histogram(distances_by_variant: dict[str, np.ndarray],
                         path: str | Path) -> None:
    """Per-token L2 distance to the dense states, per variant."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = {"sparse": "#c05438", "spon": "#4878a8"}
    for i, (name, dist) in enumerate(distances_by_variant.items()):
        ax.hist(dist, bins=40, alpha=0.6, label=name, color=colors.get(name, f"C{i}"))
    ax.set_xlabel("L2 distance to dense hidden state")
    ax.set_ylabel("tokens")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
