"""Toy byte-level decoder-only transformer with named linear sites.

The architecture is Llama-flavoured: pre-norm residual blocks with RMSNorm,
causal multi-head attention, a SwiGLU MLP, and seven named linear maps per
layer (q/k/v/o projections, gate/up/down projections). Positions use a
learned absolute embedding added to the token embedding. Every linear site
carries an optional bias vector, absent by default.

``run_model`` is the single forward engine. Hook capture, input masking and
spontaneous-activation injection all plug into it through a per-site
transform callback, so the hooked/sparse/augmented paths are bit-identical
to the plain forward whenever their extras are inert.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Adam, Tape, Tensor

SITE_KINDS = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
ATTN_SITE_KINDS = ("q_proj", "k_proj", "v_proj", "o_proj")
MLP_SITE_KINDS = ("gate_proj", "up_proj", "down_proj")

_MASK_FILL = -1e9  # finite stand-in for -inf; underflows to exactly 0 after softmax


class LinearSite(NamedTuple):
    """One of the seven per-layer linear maps, addressed by layer and kind."""

    layer: int
    kind: str

    def validate(self, n_layers: int) -> "LinearSite":
        if self.kind not in SITE_KINDS:
            raise ValueError(f"unknown site kind {self.kind!r}")
        if not 0 <= self.layer < n_layers:
            raise ValueError(f"layer index {self.layer} out of range for {n_layers} layers")
        return self


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    context_len: int = 64
    rms_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self) -> None:
        dims = (self.vocab_size, self.d_model, self.n_layers, self.n_heads,
                self.d_ff, self.context_len)
        if any(d < 1 for d in dims):
            raise ValueError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def site_in_dim(self, kind: str) -> int:
        return self.d_ff if kind == "down_proj" else self.d_model

    def site_out_dim(self, kind: str) -> int:
        return self.d_ff if kind in ("gate_proj", "up_proj") else self.d_model

    def all_sites(self, kinds: Iterable[str] = SITE_KINDS) -> list[LinearSite]:
        return [LinearSite(l, k).validate(self.n_layers)
                for l in range(self.n_layers) for k in kinds]

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads, "d_ff": self.d_ff,
            "context_len": self.context_len, "rms_eps": self.rms_eps, "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "ModelConfig":
        return ModelConfig(**{k: d[k] for k in (
            "vocab_size", "d_model", "n_layers", "n_heads", "d_ff",
            "context_len", "rms_eps", "seed")})


@dataclass
class LayerWeights:
    q_proj: np.ndarray
    k_proj: np.ndarray
    v_proj: np.ndarray
    o_proj: np.ndarray
    gate_proj: np.ndarray
    up_proj: np.ndarray
    down_proj: np.ndarray
    attn_norm_gain: np.ndarray
    mlp_norm_gain: np.ndarray

    def site_weight(self, kind: str) -> np.ndarray:
        return getattr(self, kind)


@dataclass
class ModelWeights:
    """All trainable arrays, float32, plus sparse per-site bias slots."""

    token_embedding: np.ndarray
    position_embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm_gain: np.ndarray
    unembedding: np.ndarray
    biases: dict[LinearSite, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def init_random(config: ModelConfig, scale: float = 0.02) -> "ModelWeights":
        rng = np.random.default_rng(config.seed)
        def mat(*shape):
            return (rng.standard_normal(shape) * scale).astype(np.float32)
        d, ff, v = config.d_model, config.d_ff, config.vocab_size
        layers = [LayerWeights(
            q_proj=mat(d, d), k_proj=mat(d, d), v_proj=mat(d, d), o_proj=mat(d, d),
            gate_proj=mat(d, ff), up_proj=mat(d, ff), down_proj=mat(ff, d),
            attn_norm_gain=np.ones(d, dtype=np.float32),
            mlp_norm_gain=np.ones(d, dtype=np.float32),
        ) for _ in range(config.n_layers)]
        return ModelWeights(
            token_embedding=mat(v, d),
            position_embedding=mat(config.context_len, d),
            layers=layers,
            final_norm_gain=np.ones(d, dtype=np.float32),
            unembedding=mat(d, v),
        )

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Stable name -> array map; the serialization manifest order."""
        out: dict[str, np.ndarray] = {
            "token_embedding": self.token_embedding,
            "position_embedding": self.position_embedding,
        }
        for i, lw in enumerate(self.layers):
            for kind in SITE_KINDS:
                out[f"layers.{i}.{kind}.weight"] = lw.site_weight(kind)
            out[f"layers.{i}.attn_norm.gain"] = lw.attn_norm_gain
            out[f"layers.{i}.mlp_norm.gain"] = lw.mlp_norm_gain
        out["final_norm.gain"] = self.final_norm_gain
        out["unembedding"] = self.unembedding
        for site in sorted(self.biases):
            out[f"layers.{site.layer}.{site.kind}.bias"] = self.biases[site]
        return out

    def parameter_count(self) -> int:
        return sum(arr.size for arr in self.named_tensors().values())

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            token_embedding=self.token_embedding.copy(),
            position_embedding=self.position_embedding.copy(),
            layers=[LayerWeights(**{
                f: getattr(lw, f).copy() for f in (
                    *SITE_KINDS, "attn_norm_gain", "mlp_norm_gain")
            }) for lw in self.layers],
            final_norm_gain=self.final_norm_gain.copy(),
            unembedding=self.unembedding.copy(),
            biases={s: b.copy() for s, b in self.biases.items()},
        )


@dataclass
class HookCapture:
    """Read-only copies of requested per-site inputs for one forward pass.

    Site arrays have shape [batch*tokens, d_in(site)]; `hidden` is the final
    residual stream before the final norm, shape [batch*tokens, d_model].
    """

    site_inputs: dict[LinearSite, np.ndarray] = field(default_factory=dict)
    hidden: np.ndarray | None = None


# transform(layer, kind, x) -> x, applied to a site's input before its matmul
SiteTransform = Callable[[int, str, Tensor], Tensor]


@dataclass
class ModelRun:
    logits: Tensor            # [batch*tokens, vocab]
    batch: int
    seq: int
    capture: HookCapture | None
    params: dict[str, Tensor]

    def logits_array(self) -> np.ndarray:
        return self.logits.data.reshape(self.batch, self.seq, -1)


def _causal_mask(seq: int, dtype) -> np.ndarray:
    mask = np.zeros((seq, seq), dtype=dtype)
    mask[np.triu_indices(seq, k=1)] = _MASK_FILL
    return mask


def _wrap_weights(weights: ModelWeights, tape: Tape | None, trainable: bool,
                  dtype) -> dict[str, Tensor]:
    named = weights.named_tensors()
    if tape is not None and trainable:
        return {name: tape.parameter(arr, dtype=dtype) for name, arr in named.items()}
    return {name: Tensor(arr, dtype=dtype) for name, arr in named.items()}


def run_model(
    weights: ModelWeights,
    config: ModelConfig,
    token_ids: np.ndarray,
    *,
    tape: Tape | None = None,
    trainable: bool = False,
    site_transform: SiteTransform | None = None,
    capture_sites: Iterable[LinearSite] = (),
    capture_hidden: bool = False,
    dtype=np.float32,
) -> ModelRun:
    """Forward pass over [batch, seq] token ids; returns flat logits."""
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise ValueError(f"token_ids must be [batch, seq], got shape {ids.shape}")
    batch, seq = ids.shape
    if seq > config.context_len:
        raise ValueError(f"sequence length {seq} exceeds context_len {config.context_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError("token id out of range")

    wanted = frozenset(capture_sites)
    capture = HookCapture() if (wanted or capture_hidden) else None
    tn = _wrap_weights(weights, tape, trainable, dtype)
    heads, hd, d = config.n_heads, config.head_dim, config.d_model
    n = batch * seq

    def site(layer: int, kind: str, x: Tensor) -> Tensor:
        key = LinearSite(layer, kind)
        if capture is not None and key in wanted:
            capture.site_inputs[key] = x.data.copy()
        if site_transform is not None:
            x = site_transform(layer, kind, x)
        y = T.matmul(x, tn[f"layers.{layer}.{kind}.weight"])
        bias_name = f"layers.{layer}.{kind}.bias"
        if bias_name in tn:
            y = T.add(y, tn[bias_name])
        return y

    flat = ids.reshape(n)
    pos = np.tile(np.arange(seq), batch)
    h = T.add(T.embedding(tn["token_embedding"], flat),
              T.embedding(tn["position_embedding"], pos))

    mask3 = Tensor(np.broadcast_to(_causal_mask(seq, dtype), (batch * heads, seq, seq)))
    inv_sqrt_hd = 1.0 / np.sqrt(np.asarray(hd, dtype=dtype))

    def split_heads(x: Tensor) -> Tensor:
        x = T.reshape(x, (batch, seq, heads, hd))
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (batch * heads, seq, hd))

    def merge_heads(x: Tensor) -> Tensor:
        x = T.reshape(x, (batch, heads, seq, hd))
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (n, d))

    for layer in range(config.n_layers):
        a_in = T.rms_norm(h, tn[f"layers.{layer}.attn_norm.gain"], config.rms_eps)
        q = split_heads(site(layer, "q_proj", a_in))
        k = split_heads(site(layer, "k_proj", a_in))
        v = split_heads(site(layer, "v_proj", a_in))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), inv_sqrt_hd)
        attn = T.softmax(T.add(scores, mask3), axis=-1)
        ctx = merge_heads(T.matmul(attn, v))
        h = T.add(h, site(layer, "o_proj", ctx))

        m_in = T.rms_norm(h, tn[f"layers.{layer}.mlp_norm.gain"], config.rms_eps)
        gated = T.mul(T.silu(site(layer, "gate_proj", m_in)), site(layer, "up_proj", m_in))
        h = T.add(h, site(layer, "down_proj", gated))

    if capture is not None and capture_hidden:
        capture.hidden = h.data.copy()

    final = T.rms_norm(h, tn["final_norm.gain"], config.rms_eps)
    logits = T.matmul(final, tn["unembedding"])
    return ModelRun(logits=logits, batch=batch, seq=seq, capture=capture, params=tn)


def forward(weights: ModelWeights, config: ModelConfig, token_ids: np.ndarray) -> np.ndarray:
    """Dense forward; logits [batch, seq, vocab]."""
    return run_model(weights, config, token_ids).logits_array()


def forward_hooked(
    weights: ModelWeights,
    config: ModelConfig,
    token_ids: np.ndarray,
    sites: Iterable[LinearSite],
) -> tuple[np.ndarray, HookCapture]:
    """Dense forward plus read-only capture of the requested site inputs."""
    sites = [LinearSite(*s).validate(config.n_layers) for s in sites]
    run = run_model(weights, config, token_ids,
                    capture_sites=sites, capture_hidden=True)
    assert run.capture is not None
    return run.logits_array(), run.capture


# ---------------------------------------------------------------------------
# corpus splitting, likelihoods, training

def corpus_tokens(corpus: bytes | np.ndarray) -> np.ndarray:
    if isinstance(corpus, (bytes, bytearray)):
        return np.frombuffer(bytes(corpus), dtype=np.uint8)
    arr = np.asarray(corpus)
    if arr.dtype != np.uint8:
        raise ValueError("token corpus must be raw bytes")
    return arr


def corpus_blocks(tokens: np.ndarray, block: int) -> np.ndarray:
    """Non-overlapping windows of block+1 tokens (input plus shifted target)."""
    tokens = corpus_tokens(tokens)
    n_blocks = (len(tokens) - 1) // block
    if n_blocks < 1:
        raise ValueError(f"corpus of {len(tokens)} bytes is shorter than block size {block}")
    out = np.empty((n_blocks, block + 1), dtype=np.int64)
    for i in range(n_blocks):
        out[i] = tokens[i * block: i * block + block + 1]
    return out


def split_blocks(tokens: np.ndarray, block: int, holdout_frac: float = 0.1
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/held-out split: the trailing blocks are held out."""
    blocks = corpus_blocks(tokens, block)
    n_hold = max(1, int(round(len(blocks) * holdout_frac)))
    n_hold = min(n_hold, len(blocks))
    return blocks[: len(blocks) - n_hold], blocks[len(blocks) - n_hold:]


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-token negative log-likelihood in float64."""
    x = logits.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1))
    return lse - x[np.arange(len(targets)), targets]


def mean_nll(weights: ModelWeights, config: ModelConfig, blocks: np.ndarray,
             forward_fn: Callable[[np.ndarray], np.ndarray] | None = None,
             batch: int = 16) -> float:
    """Mean next-token NLL over blocks, 64-bit accumulation."""
    if forward_fn is None:
        forward_fn = lambda ids: forward(weights, config, ids)
    tot, count = 0.0, 0
    for start in range(0, len(blocks), batch):
        chunk = blocks[start: start + batch]
        inputs, targets = chunk[:, :-1], chunk[:, 1:]
        logits = forward_fn(inputs)
        v = logits.shape[-1]
        nll = token_nll(logits.reshape(-1, v), targets.reshape(-1))
        tot += nll.sum()
        count += nll.size
    if count == 0:
        raise ValueError("no blocks to evaluate")
    return tot / count


@dataclass
class TrainHyper:
    lr: float = 3e-4
    epochs: int = 5
    batch: int = 16
    block: int = 64


@dataclass
class TrainResult:
    weights: ModelWeights
    config: ModelConfig
    hyper: TrainHyper
    initial_heldout_nll: float
    final_heldout_nll: float
    heldout_nlls: list[float]
    epoch_train_losses: list[float]

    @property
    def final_heldout_ppl(self) -> float:
        return float(np.exp(self.final_heldout_nll))


def train_dense(corpus: bytes | np.ndarray, config: ModelConfig,
                hyper: TrainHyper | None = None) -> TrainResult:
    """Adam training of the dense byte model; deterministic given config.seed."""
    hyper = hyper or TrainHyper()
    if hyper.block > config.context_len:
        raise ValueError(f"block {hyper.block} exceeds context_len {config.context_len}")
    tokens = corpus_tokens(corpus)
    train, heldout = split_blocks(tokens, hyper.block)
    if hyper.epochs > 0 and len(train) == 0:
        raise ValueError("corpus too short: no training blocks left after the held-out split")

    weights = ModelWeights.init_random(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7261]))
    opt = Adam(hyper.lr)
    initial = mean_nll(weights, config, heldout, batch=hyper.batch)
    heldout_nlls = [initial]
    epoch_losses: list[float] = []

    for _ in range(hyper.epochs):
        order = rng.permutation(len(train))
        losses: list[float] = []
        for start in range(0, len(order), hyper.batch):
            chunk = train[order[start: start + hyper.batch]]
            inputs, targets = chunk[:, :-1], chunk[:, 1:]
            tape = Tape()
            run = run_model(weights, config, inputs, tape=tape, trainable=True)
            loss = T.cross_entropy(run.logits, targets.reshape(-1))
            T.backward(loss, tape)
            opt.step(run.params)
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
        heldout_nlls.append(mean_nll(weights, config, heldout, batch=hyper.batch))

    return TrainResult(
        weights=weights, config=config, hyper=hyper,
        initial_heldout_nll=initial, final_heldout_nll=heldout_nlls[-1],
        heldout_nlls=heldout_nlls, epoch_train_losses=epoch_losses,
    )
