"""The forecasting network: multi-scale convolution with self-attention
across regions, an LSTM over each region's own history, parametric-matrix
fusion of the two embeddings, and a linear autoregressive bypass.

Shapes follow one convention throughout: a batch of inputs is B×N×T
(samples × regions × time). Region-wise encoders share weights, so the
batch and region axes are flattened to R = B·N rows before the LSTM and
the convolution stack, then restored before attention mixes regions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import NormStats
from .errors import ConfigError, DataError
from .tensor import (
    BNState,
    DiffArray,
    adaptive_max_pool,
    add,
    batch_norm,
    concat,
    conv1d_bank,
    dropout,
    matmul,
    mul,
    reshape,
    sigmoid,
    softmax_rows,
    tanh,
    transpose_last,
)

ABLATIONS = ("none", "no-inter", "no-intra", "no-ar", "no-raconv", "no-fusion")

# (name, kernel size, dilation); the last block spans the whole window
_FULL_BLOCKS = (("local3", 3, 1), ("local5", 5, 1), ("periodic3", 3, 2), ("periodic5", 5, 2))


@dataclass
class SefnetConfig:
    """Architecture hyperparameters. `filters` is the per-block filter count,
    `pool` the pooled length per filter, `attn_dim` the cross-region
    embedding width, `ar_window` the linear bypass look-back (0 disables)."""

    n_regions: int
    window: int = 20
    horizon: int = 3
    hidden: int = 32
    layers: int = 1
    filters: int = 8
    pool: int = 3
    attn_dim: int = 32
    ar_window: int = 10
    dropout: float = 0.2
    ablation: str = "none"

    def __post_init__(self):
        for name in ("n_regions", "window", "horizon", "hidden", "layers", "filters", "pool"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive int, got {v!r}")
        if not isinstance(self.attn_dim, int) or self.attn_dim < 1:
            raise ConfigError(f"attn_dim must be a positive int, got {self.attn_dim!r}")
        if not isinstance(self.ar_window, int) or self.ar_window < 0:
            raise ConfigError(f"ar_window must be a non-negative int, got {self.ar_window!r}")
        if self.ar_window > self.window:
            raise ConfigError(
                f"ar_window {self.ar_window} exceeds input window {self.window}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.ablation == "no-ar" and self.ar_window != 0:
            raise ConfigError("the no-ar variant requires ar_window = 0")
        if self.uses_raconv:
            # the longest receptive field decides: kernel 5 at dilation 2
            shortest = self.window - 8 if self.ablation != "no-raconv" else self.window - 2
            need = 9 if self.ablation != "no-raconv" else 3
            if self.window < need:
                raise ConfigError(
                    f"window {self.window} shorter than the convolution receptive "
                    f"field; need at least {need}"
                )
            if self.pool > shortest:
                raise ConfigError(
                    f"pool size {self.pool} exceeds the shortest convolution output "
                    f"length {shortest} for window {self.window}"
                )

    @property
    def uses_raconv(self) -> bool:
        return self.ablation != "no-inter"

    @property
    def uses_lstm(self) -> bool:
        return self.ablation != "no-intra"

    @property
    def conv_blocks(self):
        if self.ablation == "no-raconv":
            return (("local3", 3, 1),)
        return _FULL_BLOCKS + (("global", self.window, 1),)

    @property
    def feature_width(self) -> int:
        """Width of the per-region convolution embedding."""
        if self.ablation == "no-raconv":
            return self.pool * self.filters
        return 4 * self.pool * self.filters + self.filters

    @property
    def fused_width(self) -> int:
        w = 0
        if self.uses_raconv:
            w += self.attn_dim
        if self.uses_lstm:
            w += self.hidden
        return w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SefnetConfig":
        return cls(**d)


def ablate(config: SefnetConfig, variant: str) -> SefnetConfig:
    """Return a copy of config with one architectural component removed."""
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {ABLATIONS}")
    if variant == "no-ar":
        return replace(config, ablation=variant, ar_window=0)
    return replace(config, ablation=variant)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SEFNet:
    """Trainable forecaster. Parameters live in an ordered name→DiffArray
    registry so the optimizer and checkpoints enumerate each exactly once."""

    def __init__(self, config: SefnetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        self._dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.params: dict[str, DiffArray] = {}
        self.bn_states: dict[str, BNState] = {}
        # region-mixing weights from the most recent forward pass, for
        # inspection; not part of the model state
        self.last_attention: np.ndarray | None = None
        self._init_params(rng)

    def _add_param(self, name, values):
        self.params[name] = DiffArray(values, requires_grad=True)

    def _init_params(self, rng):
        cfg = self.config
        if cfg.uses_raconv:
            for name, size, _ in cfg.conv_blocks:
                self._add_param(f"raconv.{name}.kernels", _uniform(rng, (cfg.filters, size), size))
                self._add_param(f"raconv.{name}.scale", np.ones(cfg.filters))
                self._add_param(f"raconv.{name}.shift", np.zeros(cfg.filters))
                self.bn_states[name] = BNState.create(cfg.filters)
            F = cfg.feature_width
            for name in ("w_q", "w_k", "w_v"):
                self._add_param(f"attn.{name}", _uniform(rng, (F, cfg.attn_dim), F))
        if cfg.uses_lstm:
            for layer in range(cfg.layers):
                in_dim = 1 if layer == 0 else cfg.hidden
                for gate in ("i", "f", "g", "o"):
                    self._add_param(f"lstm.l{layer}.w_{gate}", _uniform(rng, (in_dim, cfg.hidden), in_dim))
                    self._add_param(f"lstm.l{layer}.u_{gate}", _uniform(rng, (cfg.hidden, cfg.hidden), cfg.hidden))
                    bias = np.zeros(cfg.hidden)
                    if gate == "f":
                        bias += 1.0  # remember-by-default at the start of training
                    self._add_param(f"lstm.l{layer}.b_{gate}", bias)
        if cfg.ablation not in ("no-fusion", "no-inter", "no-intra"):
            # constant init, no rng draw: the plain-concat variant sees the
            # same draw stream and so shares every other initial weight
            if cfg.uses_raconv:
                self._add_param("fusion.w_inter", np.ones((cfg.n_regions, cfg.attn_dim)))
            if cfg.uses_lstm:
                self._add_param("fusion.w_intra", np.ones((cfg.n_regions, cfg.hidden)))
        width = cfg.fused_width
        self._add_param("head.w_dense", _uniform(rng, (width, 1), width))
        self._add_param("head.b_dense", np.zeros(1))
        if cfg.ar_window > 0:
            self._add_param("ar.weights", np.zeros((cfg.ar_window, 1)))
            self._add_param("ar.bias", np.zeros(1))

    # ------------------------------------------------------------------
    # forward pieces

    def intra_forward(self, rows: np.ndarray) -> DiffArray:
        """LSTM over each row's window; returns the last hidden state, R×D."""
        cfg = self.config
        R, T = rows.shape
        steps = [DiffArray(rows[:, t : t + 1]) for t in range(T)]
        for layer in range(cfg.layers):
            p = {k: self.params[f"lstm.l{layer}.{k}"] for k in (
                "w_i", "u_i", "b_i", "w_f", "u_f", "b_f",
                "w_g", "u_g", "b_g", "w_o", "u_o", "b_o",
            )}
            h = DiffArray(np.zeros((R, cfg.hidden)))
            c = DiffArray(np.zeros((R, cfg.hidden)))
            outputs = []
            for x_t in steps:
                i = sigmoid(add(add(matmul(x_t, p["w_i"]), matmul(h, p["u_i"])), p["b_i"]))
                f = sigmoid(add(add(matmul(x_t, p["w_f"]), matmul(h, p["u_f"])), p["b_f"]))
                g = tanh(add(add(matmul(x_t, p["w_g"]), matmul(h, p["u_g"])), p["b_g"]))
                o = sigmoid(add(add(matmul(x_t, p["w_o"]), matmul(h, p["u_o"])), p["b_o"]))
                c = add(mul(f, c), mul(i, g))
                h = mul(o, tanh(c))
                outputs.append(h)
            steps = outputs
        return steps[-1]

    def raconv_forward(self, rows, training: bool) -> DiffArray:
        """Multi-scale convolution embedding per row, R×F.

        rows may be a plain R×T array or an already-tracked DiffArray."""
        cfg = self.config
        x = rows if isinstance(rows, DiffArray) else DiffArray(rows)
        R = x.shape[0]
        parts = []
        for name, size, dil in cfg.conv_blocks:
            feats = conv1d_bank(x, self.params[f"raconv.{name}.kernels"], dil)
            feats = batch_norm(
                feats,
                self.params[f"raconv.{name}.scale"],
                self.params[f"raconv.{name}.shift"],
                self.bn_states[name],
                training=training,
            )
            if name == "global":
                parts.append(reshape(feats, (R, cfg.filters)))
            else:
                pooled = adaptive_max_pool(feats, cfg.pool)
                parts.append(reshape(pooled, (R, cfg.filters * cfg.pool)))
        return tanh(concat(parts, axis=1))

    def attention_forward(self, hdev: DiffArray) -> DiffArray:
        """Mix region embeddings: B×N×F -> B×N×A. Attention logits are raw
        dot products (no scale factor)."""
        q = matmul(hdev, self.params["attn.w_q"])
        k = matmul(hdev, self.params["attn.w_k"])
        weights = softmax_rows(matmul(q, transpose_last(k)))
        self.last_attention = np.array(weights.values)
        return matmul(matmul(weights, hdev), self.params["attn.w_v"])

    def fuse(self, h_inter, h_intra) -> DiffArray:
        """Gate each embedding element-wise per region, then concatenate.
        The plain-concat variant skips the gates entirely."""
        parts = []
        if h_inter is not None:
            if "fusion.w_inter" in self.params:
                h_inter = mul(self.params["fusion.w_inter"], h_inter)
            parts.append(h_inter)
        if h_intra is not None:
            if "fusion.w_intra" in self.params:
                h_intra = mul(self.params["fusion.w_intra"], h_intra)
            parts.append(h_intra)
        return parts[0] if len(parts) == 1 else concat(parts, axis=2)

    def ar_forward(self, x: np.ndarray) -> DiffArray | None:
        """Linear bypass over the last q observations, newest first."""
        q = self.config.ar_window
        if q == 0:
            return None
        B, N, T = x.shape
        lags = np.stack([x[:, :, T - 1 - m] for m in range(q)], axis=-1)
        out = matmul(DiffArray(lags), self.params["ar.weights"])
        out = add(reshape(out, (B, N)), self.params["ar.bias"])
        return out

    def forward(self, x: np.ndarray, training: bool = False) -> DiffArray:
        """Full prediction for a B×N×T batch of normalized windows -> B×N."""
        cfg = self.config
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[1] != cfg.n_regions or x.shape[2] != cfg.window:
            raise ConfigError(
                f"expected input shaped (batch, {cfg.n_regions}, {cfg.window}), "
                f"got {x.shape}"
            )
        B, N, T = x.shape
        rows = x.reshape(B * N, T)
        h_inter = None
        if cfg.uses_raconv:
            hdev = reshape(self.raconv_forward(rows, training), (B, N, cfg.feature_width))
            h_inter = self.attention_forward(hdev)
        h_intra = None
        if cfg.uses_lstm:
            h_intra = reshape(self.intra_forward(rows), (B, N, cfg.hidden))
        fused = self.fuse(h_inter, h_intra)
        fused = dropout(fused, cfg.dropout, self._dropout_rng, training)
        pred = add(
            reshape(matmul(fused, self.params["head.w_dense"]), (B, N)),
            self.params["head.b_dense"],
        )
        linear = self.ar_forward(x)
        return pred if linear is None else add(pred, linear)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode forward returning plain values; accepts N×T or B×N×T."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 2
        if single:
            x = x[None]
        out = self.forward(x, training=False).values
        return out[0] if single else out

    # ------------------------------------------------------------------
    # persistence

    def state_dict(self) -> dict:
        return {
            "params": {
                name: {"shape": list(p.values.shape), "values": p.values.ravel().tolist()}
                for name, p in self.params.items()
            },
            "bn_state": {
                name: {"mean": st.running_mean.tolist(), "var": st.running_var.tolist()}
                for name, st in self.bn_states.items()
            },
        }

    def load_state_dict(self, state: dict) -> None:
        recorded = set(state["params"])
        expected = set(self.params)
        if recorded != expected:
            missing = sorted(expected - recorded)
            extra = sorted(recorded - expected)
            raise DataError(
                f"checkpoint parameters do not match architecture; "
                f"missing {missing}, unexpected {extra}"
            )
        for name, entry in state["params"].items():
            values = np.asarray(entry["values"], dtype=float).reshape(entry["shape"])
            if values.shape != self.params[name].values.shape:
                raise DataError(
                    f"checkpoint parameter {name} has shape {values.shape}, "
                    f"expected {self.params[name].values.shape}"
                )
            self.params[name].values = np.ascontiguousarray(values)
        for name, entry in state.get("bn_state", {}).items():
            if name not in self.bn_states:
                raise DataError(f"checkpoint carries stats for unknown block {name!r}")
            self.bn_states[name].running_mean = np.asarray(entry["mean"], dtype=float)
            self.bn_states[name].running_var = np.asarray(entry["var"], dtype=float)

    def snapshot(self) -> dict:
        """Deep copy of all learnable state, for best-epoch checkpointing."""
        return {
            "params": {k: p.values.copy() for k, p in self.params.items()},
            "bn": {k: st.copy() for k, st in self.bn_states.items()},
        }

    def restore(self, snap: dict) -> None:
        for k, values in snap["params"].items():
            self.params[k].values = values.copy()
        for k, st in snap["bn"].items():
            self.bn_states[k] = st.copy()


def save_checkpoint(path, model: SEFNet, stats: NormStats, regions, extra: dict | None = None):
    """Write a self-contained JSON checkpoint (architecture, weights,
    normalization ranges, region labels)."""
    doc = {
        "config": model.config.to_dict(),
        "regions": list(regions),
        "norm_stats": stats.to_dict(),
        **model.state_dict(),
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (model, stats, regions). The model comes
    back in eval state with the saved weights."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    for key in ("config", "regions", "norm_stats", "params"):
        if key not in doc:
            raise DataError(f"checkpoint {path} lacks required field {key!r}")
    try:
        config = SefnetConfig.from_dict(doc["config"])
    except TypeError as exc:
        raise DataError(f"checkpoint {path} has a malformed config: {exc}") from None
    model = SEFNet(config, seed=0)
    model.load_state_dict(doc)
    stats = NormStats.from_dict(doc["norm_stats"])
    return model, stats, list(doc["regions"])
