"""The view-set classifier: adapter, attention encoder, pooling, decoder.

A shape arrives as an unordered set of per-view feature vectors (one row
per view). A learnable affine adapter projects the raw features to the
working width, a stack of pre-norm attention blocks mixes information
across views, and a column-wise max|mean pooling collapses the set into
a fixed-size descriptor that an MLP head turns into class logits.

With position encodings and the class token disabled (the default), the
whole pipeline is invariant to the order of the input rows: the encoder
is permutation-equivariant and the pooling is symmetric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node

DECODER_HIDDEN = 512


@dataclass
class ModelConfig:
    dim_in: int
    num_classes: int
    dim_view: int = 512
    num_blocks: int = 4
    num_heads: int = 8
    mlp_ratio: int = 2
    dropout_rate: float = 0.1
    use_position_encoding: bool = False
    use_class_token: bool = False
    max_views: int = 64
    decoder_depth: int = 2
    norm_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self) -> None:
        if self.dim_view % self.num_heads != 0:
            raise ValueError(
                f"dim_view {self.dim_view} not divisible by num_heads {self.num_heads}")
        # num_blocks 0 is allowed as the encoder-less ablation baseline
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.decoder_depth not in (1, 2, 3):
            raise ValueError("decoder_depth must be 1, 2 or 3")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.dim_in < 1:
            raise ValueError("dim_in must be >= 1")

    def to_dict(self) -> dict:
        return {
            "dim_in": self.dim_in, "num_classes": self.num_classes,
            "dim_view": self.dim_view, "num_blocks": self.num_blocks,
            "num_heads": self.num_heads, "mlp_ratio": self.mlp_ratio,
            "dropout_rate": self.dropout_rate,
            "use_position_encoding": self.use_position_encoding,
            "use_class_token": self.use_class_token,
            "max_views": self.max_views, "decoder_depth": self.decoder_depth,
            "norm_eps": self.norm_eps, "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.probabilities))


def _uniform_init(rng: np.random.Generator, rows: int, cols: int,
                  fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=(rows, cols))


class Model:
    """Parameter container plus forward passes.

    Parameters live in an insertion-ordered name -> Node dict so that
    optimizers and checkpoints see a stable ordering. `buffers` holds
    non-trained state (the decoder's running normalization statistics).
    """

    def __init__(self, config: ModelConfig, params: dict[str, Node],
                 buffers: dict[str, np.ndarray]):
        config.validate()
        self.config = config
        self.params = params
        self.buffers = buffers

    @classmethod
    def build(cls, config: ModelConfig, rng: np.random.Generator) -> "Model":
        config.validate()
        d, k = config.dim_view, config.num_classes
        p: dict[str, Node] = {}
        b: dict[str, np.ndarray] = {}

        p["adapter.w"] = ad.parameter(_uniform_init(rng, d, config.dim_in, config.dim_in))
        p["adapter.b"] = ad.parameter(np.zeros((1, d)))

        if config.use_position_encoding:
            p["pos.table"] = ad.parameter(_uniform_init(rng, config.max_views, d, d))
        if config.use_class_token:
            p["cls.token"] = ad.parameter(_uniform_init(rng, 1, d, d))
            p["cls.proj.w"] = ad.parameter(_uniform_init(rng, d, 2 * d, d))
            p["cls.proj.b"] = ad.parameter(np.zeros((1, 2 * d)))

        hidden = config.mlp_ratio * d
        for i in range(config.num_blocks):
            pre = f"block{i}"
            p[f"{pre}.ln1.g"] = ad.parameter(np.ones((1, d)))
            p[f"{pre}.ln1.b"] = ad.parameter(np.zeros((1, d)))
            for name in ("q", "k", "v", "o"):
                p[f"{pre}.attn.w{name}"] = ad.parameter(_uniform_init(rng, d, d, d))
                p[f"{pre}.attn.b{name}"] = ad.parameter(np.zeros((1, d)))
            p[f"{pre}.ln2.g"] = ad.parameter(np.ones((1, d)))
            p[f"{pre}.ln2.b"] = ad.parameter(np.zeros((1, d)))
            p[f"{pre}.mlp.w1"] = ad.parameter(_uniform_init(rng, d, hidden, d))
            p[f"{pre}.mlp.b1"] = ad.parameter(np.zeros((1, hidden)))
            p[f"{pre}.mlp.w2"] = ad.parameter(_uniform_init(rng, hidden, d, hidden))
            p[f"{pre}.mlp.b2"] = ad.parameter(np.zeros((1, d)))

        t = 2 * d  # descriptor width
        if config.decoder_depth == 1:
            p["dec.w1"] = ad.parameter(_uniform_init(rng, t, k, t))
            p["dec.b1"] = ad.parameter(np.zeros((1, k)))
        else:
            widths = [t] + [DECODER_HIDDEN] * (config.decoder_depth - 1) + [k]
            for j in range(config.decoder_depth):
                w_in, w_out = widths[j], widths[j + 1]
                p[f"dec.w{j + 1}"] = ad.parameter(_uniform_init(rng, w_in, w_out, w_in))
                p[f"dec.b{j + 1}"] = ad.parameter(np.zeros((1, w_out)))
                if j < config.decoder_depth - 1:
                    p[f"dec.bn{j + 1}.g"] = ad.parameter(np.ones((1, w_out)))
                    p[f"dec.bn{j + 1}.b"] = ad.parameter(np.zeros((1, w_out)))
                    b[f"dec.bn{j + 1}.mean"] = np.zeros((1, w_out))
                    b[f"dec.bn{j + 1}.var"] = np.ones((1, w_out))
        return cls(config, p, b)

    # ------------------------------------------------------------------
    # forward pieces

    def init_features(self, raw: np.ndarray) -> Node:
        """Adapter: project raw per-view features to the working width."""
        raw = ad.as_matrix(raw)
        if raw.shape[1] != self.config.dim_in:
            raise ValueError(
                f"feature width {raw.shape[1]} does not match configured "
                f"dim_in {self.config.dim_in}")
        x = ad.constant(raw)
        return ad.add(ad.matmul(x, ad.transpose(self.params["adapter.w"])),
                      self.params["adapter.b"])

    def _attention(self, z: Node, i: int, train: bool,
                   rng: np.random.Generator | None,
                   capture: list[np.ndarray] | None) -> Node:
        cfg = self.config
        p = self.params
        pre = f"block{i}"
        dh = cfg.dim_view // cfg.num_heads

        h = ad.layer_norm(z, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], cfg.norm_eps)
        q = ad.add(ad.matmul(h, p[f"{pre}.attn.wq"]), p[f"{pre}.attn.bq"])
        k = ad.add(ad.matmul(h, p[f"{pre}.attn.wk"]), p[f"{pre}.attn.bk"])
        v = ad.add(ad.matmul(h, p[f"{pre}.attn.wv"]), p[f"{pre}.attn.bv"])

        heads = []
        maps = []
        for hd in range(cfg.num_heads):
            lo, hi = hd * dh, (hd + 1) * dh
            qs, ks, vs = (ad.slice_cols(q, lo, hi), ad.slice_cols(k, lo, hi),
                          ad.slice_cols(v, lo, hi))
            scores = ad.scale(ad.matmul(qs, ad.transpose(ks)), 1.0 / math.sqrt(dh))
            attn = ad.softmax_rows(scores)
            if capture is not None:
                maps.append(attn.value)
            heads.append(ad.matmul(attn, vs))
        if capture is not None:
            capture.append(np.mean(maps, axis=0))

        msa = ad.add(ad.matmul(ad.concat_cols(heads), p[f"{pre}.attn.wo"]),
                     p[f"{pre}.attn.bo"])
        zhat = ad.add(ad.dropout(msa, cfg.dropout_rate, train, rng), z)

        h2 = ad.layer_norm(zhat, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], cfg.norm_eps)
        mlp = ad.add(ad.matmul(ad.gelu(
            ad.add(ad.matmul(h2, p[f"{pre}.mlp.w1"]), p[f"{pre}.mlp.b1"])),
            p[f"{pre}.mlp.w2"]), p[f"{pre}.mlp.b2"])
        return ad.add(ad.dropout(mlp, cfg.dropout_rate, train, rng), zhat)

    def encode(self, z0: Node, train: bool = False,
               rng: np.random.Generator | None = None,
               capture: list[np.ndarray] | None = None) -> Node:
        """Run the attention blocks over the initialized view rows."""
        cfg = self.config
        m = z0.shape[0]
        if cfg.use_position_encoding:
            if m > cfg.max_views:
                raise ValueError(
                    f"{m} views exceed the position table size {cfg.max_views}")
            z0 = ad.add(z0, ad.slice_rows(self.params["pos.table"], 0, m))
        if cfg.use_class_token:
            z0 = ad.concat_rows([self.params["cls.token"], z0])
        z = z0
        for i in range(cfg.num_blocks):
            z = self._attention(z, i, train, rng, capture)
        return z

    def transition(self, zl: Node) -> Node:
        """Collapse the encoded set into its fixed-width descriptor."""
        if self.config.use_class_token:
            row = ad.slice_rows(zl, 0, 1)
            return ad.add(ad.matmul(row, self.params["cls.proj.w"]),
                          self.params["cls.proj.b"])
        return ad.concat_cols([ad.max_rows(zl), ad.mean_rows(zl)])

    def decode(self, t: Node, train: bool = False) -> Node:
        """Classifier head over a batch of descriptors (rows)."""
        cfg = self.config
        p = self.params
        h = t
        for j in range(1, cfg.decoder_depth + 1):
            h = ad.add(ad.matmul(h, p[f"dec.w{j}"]), p[f"dec.b{j}"])
            if j < cfg.decoder_depth:
                h = self._batch_norm(h, f"dec.bn{j}", train)
                h = ad.relu(h)
        return h

    def _batch_norm(self, x: Node, name: str, train: bool) -> Node:
        cfg = self.config
        gamma, beta = self.params[f"{name}.g"], self.params[f"{name}.b"]
        if train:
            out, mu, var = ad.batch_standardize(x, gamma, beta, cfg.norm_eps)
            mom = cfg.bn_momentum
            self.buffers[f"{name}.mean"] = (1 - mom) * self.buffers[f"{name}.mean"] + mom * mu
            self.buffers[f"{name}.var"] = (1 - mom) * self.buffers[f"{name}.var"] + mom * var
            return out
        inv = 1.0 / np.sqrt(self.buffers[f"{name}.var"] + cfg.norm_eps)
        xhat = ad.affine_rows(x, inv, -self.buffers[f"{name}.mean"] * inv)
        return ad.add(ad.mul(xhat, gamma), beta)

    # ------------------------------------------------------------------
    # whole-model passes

    def descriptor(self, raw: np.ndarray, train: bool = False,
                   rng: np.random.Generator | None = None,
                   capture: list[np.ndarray] | None = None) -> Node:
        return self.transition(self.encode(self.init_features(raw), train, rng, capture))

    def forward_batch(self, raw_sets: list[np.ndarray], train: bool = False,
                      rng: np.random.Generator | None = None) -> Node:
        """Logits for a batch of view sets, one row per shape."""
        descriptors = [self.descriptor(raw, train, rng) for raw in raw_sets]
        return self.decode(ad.concat_rows(descriptors), train)

    def predict(self, raw: np.ndarray) -> Prediction:
        logits = self.forward_batch([raw], train=False).value[0]
        shifted = logits - logits.max()
        e = np.exp(shifted)
        return Prediction(logits=logits, probabilities=e / e.sum())

    def export_attention(self, raw: np.ndarray) -> list[np.ndarray]:
        """Head-averaged row-stochastic attention map for every block."""
        capture: list[np.ndarray] = []
        self.encode(self.init_features(raw), train=False, capture=capture)
        return capture

    # ------------------------------------------------------------------
    # bookkeeping

    def parameter_count(self, include_adapter: bool = False) -> int:
        total = 0
        for name, node in self.params.items():
            if not include_adapter and name.startswith("adapter."):
                continue
            total += node.value.size
        return total

    def trainable(self, freeze_adapter: bool = False) -> dict[str, Node]:
        return {name: node for name, node in self.params.items()
                if not (freeze_adapter and name.startswith("adapter."))}

    def zero_grads(self) -> None:
        for node in self.params.values():
            node.zero_grad()

    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        return ({k: v.value for k, v in self.params.items()}, dict(self.buffers))

    def load_state(self, params: dict[str, np.ndarray],
                   buffers: dict[str, np.ndarray]) -> None:
        if set(params) != set(self.params):
            missing = set(self.params) ^ set(params)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, arr in params.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(
                    f"shape mismatch for {k}: {arr.shape} vs {self.params[k].shape}")
            self.params[k].value = np.array(arr, dtype=np.float64)
            self.params[k].grad = np.zeros_like(self.params[k].value)
        self.buffers = {k: np.array(v, dtype=np.float64) for k, v in buffers.items()}

    def clone_state(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        return ({k: v.value.copy() for k, v in self.params.items()},
                {k: v.copy() for k, v in self.buffers.items()})
