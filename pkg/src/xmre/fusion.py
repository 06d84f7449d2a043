"""Cross-modal selection, consistency reweighting and the relation classifier.

The selection stack runs L layers of multi-head attention in which each
textual sequence attends over [visual rows mapped to text width; its own
tokens] and each visual row attends over [content tokens mapped to visual
width; all visual rows], both updates computed from the layer-l streams.
Pooling takes the mean of the two opening-marker rows for the content
sentence and the CLS row of every retrieved text. Consistency reweights the
retrieved stacks by projected dot products against the pooled content, and
the classifier is a two-layer feed-forward network over the concatenated
four pooled vectors. Gradients for every parameter flow through
:mod:`xmre.autodiff`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from xmre import autodiff as ad
from xmre.autodiff import Tensor
from xmre.encoders import (
    TAG_CONTENT_IMAGE,
    TAG_CONTENT_OBJECT,
    TAG_RETRIEVED,
    PreparedInstance,
    TextFeatures,
    ToyTextEncoder,
)
from xmre.errors import ConfigError, ContractViolation, FeatureFileError
from xmre.featfile import Record, read_records, write_records

CONFIG_RECORD_KEY = "__config__"


@dataclass(frozen=True)
class FusionConfig:
    """Dimensions, wiring and ablation switches of the fusion model."""

    n_labels: int
    d_text: int = 16
    d_vis: int = 32
    n_layers: int = 2
    heads_text: int = 2
    heads_vis: int = 2
    hidden_dim: int = 1024
    temp_text: float | None = None  # defaults to d_text
    temp_vis: float | None = None  # defaults to d_vis
    no_selection: bool = False
    no_consistency: bool = False
    scale: str = "toy"  # "toy" | "paper"
    vocab_size: int = 4096
    max_positions: int = 160

    def __post_init__(self) -> None:
        if self.n_labels < 2:
            raise ConfigError("need at least 2 relation labels")
        for d, h, name in (
            (self.d_text, self.heads_text, "text"),
            (self.d_vis, self.heads_vis, "visual"),
        ):
            if h < 1 or d % h != 0:
                raise ConfigError(
                    f"{name} stream width {d} is not divisible by {h} heads"
                )
        if self.text_temperature <= 0 or self.vis_temperature <= 0:
            raise ConfigError("consistency temperatures must be strictly positive")
        if self.scale not in ("toy", "paper"):
            raise ConfigError(f"unknown scale {self.scale!r}")

    @property
    def text_temperature(self) -> float:
        return float(self.d_text if self.temp_text is None else self.temp_text)

    @property
    def vis_temperature(self) -> float:
        return float(self.d_vis if self.temp_vis is None else self.temp_vis)

    @property
    def classifier_input_dim(self) -> int:
        return 2 * self.d_text + 2 * self.d_vis


@dataclass
class FusionOutput:
    """Pooled vectors, logits and probabilities for one instance."""

    h_t_content: np.ndarray
    h_t_retrieved: np.ndarray
    h_v_content: np.ndarray
    h_v_retrieved: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray
    no_text_evidence: bool
    no_visual_evidence: bool
    logits_tensor: Tensor = field(repr=False, default=None)


def _name_seed(seed: int, name: str) -> np.random.Generator:
    tag = int.from_bytes(hashlib.blake2s(name.encode()).digest()[:8], "little")
    return np.random.default_rng([abs(int(seed)), tag])


def multi_head_attention(
    query: Tensor,
    keys_values: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    n_heads: int,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention with per-head 1/sqrt(d_h) scaling.

    ``query`` is (T, d) and ``keys_values`` (S, d); masked key positions
    receive exactly zero attention weight for every query row.
    """

    t, d = query.shape
    s = keys_values.shape[0]
    if keys_values.shape[1] != d:
        raise ContractViolation(
            f"query width {d} != key/value width {keys_values.shape[1]}"
        )
    if s == 0:
        raise ContractViolation("attention requires at least one key")
    d_h = d // n_heads
    q = ad.transpose(ad.reshape(ad.matmul(query, w_q), (t, n_heads, d_h)), (1, 0, 2))
    k = ad.transpose(ad.reshape(ad.matmul(keys_values, w_k), (s, n_heads, d_h)), (1, 2, 0))
    v = ad.transpose(ad.reshape(ad.matmul(keys_values, w_v), (s, n_heads, d_h)), (1, 0, 2))
    scores = ad.scale(ad.matmul(q, k), 1.0 / np.sqrt(d_h))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool).reshape(1, 1, s)
    attn = ad.masked_softmax(scores, mask, axis=-1)
    mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)), (t, d))
    return ad.matmul(mixed, w_o)


def consistency_reweight(
    query_vec: Tensor, retrieved: Tensor, w: Tensor, w_prime: Tensor, temperature: float
) -> Tensor:
    """Softmax-reweighted sum of retrieved rows, scores scaled by 1/sqrt(temp)."""

    n, d = retrieved.shape
    if n < 1:
        raise ContractViolation("consistency requires at least one retrieved row")
    q = ad.matmul(ad.reshape(query_vec, (1, d)), w)
    keys = ad.matmul(retrieved, w_prime)
    logits = ad.scale(ad.matmul(q, ad.transpose(keys, (1, 0))), 1.0 / np.sqrt(temperature))
    weights = ad.masked_softmax(logits, None, axis=-1)
    return ad.reshape(ad.matmul(weights, retrieved), (d,))


class FusionModel:
    """All trainable parameters plus the forward/backward passes."""

    def __init__(self, config: FusionConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.text_encoder: ToyTextEncoder | None = None
        if config.scale == "toy":
            self.text_encoder = ToyTextEncoder(
                config.d_text, config.vocab_size, config.max_positions, self.seed
            )
        self.params: dict[str, Tensor] = {}
        if self.text_encoder is not None:
            self.params.update(self.text_encoder.parameters())

        def init(name: str, shape: tuple[int, ...], std: float = 0.02) -> None:
            rng = _name_seed(self.seed, name)
            self.params[name] = ad.parameter(rng.normal(0.0, std, shape))

        def zeros(name: str, shape: tuple[int, ...]) -> None:
            self.params[name] = ad.parameter(np.zeros(shape))

        dt, dv = config.d_text, config.d_vis
        init("sel/phi/W", (dv, dt))
        zeros("sel/phi/b", (dt,))
        init("sel/theta/W", (dt, dv))
        zeros("sel/theta/b", (dv,))
        for layer in range(config.n_layers):
            for branch, d in (("text", dt), ("vis", dv)):
                for proj in ("Wq", "Wk", "Wv", "Wo"):
                    init(f"sel/l{layer}/{branch}/{proj}", (d, d))
        init("cons/text/W", (dt, dt))
        init("cons/text/Wp", (dt, dt))
        init("cons/vis/W", (dv, dv))
        init("cons/vis/Wp", (dv, dv))
        init("clf/W1", (config.classifier_input_dim, config.hidden_dim))
        zeros("clf/b1", (config.hidden_dim,))
        init("clf/W2", (config.hidden_dim, config.n_labels))
        zeros("clf/b2", (config.n_labels,))

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Copy of accumulated gradients; zero arrays for untouched parameters."""

        return {
            name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for name, p in self.params.items()
        }

    # -- forward -------------------------------------------------------------

    def _encode_text(self, prepared: PreparedInstance) -> tuple[TextFeatures, list[TextFeatures]]:
        if prepared.content_tokens is not None:
            if self.text_encoder is None:
                raise ConfigError("token inputs require toy scale")
            content = self.text_encoder.encode(
                prepared.content_tokens,
                e1_pos=prepared.content_e1,
                e2_pos=prepared.content_e2,
            )
            evidence = [
                self.text_encoder.encode(ev.tokens, add_cls=True)
                for ev in prepared.evidence
            ]
            return content, evidence
        if prepared.content_features is None:
            raise ContractViolation("prepared instance has neither tokens nor features")
        return prepared.content_features, [ev.features for ev in prepared.evidence]

    def forward(self, prepared: PreparedInstance) -> FusionOutput:
        cfg = self.config
        content, evidence = self._encode_text(prepared)
        if content.e1_pos is None or content.e2_pos is None:
            raise ContractViolation("content sequence lacks marker positions")
        for feats in (content, *evidence):
            if feats.matrix.shape[1] != cfg.d_text:
                raise ConfigError(
                    f"text features width {feats.matrix.shape[1]} != d_text {cfg.d_text}"
                )
        visual = prepared.visual
        if visual.matrix.shape[1] != cfg.d_vis:
            raise ConfigError(
                f"visual features width {visual.matrix.shape[1]} != d_vis {cfg.d_vis}"
            )
        for pos, mask in ((content.e1_pos, content.mask), (content.e2_pos, content.mask)):
            if mask is not None and not mask[pos]:
                raise ContractViolation(f"pooled marker position {pos} is masked")

        p = self.params
        t_seqs = [content.matrix] + [ev.matrix for ev in evidence]
        t_masks = [content.mask] + [ev.mask for ev in evidence]
        v_mat = visual.matrix
        v_mask = visual.mask

        if not cfg.no_selection:
            for layer in range(cfg.n_layers):
                v_in_text = ad.add(ad.matmul(v_mat, p["sel/phi/W"]), p["sel/phi/b"])
                t_in_vis = ad.add(ad.matmul(t_seqs[0], p["sel/theta/W"]), p["sel/theta/b"])
                lt = f"sel/l{layer}/text"
                lv = f"sel/l{layer}/vis"
                new_seqs = []
                for seq, mask in zip(t_seqs, t_masks):
                    kv = ad.concat([v_in_text, seq], axis=0)
                    kv_mask = _concat_masks((v_mask, v_mat.shape[0]), (mask, seq.shape[0]))
                    new_seqs.append(
                        multi_head_attention(
                            seq, kv, p[f"{lt}/Wq"], p[f"{lt}/Wk"], p[f"{lt}/Wv"],
                            p[f"{lt}/Wo"], cfg.heads_text, kv_mask,
                        )
                    )
                kv_v = ad.concat([t_in_vis, v_mat], axis=0)
                kv_v_mask = _concat_masks(
                    (t_masks[0], t_seqs[0].shape[0]), (v_mask, v_mat.shape[0])
                )
                v_mat = multi_head_attention(
                    v_mat, kv_v, p[f"{lv}/Wq"], p[f"{lv}/Wk"], p[f"{lv}/Wv"],
                    p[f"{lv}/Wo"], cfg.heads_vis, kv_v_mask,
                )
                t_seqs = new_seqs

        # Pooling: mean of the opening-marker rows for the content sentence,
        # CLS row for every retrieved text, tag-partitioned rows for images.
        h_t_content = ad.mean_rows(
            ad.gather_rows(t_seqs[0], [content.e1_pos, content.e2_pos]), axis=0
        )
        retrieved_rows = []
        for feats, seq in zip(evidence, t_seqs[1:]):
            if feats.cls_pos is None:
                raise ContractViolation("retrieved text lacks a CLS position")
            retrieved_rows.append(ad.gather_rows(seq, [feats.cls_pos]))
        content_idx = visual.rows_tagged(TAG_CONTENT_IMAGE, TAG_CONTENT_OBJECT)
        retrieved_idx = visual.rows_tagged(TAG_RETRIEVED)
        if not content_idx:
            raise ContractViolation("visual stream has no content rows")
        h_v_content = ad.mean_rows(ad.gather_rows(v_mat, content_idx), axis=0)

        no_text_evidence = len(retrieved_rows) == 0
        no_visual_evidence = len(retrieved_idx) == 0
        if no_text_evidence:
            h_t_retrieved = ad.constant(np.zeros(cfg.d_text))
        else:
            stack_t = ad.concat(retrieved_rows, axis=0)
            if cfg.no_consistency:
                h_t_retrieved = ad.mean_rows(stack_t, axis=0)
            else:
                h_t_retrieved = consistency_reweight(
                    h_t_content, stack_t, p["cons/text/W"], p["cons/text/Wp"],
                    cfg.text_temperature,
                )
        if no_visual_evidence:
            h_v_retrieved = ad.constant(np.zeros(cfg.d_vis))
        else:
            stack_v = ad.gather_rows(v_mat, retrieved_idx)
            if cfg.no_consistency:
                h_v_retrieved = ad.mean_rows(stack_v, axis=0)
            else:
                query = ad.add(
                    ad.reshape(
                        ad.matmul(ad.reshape(h_t_content, (1, cfg.d_text)), p["sel/theta/W"]),
                        (cfg.d_vis,),
                    ),
                    p["sel/theta/b"],
                )
                h_v_retrieved = consistency_reweight(
                    query, stack_v, p["cons/vis/W"], p["cons/vis/Wp"], cfg.vis_temperature
                )

        final = ad.concat([h_t_content, h_t_retrieved, h_v_content, h_v_retrieved], axis=0)
        hidden = ad.gelu(
            ad.add(ad.matmul(ad.reshape(final, (1, -1)), p["clf/W1"]), p["clf/b1"])
        )
        logits = ad.reshape(
            ad.add(ad.matmul(hidden, p["clf/W2"]), p["clf/b2"]), (cfg.n_labels,)
        )
        return FusionOutput(
            h_t_content=h_t_content.data.copy(),
            h_t_retrieved=h_t_retrieved.data.copy(),
            h_v_content=h_v_content.data.copy(),
            h_v_retrieved=h_v_retrieved.data.copy(),
            logits=logits.data.copy(),
            probabilities=ad.softmax_np(logits.data),
            no_text_evidence=no_text_evidence,
            no_visual_evidence=no_visual_evidence,
            logits_tensor=logits,
        )

    def loss_and_backward(self, output: FusionOutput, gold_label: int) -> float:
        """Accumulate exact cross-entropy gradients into every parameter."""

        if output.logits_tensor is None:
            raise ContractViolation("forward output carries no graph")
        loss = ad.cross_entropy(output.logits_tensor, gold_label)
        loss.backward()
        return loss.item()

    # -- checkpoints -----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        records = [Record(CONFIG_RECORD_KEY, _encode_config(self.config, self.seed))]
        for name in sorted(self.params):
            records.append(Record(name, self.params[name].data))
        write_records(path, records)

    @classmethod
    def load(cls, path: str | Path) -> "FusionModel":
        records = read_records(path)
        if CONFIG_RECORD_KEY not in records:
            raise FeatureFileError(f"{path}: checkpoint lacks a config record")
        config, seed = _decode_config(records[CONFIG_RECORD_KEY].matrix)
        model = cls(config, seed=seed)
        for name, param in model.params.items():
            if name not in records:
                raise FeatureFileError(f"{path}: checkpoint missing parameter {name!r}")
            data = records[name].matrix.astype(np.float64)
            if data.shape != param.data.shape and data.size == param.data.size:
                data = data.reshape(param.data.shape)
            if data.shape != param.data.shape:
                raise FeatureFileError(
                    f"{path}: parameter {name!r} has shape {data.shape}, "
                    f"expected {param.data.shape}"
                )
            param.data = data
        return model


def _concat_masks(*parts: tuple[np.ndarray | None, int]) -> np.ndarray | None:
    if all(mask is None for mask, _ in parts):
        return None
    return np.concatenate(
        [np.ones(n, dtype=bool) if mask is None else mask for mask, n in parts]
    )


def _encode_config(config: FusionConfig, seed: int) -> np.ndarray:
    payload = dict(asdict(config), seed=seed)
    raw = json.dumps(payload, sort_keys=True).encode("utf-8")
    raw += b" " * (-len(raw) % 4)
    return np.frombuffer(raw, dtype="<f4").reshape(1, -1)


def _decode_config(matrix: np.ndarray) -> tuple[FusionConfig, int]:
    raw = np.ascontiguousarray(matrix, dtype="<f4").tobytes().decode("utf-8")
    payload = json.loads(raw)
    seed = int(payload.pop("seed"))
    return FusionConfig(**payload), seed
