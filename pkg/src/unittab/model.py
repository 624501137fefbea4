"""Two-level transformer over tabular time series.

A Field Transformer attends across the embedded fields of one row (no
positional encoding; fields are order-free). Each row's field outputs are
flattened and mapped to the fixed sequence width m by a row-type-specific
matrix W_h; the Sequence Transformer (learned positional embeddings, padding
masked out of attention) attends across the per-row vectors, optionally with
a [CLS] slot at position 0 for fine-tuning. For pretraining, each row output
is mapped back to width d * k_h by S_h, split into per-field slices, and fed
to per-attribute prediction heads at masked positions.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .embedding import build_bank, embed_slot_batch
from .schema import CATEGORICAL, NUMERICAL, Schema
from .tensor import (
    Tensor, concat, dropout, embedding_gather, gelu, layer_norm, matmul,
    relu, reshape, slice_, softmax, transpose,
)


class ModelError(Exception):
    pass


class LengthError(ModelError):
    pass


@dataclass
class ModelConfig:
    d: int = 16                    # field embedding width
    m: int = 64                    # sequence width
    field_layers: int = 1
    field_heads: int = 4
    seq_layers: int = 2
    seq_heads: int = 4
    ff_multiplier: int = 4
    dropout: float = 0.1
    freq_count: int = 8            # L sin/cos frequency pairs
    t_max: int = 10
    numeric_input: str = "frequency"   # "frequency" | "binned"
    numeric_target: str = "bins"       # "bins" | "scalar" (regression ablation)
    n_row_types: int = 1
    activation: str = "gelu"           # "gelu" | "relu"
    norm_placement: str = "post"       # "post" | "pre"
    numeric_norm: str = "minmax01"     # "minmax01" | "none"
    task_head: str | None = None       # "regression" | "binary", set at fine-tune time

    def validate(self) -> None:
        if self.d % self.field_heads or self.m % self.seq_heads:
            raise ModelError("head count must divide the corresponding width")
        if self.numeric_input not in ("frequency", "binned"):
            raise ModelError(f"unknown numeric_input {self.numeric_input!r}")
        if self.numeric_target not in ("bins", "scalar"):
            raise ModelError(f"unknown numeric_target {self.numeric_target!r}")
        if self.activation not in ("gelu", "relu"):
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.norm_placement not in ("post", "pre"):
            raise ModelError(f"unknown norm_placement {self.norm_placement!r}")
        if self.task_head not in (None, "regression", "binary"):
            raise ModelError(f"unknown task_head {self.task_head!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")

    @classmethod
    def desk_preset(cls, **overrides) -> "ModelConfig":
        return cls(d=16, m=64, field_layers=1, field_heads=4, seq_layers=2, seq_heads=4,
                   **overrides)

    @classmethod
    def full_preset(cls, **overrides) -> "ModelConfig":
        # full-scale layer/head counts; widths kept desk-friendly because
        # hundred-million-parameter training is out of scope
        return cls(d=64, m=144, field_layers=1, field_heads=8, seq_layers=12, seq_heads=12,
                   **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class PretrainOutput:
    """Per-attribute groupings of masked-position predictions."""
    cat_groups: list  # (attr, logits Tensor (N, q), target dists ndarray (N, q))
    reg_groups: list  # (attr, preds Tensor (N,), scalar targets ndarray (N,))
    n_masked: int = 0


class Model:
    def __init__(self, config: ModelConfig, schema: Schema, seed: int = 0):
        config.validate()
        if config.n_row_types != schema.n_row_types:
            raise ModelError(
                f"config.n_row_types={config.n_row_types} but schema has {schema.n_row_types}")
        self.config = config
        self.schema = schema
        self.params: dict[str, Tensor] = {}
        self.no_decay: set[str] = set()
        rng = np.random.default_rng(np.random.SeedSequence([seed]))

        self.bank, bank_params = build_bank(
            schema, config.d, config.m, config.freq_count,
            config.numeric_input, config.numeric_norm, rng)
        self.params.update(bank_params)

        self._init_encoder("field", config.d, config.field_layers, rng)
        for rt in schema.row_types:
            dk = config.d * rt.arity
            self._param(f"proj.W.{rt.type_id}", (config.m, dk), rng)
            self._param(f"proj.S.{rt.type_id}", (dk, config.m), rng)
        self._param("seq.pos.table", (config.t_max + 1, config.m), rng)
        self._init_encoder("seq", config.m, config.seq_layers, rng)

        for name in sorted(schema.attributes):
            spec = schema.attributes[name]
            out = self._head_out_size(spec)
            self._param(f"heads.{name}.w1", (config.d, config.d), rng)
            self._param(f"heads.{name}.b1", (config.d,), rng, zero=True)
            self._param(f"heads.{name}.w2", (config.d, out), rng)
            self._param(f"heads.{name}.b2", (out,), rng, zero=True)

        if config.task_head:
            self._init_task_head(rng)

    # -- parameter plumbing

    def _param(self, name: str, shape, rng, std: float | None = None,
               zero: bool = False, one: bool = False) -> Tensor:
        if zero:
            data = np.zeros(shape)
        elif one:
            data = np.ones(shape)
        else:
            if std is None:  # Xavier for dense maps, small-normal for tables
                std = (np.sqrt(2.0 / (shape[0] + shape[1]))
                       if len(shape) == 2 and "table" not in name else 0.02)
            data = rng.normal(0.0, std, size=shape)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def _init_encoder(self, prefix: str, width: int, layers: int, rng) -> None:
        ff = self.config.ff_multiplier * width
        for i in range(layers):
            p = f"{prefix}.{i}"
            for part in ("wq", "wk", "wv", "wo"):
                self._param(f"{p}.attn.{part}.weight", (width, width), rng)
                if part != "wk":  # a key bias shifts all scores equally; softmax ignores it
                    self._param(f"{p}.attn.{part}.bias", (width,), rng, zero=True)
            for ln in ("ln1", "ln2"):
                self._param(f"{p}.{ln}.gamma", (width,), rng, one=True)
                self._param(f"{p}.{ln}.beta", (width,), rng, zero=True)
                self.no_decay.update({f"{p}.{ln}.gamma", f"{p}.{ln}.beta"})
            self._param(f"{p}.ffn.w1.weight", (width, ff), rng)
            self._param(f"{p}.ffn.w1.bias", (ff,), rng, zero=True)
            self._param(f"{p}.ffn.w2.weight", (ff, width), rng)
            self._param(f"{p}.ffn.w2.bias", (width,), rng, zero=True)

    def _head_out_size(self, spec) -> int:
        if spec.kind == NUMERICAL and self.config.numeric_target == "scalar":
            return 1
        return spec.target_size()

    def _init_task_head(self, rng) -> None:
        m = self.config.m
        out = 1 if self.config.task_head == "regression" else 2
        self._param("finetune.w1", (m, m), rng)
        self._param("finetune.b1", (m,), rng, zero=True)
        self._param("finetune.w2", (m, out), rng)
        self._param("finetune.b2", (out,), rng, zero=True)

    def ensure_task_head(self, task: str, seed: int = 0) -> None:
        if task not in ("regression", "binary"):
            raise ModelError(f"unknown task {task!r}")
        if self.config.task_head == task and "finetune.w1" in self.params:
            return
        if self.config.task_head not in (None, task):
            raise ModelError(f"model already carries a {self.config.task_head} head")
        self.config.task_head = task
        self._init_task_head(np.random.default_rng(np.random.SeedSequence([seed, 0xF1])))

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- encoder blocks

    def _act(self, x: Tensor) -> Tensor:
        return gelu(x) if self.config.activation == "gelu" else relu(x)

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return matmul(x, self.params[f"{name}.weight"]) + self.params[f"{name}.bias"]

    def _attention(self, x: Tensor, p: str, heads: int, add_mask, rng, training) -> Tensor:
        b, t, w = x.shape
        hd = w // heads
        q = self._linear(x, f"{p}.attn.wq")
        k = matmul(x, self.params[f"{p}.attn.wk.weight"])
        v = self._linear(x, f"{p}.attn.wv")
        q = transpose(reshape(q, (b, t, heads, hd)), (0, 2, 1, 3))
        k = transpose(reshape(k, (b, t, heads, hd)), (0, 2, 1, 3))
        v = transpose(reshape(v, (b, t, heads, hd)), (0, 2, 1, 3))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        if add_mask is not None:
            scores = scores + add_mask
        probs = dropout(softmax(scores, axis=-1), self.config.dropout, rng, training)
        ctx = transpose(matmul(probs, v), (0, 2, 1, 3))
        return self._linear(reshape(ctx, (b, t, w)), f"{p}.attn.wo")

    def _ffn(self, x: Tensor, p: str) -> Tensor:
        return self._linear(self._act(self._linear(x, f"{p}.ffn.w1")), f"{p}.ffn.w2")

    def _ln(self, x: Tensor, p: str, which: str) -> Tensor:
        return layer_norm(x, self.params[f"{p}.{which}.gamma"], self.params[f"{p}.{which}.beta"])

    def _encoder(self, prefix: str, layers: int, heads: int, x: Tensor,
                 add_mask, rng, training) -> Tensor:
        pdrop = self.config.dropout
        for i in range(layers):
            p = f"{prefix}.{i}"
            if self.config.norm_placement == "post":
                a = self._attention(x, p, heads, add_mask, rng, training)
                x = self._ln(x + dropout(a, pdrop, rng, training), p, "ln1")
                f = self._ffn(x, p)
                x = self._ln(x + dropout(f, pdrop, rng, training), p, "ln2")
            else:
                a = self._attention(self._ln(x, p, "ln1"), p, heads, add_mask, rng, training)
                x = x + dropout(a, pdrop, rng, training)
                f = self._ffn(self._ln(x, p, "ln2"), p)
                x = x + dropout(f, pdrop, rng, training)
        return x

    # -- the four architectural operations

    def field_forward(self, x: Tensor, rng=None, training: bool = False) -> Tensor:
        """Encode one row's field embeddings (k, d) or a batch (R, k, d).
        No positional encoding: the stack is permutation-equivariant."""
        single = x.ndim == 2
        if single:
            x = reshape(x, (1,) + x.shape)
        out = self._encoder("field", self.config.field_layers, self.config.field_heads,
                            x, None, rng, training)
        return reshape(out, out.shape[1:]) if single else out

    def project_row(self, field_out: Tensor, h: int) -> Tensor:
        """Flatten (.., k_h, d) in attribute order and apply W_h: -> (.., m)."""
        rt = self.schema.row_type(h)
        if field_out.shape[-2] != rt.arity:
            raise ModelError(f"row type {h} expects {rt.arity} fields, got {field_out.shape[-2]}")
        w = self.params[f"proj.W.{h}"]
        single = field_out.ndim == 2
        flat = reshape(field_out, (1, -1) if single else (field_out.shape[0], -1))
        out = matmul(flat, transpose(w))
        return reshape(out, (self.config.m,)) if single else out

    def unproject_row(self, z: Tensor, h: int) -> Tensor:
        """Apply S_h and reshape to (.., k_h, d) per-field slices."""
        rt = self.schema.row_type(h)
        s = self.params[f"proj.S.{h}"]
        single = z.ndim == 1
        zz = reshape(z, (1, -1)) if single else z
        out = matmul(zz, transpose(s))
        shape = (rt.arity, self.config.d) if single else (zz.shape[0], rt.arity, self.config.d)
        return reshape(out, shape)

    def sequence_forward(self, row_vectors: Tensor, pad_mask=None, rng=None,
                         training: bool = False, with_cls: bool = False) -> Tensor:
        """Sequence encoder with learned positions. Row i always sits at
        position i+1; position 0 is reserved for [CLS] (present iff
        with_cls). Padded slots are excluded from attention and zeroed."""
        single = row_vectors.ndim == 2
        if single:
            row_vectors = reshape(row_vectors, (1,) + row_vectors.shape)
        b, t, m = row_vectors.shape
        n_rows = t - 1 if with_cls else t
        if n_rows > self.config.t_max:
            raise LengthError(f"sequence length {n_rows} exceeds t_max={self.config.t_max}")
        if pad_mask is None:
            real = np.ones((b, t), dtype=bool)
        else:
            real = np.asarray(pad_mask, dtype=bool).reshape(b, t)
        if not real.any(axis=1).all():
            raise LengthError("all-pad sequence rejected")
        positions = np.arange(t) if with_cls else np.arange(1, t + 1)
        pos = embedding_gather(self.params["seq.pos.table"], positions)
        x = row_vectors + pos
        add_mask = Tensor(np.where(real, 0.0, -1e9)[:, None, None, :])
        out = self._encoder("seq", self.config.seq_layers, self.config.seq_heads,
                            x, add_mask, rng, training)
        out = out * Tensor(real[:, :, None].astype(np.float64))
        return reshape(out, out.shape[1:]) if single else out

    def _head(self, attr: str, x: Tensor) -> Tensor:
        h = self._act(matmul(x, self.params[f"heads.{attr}.w1"]) + self.params[f"heads.{attr}.b1"])
        return matmul(h, self.params[f"heads.{attr}.w2"]) + self.params[f"heads.{attr}.b2"]

    # -- batch assembly shared by the two end-to-end passes

    def _embed_rows(self, rows_by_sample, masks_by_sample, rng, training):
        """Group all rows by type, embed fields, run the Field Transformer,
        and project to width m. Returns the type-grouped projection tensor,
        the (sample, row) -> concat position map, and per-type bookkeeping."""
        groups: dict[int, list[tuple[int, int]]] = {}
        for b, rows in enumerate(rows_by_sample):
            for i, row in enumerate(rows):
                groups.setdefault(row.type_id, []).append((b, i))
        concat_pos: dict[tuple[int, int], int] = {}
        type_order = sorted(groups)
        projected = []
        flat_base: dict[int, int] = {}
        group_index: dict[tuple[int, int], int] = {}
        offset = 0
        flat_offset = 0
        for h in type_order:
            members = groups[h]
            rt = self.schema.row_type(h)
            k = rt.arity
            r = len(members)
            ids = np.stack([rows_by_sample[b][i].cat_ids for b, i in members])
            vals = np.stack([rows_by_sample[b][i].num_vals for b, i in members])
            miss = np.stack([rows_by_sample[b][i].is_missing for b, i in members])
            if masks_by_sample is None:
                maskf = np.zeros((r, k), dtype=bool)
            else:
                maskf = np.stack([masks_by_sample[b][i] for b, i in members])
            slots = []
            for s, name in enumerate(rt.attributes):
                e = embed_slot_batch(self.bank, self.schema.attributes[name],
                                     ids[:, s], vals[:, s], miss[:, s], maskf[:, s])
                slots.append(reshape(e, (r, 1, self.config.d)))
            x = self.field_forward(concat(slots, axis=1), rng, training)
            projected.append(self.project_row(x, h))
            for j, key in enumerate(members):
                concat_pos[key] = offset + j
                group_index[key] = j
            flat_base[h] = flat_offset
            flat_offset += r * k
            offset += r
        return concat(projected, axis=0), concat_pos, type_order, groups, flat_base, group_index

    def _assemble_sequence(self, proj: Tensor, concat_pos, b: int, t: int) -> tuple[Tensor, np.ndarray]:
        table = concat([proj, Tensor(np.zeros((1, self.config.m)))], axis=0)
        pad_row = proj.shape[0]
        gather_ids = np.full((b, t), pad_row, dtype=np.int64)
        real = np.zeros((b, t), dtype=bool)
        for (bb, i), pos in concat_pos.items():
            gather_ids[bb, i] = pos
            real[bb, i] = True
        seq = reshape(embedding_gather(table, gather_ids.reshape(-1)), (b, t, self.config.m))
        return seq, real

    def pretrain_forward(self, batch, rng=None, training: bool = True) -> PretrainOutput:
        """Masked-token pass: logits (or scalar predictions in regression
        mode) are emitted only at masked positions, grouped per attribute."""
        rows_by_sample = [s.rows for s in batch]
        masks_by_sample = [s.mask for s in batch]
        b = len(batch)
        t = max(len(r) for r in rows_by_sample)
        if t > self.config.t_max:
            raise LengthError(f"sequence length {t} exceeds t_max={self.config.t_max}")
        n_masked = sum(len(s.targets) for s in batch)
        out = PretrainOutput(cat_groups=[], reg_groups=[], n_masked=n_masked)
        if n_masked == 0:
            return out
        proj, concat_pos, type_order, groups, flat_base, group_index = self._embed_rows(
            rows_by_sample, masks_by_sample, rng, training)
        seq, real = self._assemble_sequence(proj, concat_pos, b, t)
        z = self.sequence_forward(seq, real, rng, training, with_cls=False)
        zflat = reshape(z, (b * t, self.config.m))
        sel = np.array([bb * t + i for h in type_order for bb, i in groups[h]], dtype=np.int64)
        zrows = embedding_gather(zflat, sel)
        pieces = []
        off = 0
        for h in type_order:
            r = len(groups[h])
            k = self.schema.row_type(h).arity
            zh = self.unproject_row(slice_(zrows, (slice(off, off + r),)), h)
            pieces.append(reshape(zh, (r * k, self.config.d)))
            off += r
        slices = concat(pieces, axis=0)

        by_attr: dict[str, list] = {}
        for bb, sample in enumerate(batch):
            for tg in sample.targets:
                h = rows_by_sample[bb][tg.row].type_id
                k = self.schema.row_type(h).arity
                flat = flat_base[h] + group_index[(bb, tg.row)] * k + tg.field
                by_attr.setdefault(tg.attr, []).append((flat, tg))
        for attr in sorted(by_attr):
            entries = by_attr[attr]
            idx = np.array([e[0] for e in entries], dtype=np.int64)
            x = embedding_gather(slices, idx)
            pred = self._head(attr, x)
            spec = self.schema.attributes[attr]
            if spec.kind == NUMERICAL and self.config.numeric_target == "scalar":
                scalars = np.array([e[1].scalar for e in entries])
                out.reg_groups.append((attr, reshape(pred, (len(entries),)), scalars))
            else:
                dists = np.stack([e[1].dist for e in entries])
                out.cat_groups.append((attr, pred, dists))
        return out

    def finetune_forward(self, batch, rng=None, training: bool = False) -> Tensor:
        """[CLS]-pooled task output: (B,) for regression, (B, 2) for binary."""
        if self.config.task_head is None:
            raise ModelError("model has no task head; call ensure_task_head first")
        rows_by_sample = [s.rows for s in batch]
        b = len(batch)
        t = max(len(r) for r in rows_by_sample)
        if t > self.config.t_max:
            raise LengthError(f"sequence length {t} exceeds t_max={self.config.t_max}")
        proj, concat_pos, *_ = self._embed_rows(rows_by_sample, None, rng, training)
        seq, real = self._assemble_sequence(proj, concat_pos, b, t)
        cls = reshape(embedding_gather(self.bank.cls_vec, np.zeros(b, dtype=np.int64)),
                      (b, 1, self.config.m))
        seq = concat([cls, seq], axis=1)
        real = np.concatenate([np.ones((b, 1), dtype=bool), real], axis=1)
        z = self.sequence_forward(seq, real, rng, training, with_cls=True)
        pooled = slice_(z, (slice(None), 0))
        h = self._act(matmul(pooled, self.params["finetune.w1"]) + self.params["finetune.b1"])
        outp = matmul(h, self.params["finetune.w2"]) + self.params["finetune.b2"]
        if self.config.task_head == "regression":
            return reshape(outp, (b,))
        return outp


# ---------------------------------------------------------------------------
# parameter accounting


def _encoder_param_count(width: int, layers: int, ff_mult: int) -> int:
    ff = ff_mult * width
    per = 4 * width * width + 3 * width        # q, k, v, o (no key bias)
    per += 2 * 2 * width                       # two layer norms
    per += width * ff + ff + ff * width + width  # feed-forward
    return layers * per


def expected_param_count(config: ModelConfig, schema: Schema) -> int:
    """Closed-form parameter count; must match runtime enumeration exactly."""
    d, m, L = config.d, config.m, config.freq_count
    total = 0
    for name in sorted(schema.attributes):
        spec = schema.attributes[name]
        if spec.kind == CATEGORICAL:
            total += len(spec.vocab) * d
        elif config.numeric_input == "frequency":
            total += 2 * L * d + d
        else:
            total += spec.n_bins * d
    total += d + d + m                          # [MASK], [MISSING], sequence [CLS]
    total += _encoder_param_count(d, config.field_layers, config.ff_multiplier)
    for rt in schema.row_types:
        total += 2 * m * d * rt.arity           # W_h and S_h
    total += (config.t_max + 1) * m
    total += _encoder_param_count(m, config.seq_layers, config.ff_multiplier)
    for name in sorted(schema.attributes):
        spec = schema.attributes[name]
        out = 1 if (spec.kind == NUMERICAL and config.numeric_target == "scalar") \
            else spec.target_size()
        total += d * d + d + d * out + out
    if config.task_head:
        out = 1 if config.task_head == "regression" else 2
        total += m * m + m + m * out + out
    return total
