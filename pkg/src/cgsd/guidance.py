"""Stage-1 guidance model: frozen two-layer encoder, a low-rank adapter on
the output projection, learnable per-grade prompt embeddings and a learnable
logit scale.

The model emits, for a raw feature vector, a unit-norm embedding f, a
grade-similarity vector d (cosine of f against each normalized prompt row)
and a prior distribution softmax(scale * d). Training minimizes a
cross-entropy term over scaled similarities plus a weighted pairwise hinge
that enforces the grade ordering of similarities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import numkit as nk
from .errors import ConfigError, ContractError, DataError, ParseError
from .numkit import GradTape, Tensor2

LOG_SCALE_INIT = math.log(1.0 / 0.07)
SCALE_MAX = 100.0
GUIDANCE_FORMAT = "cgsd-guidance-v1"


class LoraAdapter:
    """Trainable low-rank increment (alpha/rank) * B @ A for a frozen matrix.

    B starts at zero so the increment vanishes at initialization.
    """

    def __init__(self, a: Tensor2, b: Tensor2, rank: int, alpha: float):
        if rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        d_in, d_out = a.cols, b.rows
        if rank > min(d_in, d_out):
            raise ConfigError(
                f"rank {rank} exceeds min(d_in={d_in}, d_out={d_out})"
            )
        if a.rows != rank or b.cols != rank:
            raise ConfigError("adapter matrices inconsistent with rank")
        if alpha <= 0:
            raise ConfigError("alpha must be positive")
        self.a = a
        self.b = b
        self.rank = rank
        self.alpha = alpha

    @classmethod
    def init(
        cls, d_in: int, d_out: int, rank: int, alpha: float, rng: np.random.Generator
    ) -> "LoraAdapter":
        if rank < 1 or rank > min(d_in, d_out):
            raise ConfigError(
                f"rank {rank} invalid for shapes d_in={d_in}, d_out={d_out}"
            )
        a = Tensor2(
            rng.standard_normal((rank, d_in)) / math.sqrt(d_in), requires_grad=True
        )
        b = Tensor2(np.zeros((d_out, rank)), requires_grad=True)
        return cls(a, b, rank, alpha)

    @property
    def increment_scale(self) -> float:
        return self.alpha / self.rank


def lora_forward(
    x: Tensor2, w_frozen: Tensor2, adapter: LoraAdapter, tape: GradTape | None = None
) -> Tensor2:
    """Adapted projection of a column vector: W x + (alpha/r) B (A x)."""
    if x.cols != 1:
        raise ContractError(f"lora_forward expects a column vector, got {x.shape}")
    base = nk.matmul(w_frozen, x, tape)
    low = nk.matmul(adapter.a, x, tape)
    inc = nk.scale(nk.matmul(adapter.b, low, tape), adapter.increment_scale, tape)
    return nk.add(base, inc, tape)


@dataclass
class SemanticVector:
    d: np.ndarray  # K cosine similarities
    prior: np.ndarray  # K simplex vector, softmax(scale * d)


@dataclass
class GuidanceTrainConfig:
    lambda_rank: float = 1.0
    margin: float = 0.05
    lr_lora: float = 1e-4
    lr_prompt: float = 2e-3
    epochs: int = 22
    batch: int = 64
    warmup_epochs: int = 3
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1:
            raise ConfigError("epochs must be >= 0 and batch >= 1")
        if self.lambda_rank < 0 or self.margin < 0:
            raise ConfigError("lambda_rank and margin must be nonnegative")


class GuidanceModel:
    """Encoder MLP (d_in -> hidden -> d_model) with an adapter on the output
    projection, plus K prompt rows and a log scale.

    After freeze_base(), only the adapter, prompts and log_scale train.
    """

    def __init__(
        self,
        w1: Tensor2,
        b1: Tensor2,
        w2: Tensor2,
        b2: Tensor2,
        adapter: LoraAdapter,
        prompts: Tensor2,
        log_scale: Tensor2,
        frozen_base: bool = True,
    ):
        if prompts.rows < 2:
            raise ConfigError("need at least two grade prompts")
        self.w1 = w1
        self.b1 = b1
        self.w2 = w2
        self.b2 = b2
        self.adapter = adapter
        self.prompts = prompts
        self.log_scale = log_scale
        self.frozen_base = frozen_base
        self._sync_flags()

    def _sync_flags(self) -> None:
        for t in (self.w1, self.b1, self.w2, self.b2):
            t.requires_grad = not self.frozen_base
        for t in (self.adapter.a, self.adapter.b, self.prompts, self.log_scale):
            t.requires_grad = True

    @classmethod
    def build(
        cls,
        d_in: int,
        hidden: int,
        d_model: int,
        k: int,
        rank: int,
        alpha: float,
        seed: int,
        frozen_base: bool = False,
    ) -> "GuidanceModel":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
        w1 = Tensor2(rng.standard_normal((hidden, d_in)) / math.sqrt(d_in))
        b1 = Tensor2(np.zeros((1, hidden)))
        w2 = Tensor2(rng.standard_normal((d_model, hidden)) / math.sqrt(hidden))
        b2 = Tensor2(np.zeros((1, d_model)))
        adapter = LoraAdapter.init(hidden, d_model, rank, alpha, rng)
        prompts = Tensor2(rng.standard_normal((k, d_model)), requires_grad=True)
        log_scale = Tensor2(np.array([[LOG_SCALE_INIT]]), requires_grad=True)
        return cls(w1, b1, w2, b2, adapter, prompts, log_scale, frozen_base)

    @property
    def k(self) -> int:
        return self.prompts.rows

    @property
    def d_in(self) -> int:
        return self.w1.cols

    def freeze_base(self) -> None:
        self.frozen_base = True
        self._sync_flags()

    def base_params(self) -> list[Tensor2]:
        return [self.w1, self.b1, self.w2, self.b2]

    def lora_params(self) -> list[Tensor2]:
        return [self.adapter.a, self.adapter.b]

    def prompt_params(self) -> list[Tensor2]:
        # log_scale trains in the prompt group
        return [self.prompts, self.log_scale]

    def trainable_params(self) -> list[Tensor2]:
        params = self.lora_params() + self.prompt_params()
        if not self.frozen_base:
            params = self.base_params() + params
        return params

    def scale_value(self) -> float:
        return min(math.exp(self.log_scale.item()), SCALE_MAX)

    def scale_tensor(self, tape: GradTape | None) -> Tensor2:
        return nk.clamp_max(nk.exp(self.log_scale, tape), SCALE_MAX, tape)

    def encode_batch(self, x: np.ndarray | Tensor2, tape: GradTape | None = None) -> Tensor2:
        """Unit-norm embeddings for a batch of raw feature rows."""
        xt = x if isinstance(x, Tensor2) else Tensor2(np.atleast_2d(x))
        h = nk.smooth_nonlinearity(
            nk.add(nk.matmul(xt, nk.transpose(self.w1, tape), tape), self.b1, tape),
            tape,
        )
        base = nk.matmul(h, nk.transpose(self.w2, tape), tape)
        low = nk.matmul(h, nk.transpose(self.adapter.a, tape), tape)
        inc = nk.scale(
            nk.matmul(low, nk.transpose(self.adapter.b, tape), tape),
            self.adapter.increment_scale,
            tape,
        )
        z = nk.add(nk.add(base, inc, tape), self.b2, tape)
        return nk.l2_normalize_rows(z, tape=tape)

    def similarity_batch(self, f: Tensor2, tape: GradTape | None = None) -> Tensor2:
        """Cosine similarities f . normalized-prompt-rows^T, one row per item."""
        p = nk.l2_normalize_rows(self.prompts, tape=tape)
        return nk.matmul(f, nk.transpose(p, tape), tape)


def encode_feature(x: np.ndarray, model: GuidanceModel) -> np.ndarray:
    """Single-sample embedding as a plain unit vector."""
    return model.encode_batch(np.atleast_2d(x)).data[0]


def semantic_vector(f: np.ndarray, model: GuidanceModel) -> SemanticVector:
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    norm = np.linalg.norm(f[0])
    if abs(norm - 1.0) > 1e-6:
        raise ContractError(f"semantic_vector expects a unit feature, norm={norm}")
    d = model.similarity_batch(Tensor2(f)).data[0]
    prior = nk.softmax_rows(Tensor2(model.scale_value() * d)).data[0]
    return SemanticVector(d=d, prior=prior)


@lru_cache(maxsize=None)
def _pair_matrix(k: int, label: int) -> tuple[np.ndarray, int]:
    """Rows of +1/-1 selectors for grade pairs (a, b) with |a-k| < |b-k|."""
    rows = []
    for a in range(k):
        for b in range(k):
            if abs(a - label) < abs(b - label):
                row = np.zeros(k)
                row[a] = 1.0
                row[b] = -1.0
                rows.append(row)
    return np.array(rows), len(rows)


def contrastive_loss(
    d_batch: Tensor2,
    labels,
    scale: float | Tensor2,
    tape: GradTape | None = None,
) -> Tensor2:
    """Mean cross-entropy of scaled similarities against the true grade."""
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= d_batch.cols):
        raise DataError(f"label outside [0,{d_batch.cols})")
    if isinstance(scale, Tensor2):
        logits = nk.scale_by(d_batch, scale, tape)
    else:
        if scale <= 0:
            raise ContractError("scale must be positive")
        logits = nk.scale(d_batch, scale, tape)
    return nk.cross_entropy_mean(logits, y, tape)


def ranking_loss(
    d_batch: Tensor2, labels, margin: float, tape: GradTape | None = None
) -> Tensor2:
    """Pairwise hinge on similarity ordering by grade distance.

    For a sample with grade k, every pair (a, b) with |a-k| < |b-k| incurs
    max(0, margin - (d_a - d_b)); averaged over pairs, then over the batch.
    """
    if margin < 0:
        raise ContractError("margin must be nonnegative")
    y = np.asarray(labels, dtype=np.int64)
    k = d_batch.cols
    n = d_batch.rows
    total: Tensor2 | None = None
    for lab in np.unique(y):
        pairs, npairs = _pair_matrix(k, int(lab))
        if npairs == 0:
            continue
        idx = np.flatnonzero(y == lab)
        rows = nk.take_rows(d_batch, idx, tape)
        diffs = nk.matmul(rows, Tensor2(pairs.T), tape)
        hinge = nk.relu(nk.add_scalar(nk.scale(diffs, -1.0, tape), margin, tape), tape)
        part = nk.scale(nk.sum_all(hinge, tape), 1.0 / npairs, tape)
        total = part if total is None else nk.add(total, part, tape)
    if total is None:
        return Tensor2(np.zeros((1, 1)))
    return nk.scale(total, 1.0 / n, tape)


def guidance_loss(
    features: np.ndarray,
    labels,
    model: GuidanceModel,
    cfg: GuidanceTrainConfig,
    tape: GradTape | None = None,
) -> Tensor2:
    """Cross-entropy plus lambda-weighted ranking hinge over one batch."""
    if np.asarray(features).shape[0] == 0:
        raise DataError("empty batch")
    f = model.encode_batch(features, tape)
    d = model.similarity_batch(f, tape)
    s = model.scale_tensor(tape)
    loss = contrastive_loss(d, labels, s, tape)
    if cfg.lambda_rank > 0:
        rank_term = nk.scale(ranking_loss(d, labels, cfg.margin, tape), cfg.lambda_rank, tape)
        loss = nk.add(loss, rank_term, tape)
    return loss


def predict_batch(features: np.ndarray, model: GuidanceModel) -> np.ndarray:
    """Zero-shot grades: argmax of similarities, ties to the smaller index."""
    f = model.encode_batch(np.atleast_2d(features))
    d = model.similarity_batch(f)
    return np.argmax(d.data, axis=1)


def zero_shot_predict(x: np.ndarray, model: GuidanceModel) -> int:
    return int(predict_batch(np.atleast_2d(x), model)[0])


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_guidance(path: str | Path, model: GuidanceModel, frozen: bool) -> None:
    doc = {
        "format": GUIDANCE_FORMAT,
        "frozen": bool(frozen),
        "d_in": model.d_in,
        "hidden": model.w1.rows,
        "d_model": model.w2.rows,
        "k": model.k,
        "rank": model.adapter.rank,
        "alpha": model.adapter.alpha,
        "log_scale": model.log_scale.item(),
        "shapes": {
            name: list(t.shape)
            for name, t in _named_tensors(model).items()
        },
        "weights": {
            name: t.data.flatten().tolist()
            for name, t in _named_tensors(model).items()
        },
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8", newline="\n")


def _named_tensors(model: GuidanceModel) -> dict[str, Tensor2]:
    return {
        "w1": model.w1,
        "b1": model.b1,
        "w2": model.w2,
        "b2": model.b2,
        "lora_a": model.adapter.a,
        "lora_b": model.adapter.b,
        "prompts": model.prompts,
    }


def load_guidance(path: str | Path) -> tuple[GuidanceModel, bool]:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != GUIDANCE_FORMAT:
        raise ParseError(
            f"checkpoint format mismatch: expected {GUIDANCE_FORMAT}, "
            f"got {doc.get('format')!r}"
        )

    def tensor(name: str, requires_grad: bool = False) -> Tensor2:
        shape = doc["shapes"][name]
        arr = np.array(doc["weights"][name]).reshape(shape)
        return Tensor2(arr, requires_grad=requires_grad)

    adapter = LoraAdapter(
        tensor("lora_a", True), tensor("lora_b", True), doc["rank"], doc["alpha"]
    )
    model = GuidanceModel(
        tensor("w1"),
        tensor("b1"),
        tensor("w2"),
        tensor("b2"),
        adapter,
        tensor("prompts", True),
        Tensor2(np.array([[doc["log_scale"]]]), requires_grad=True),
        frozen_base=True,
    )
    return model, bool(doc["frozen"])
