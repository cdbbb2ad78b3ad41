"""Full model: column embedder -> biaxial row encoder -> ICL head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint, nn
from .autodiff import ContractError, Tensor
from .column_embedder import SKIP_VALUE, ColumnEmbedder
from .icl_head import Decoder, ICLHead, build_class_tree, flat_probabilities, \
    hierarchical_predict, icl_forward
from .row_encoder import RowEncoder


@dataclass
class TableBatch:
    """A batch of B tasks, each an n x m table.

    x: [B, n, m] cell values with padded columns holding skip_value;
    d: per-task active feature counts; y: [B, n] integer labels
    (only the first n_train per task are visible to the model);
    n_train: support row count shared across the batch.
    """
    x: np.ndarray
    d: np.ndarray
    y: np.ndarray
    n_train: int
    skip_value: float = SKIP_VALUE

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.d = np.asarray(self.d, dtype=int)
        self.y = np.asarray(self.y, dtype=int)
        b, n, m = self.x.shape
        if not 1 <= self.n_train < n:
            raise ContractError(f"need 1 <= n_train < n, got {self.n_train} vs n={n}")
        if self.d.shape != (b,) or (self.d > m).any() or (self.d < 1).any():
            raise ContractError("per-task feature counts inconsistent with x")
        if self.y.shape != (b, n) or self.y.min() < 0:
            raise ContractError("labels must be non-negative with shape [B, n]")
        for t in range(b):
            if not (self.x[t, :, self.d[t]:] == self.skip_value).all():
                raise ContractError(f"task {t}: padded columns must hold skip_value")


@dataclass
class ModelConfig:
    dim: int = 32
    n_cls: int = 4
    heads: int = 4
    c_max: int = 10
    groups: int = 4
    row_blocks: int = 3
    icl_blocks: int = 3
    col_blocks: int = 2
    col_attn: str = "induced"
    n_inducing: int = 16
    ff_mult: int = 2
    skip_value: float = SKIP_VALUE
    seed: int = 0

    @property
    def d_row(self) -> int:
        return self.n_cls * self.dim


class TabularICLModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.col_embed = ColumnEmbedder(
            config.dim, config.n_cls, rng, heads=config.heads,
            attn_type=config.col_attn, n_inducing=config.n_inducing,
            n_blocks=config.col_blocks, ff_mult=config.ff_mult,
            skip_value=config.skip_value)
        self.row_enc = RowEncoder(
            config.dim, config.n_cls, rng, heads=config.heads,
            groups=config.groups, n_blocks=config.row_blocks, ff_mult=config.ff_mult)
        self.icl = ICLHead(config.d_row, config.c_max, rng, heads=config.heads,
                           n_blocks=config.icl_blocks, ff_mult=config.ff_mult)
        self.decoder = Decoder(config.d_row, config.c_max, rng)

    def forward(self, batch: TableBatch,
                attend_support_only: bool | None = None) -> Tensor:
        """Logits [B, n, c_max]; only query-row logits feed loss/prediction."""
        e = self.col_embed(batch.x, batch.n_train, attend_support_only)
        r = self.row_enc.encode_rows(e, batch.d)
        r = self.icl.inject_labels(r, batch.y[:, :batch.n_train])
        return icl_forward(self.icl, self.decoder, r, batch.n_train)

    def predict_proba(self, x: np.ndarray, y_support: np.ndarray, n_train: int,
                      n_classes: int, temperature: float = 1.0,
                      attend_support_only: bool | None = None) -> np.ndarray:
        """Query-row class probabilities for a single table.

        x: [n, m] preprocessed values, support rows first; routes through
        the class tree when n_classes exceeds the decoder width.
        """
        x = np.asarray(x, dtype=np.float32)
        n, m = x.shape
        y_support = np.asarray(y_support, dtype=int)
        n_query = n - n_train

        if n_classes <= self.config.c_max:
            batch = self._as_batch(x, y_support, n_train)
            logits = self.forward(batch, attend_support_only)
            return flat_probabilities(logits[0, n_train:, :], n_classes, temperature)

        tree = build_class_tree(n_classes, self.config.c_max)

        def node_forward(sel, relabeled, k):
            xs = np.concatenate([x[:n_train][sel], x[n_train:]], axis=0)
            batch = self._as_batch(xs, relabeled, len(sel))
            logits = self.forward(batch, attend_support_only)
            return flat_probabilities(logits[0, len(sel):, :], k, temperature)

        return hierarchical_predict(node_forward, y_support, n_query, tree)

    def _as_batch(self, x: np.ndarray, y_support: np.ndarray, n_train: int) -> TableBatch:
        n, m = x.shape
        y = np.zeros(n, dtype=int)
        y[:n_train] = y_support
        return TableBatch(x[None], np.array([m]), y[None], n_train,
                          skip_value=self.config.skip_value)

    # -- persistence ---------------------------------------------------
    def save(self, path) -> str:
        return checkpoint.save(path, dict(self.named_parameters()),
                               config=asdict(self.config))

    @classmethod
    def load(cls, path) -> "TabularICLModel":
        tensors, config = checkpoint.load(path)
        if config is None:
            raise checkpoint.CheckpointError(f"{path}: missing config echo block")
        if "model" in config:  # trainer checkpoints nest the model config
            config = config["model"]
        model = cls(ModelConfig(**config))
        model.load_state(tensors)
        return model
