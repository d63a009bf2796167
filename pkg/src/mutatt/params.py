"""Model dimensions and the trainable parameter set.

Parameters live in a flat name->Tensor mapping so the optimizer and the
checkpoint format can address them by stable string keys.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = [
    "MODULES",
    "SUBJECT_SLOTS",
    "CONTEXT_SLOTS",
    "LOCATION_DIM",
    "LOCATION_INPUT_DIM",
    "ModelDims",
    "ModelParams",
    "module_input_dim",
]

# the three matching channels, in score-fusion order
MODULES = ("subj", "loc", "rel")

SUBJECT_SLOTS = 49          # 7x7 grid rows per region
CONTEXT_SLOTS = 5           # max same-category neighbors
LOCATION_DIM = 5            # normalized box coordinates + relative area
# location module input: own box encoding + flattened 5x5 neighbor offsets
LOCATION_INPUT_DIM = LOCATION_DIM + CONTEXT_SLOTS * LOCATION_DIM


@dataclass(frozen=True)
class ModelDims:
    """Shape configuration: vocabulary size, embedding width d, hidden width
    d_h (attention and scoring MLPs), raw visual feature width d_v."""

    vocab_size: int
    embed: int = 64
    hidden: int = 64
    visual: int = 32

    def validate(self) -> None:
        for name in ("vocab_size", "embed", "hidden", "visual"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelDims.{name} must be positive")
        if self.vocab_size < 2:
            raise ValueError("vocabulary needs at least the two reserved ids")


def module_input_dim(module: str, visual_dim: int) -> int:
    """Raw input width each channel's projection maps into the common space."""
    if module == "subj":
        return visual_dim
    if module == "loc":
        return LOCATION_INPUT_DIM
    if module == "rel":
        return visual_dim + LOCATION_DIM
    raise ValueError(f"unknown module {module!r}")


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """All trainable tensors, addressable through ``named_tensors``.

    Key layout: ``embedding``, ``weight_head_w``, ``weight_head_b``, then per
    channel ``<field>.<module>`` for the language query, the visual
    projection, the slot-attention layers, and the scoring MLP.
    """

    def __init__(self, dims: ModelDims, tensors: dict[str, Tensor]):
        self.dims = dims
        self._tensors = tensors
        for name, t in tensors.items():
            if not t.requires_grad:
                raise ValueError(f"parameter {name!r} must track gradients")

    @staticmethod
    def tensor_shapes(dims: ModelDims) -> dict[str, tuple]:
        d, dh = dims.embed, dims.hidden
        shapes: dict[str, tuple] = {
            "embedding": (dims.vocab_size, d),
            "weight_head_w": (3 * d, 3),
            "weight_head_b": (3,),
        }
        for m in MODULES:
            din = module_input_dim(m, dims.visual)
            shapes[f"lang_query.{m}"] = (2 * d,)
            shapes[f"proj_w.{m}"] = (din, d)
            shapes[f"proj_b.{m}"] = (d,)
            shapes[f"attn_w1.{m}"] = (2 * d, dh)
            shapes[f"attn_b1.{m}"] = (dh,)
            shapes[f"attn_w2.{m}"] = (dh,)
            shapes[f"mlp_w1.{m}"] = (2 * d, dh)
            shapes[f"mlp_b1.{m}"] = (dh,)
            shapes[f"mlp_w2.{m}"] = (dh,)
            shapes[f"mlp_b2.{m}"] = ()
        return shapes

    @classmethod
    def create(cls, dims: ModelDims, seed: int) -> "ModelParams":
        """Fresh initialization: embeddings normal(0, 0.01) with the padding
        row zeroed, linear weights uniform +-1/sqrt(fan_in), biases zero."""
        dims.validate()
        rng = np.random.default_rng([seed, 0])
        d = dims.embed
        tensors: dict[str, Tensor] = {}
        emb = rng.normal(0.0, 0.01, size=(dims.vocab_size, d))
        emb[0] = 0.0
        tensors["embedding"] = Tensor(emb, requires_grad=True)
        tensors["weight_head_w"] = Tensor(_uniform(rng, (3 * d, 3), 3 * d), requires_grad=True)
        tensors["weight_head_b"] = Tensor(np.zeros(3), requires_grad=True)
        for m in MODULES:
            din = module_input_dim(m, dims.visual)
            dh = dims.hidden
            tensors[f"lang_query.{m}"] = Tensor(_uniform(rng, (2 * d,), 2 * d), requires_grad=True)
            tensors[f"proj_w.{m}"] = Tensor(_uniform(rng, (din, d), din), requires_grad=True)
            tensors[f"proj_b.{m}"] = Tensor(np.zeros(d), requires_grad=True)
            tensors[f"attn_w1.{m}"] = Tensor(_uniform(rng, (2 * d, dh), 2 * d), requires_grad=True)
            tensors[f"attn_b1.{m}"] = Tensor(np.zeros(dh), requires_grad=True)
            tensors[f"attn_w2.{m}"] = Tensor(_uniform(rng, (dh,), dh), requires_grad=True)
            tensors[f"mlp_w1.{m}"] = Tensor(_uniform(rng, (2 * d, dh), 2 * d), requires_grad=True)
            tensors[f"mlp_b1.{m}"] = Tensor(np.zeros(dh), requires_grad=True)
            tensors[f"mlp_w2.{m}"] = Tensor(_uniform(rng, (dh,), dh), requires_grad=True)
            tensors[f"mlp_b2.{m}"] = Tensor(np.zeros(()), requires_grad=True)
        return cls(dims, tensors)

    @classmethod
    def from_arrays(cls, dims: ModelDims, arrays: dict[str, np.ndarray]) -> "ModelParams":
        expected = cls.tensor_shapes(dims)
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        tensors: dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
            tensors[name] = Tensor(arr.copy(), requires_grad=True)
        return cls(dims, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def get(self, field: str, module: str) -> Tensor:
        return self._tensors[f"{field}.{module}"]

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}
