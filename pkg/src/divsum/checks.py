"""Full-model gradient checking on small random instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import EOS, Triple
from .diversity import DiversityMode
from .model import Model, ModelConfig, sequence_loss
from .tensor import finite_diff_check

FIRST_WORD = 4  # ids below this are special tokens


@dataclass(frozen=True)
class GradcheckCase:
    mode: str
    seed: int
    error: float


def random_instance(mode: str, dims: int, seed: int, vocab_size: int = 12, max_len: int = 5,
                    query_mode: str = "attention", scale: float = 1.0) -> tuple[Model, Triple]:
    """A model with all parameters drawn from U(-scale, scale) and one random triple.

    Unit-scale parameters keep every pathway's gradient well above the
    floating-point noise floor; the default initialisation leaves some of them
    around 1e-9, where any finite-difference estimate is mostly rounding.
    """
    if vocab_size <= FIRST_WORD:
        raise ValueError("vocabulary too small for random words")
    rng = np.random.default_rng(seed)
    config = ModelConfig(vocab_size=vocab_size, embed_dim=dims, dec_hidden=dims, query_hidden=dims,
                         doc_hidden=dims, mode=mode, query_mode=query_mode, max_len=max_len)
    model = Model.init(config, rng)
    for p in model.params.values():
        p.data[...] = rng.uniform(-scale, scale, p.shape)

    def words(n):
        return tuple(int(i) for i in rng.integers(FIRST_WORD, vocab_size, n))

    q = words(rng.integers(2, max_len + 1))
    d = words(max_len)
    s = words(max_len - 1) + (EOS,)
    return model, Triple(q, d, s)


def gradcheck(mode: str, dims: int = 8, seeds=range(20), step=1e-3, max_coords: int | None = 1,
              query_mode: str = "attention") -> list[GradcheckCase]:
    """Compare tape gradients of the sequence loss with five-point central differences."""
    mode = DiversityMode.parse(mode).value
    out = []
    for seed in seeds:
        model, triple = random_instance(mode, dims, seed, query_mode=query_mode)
        err = finite_diff_check(
            lambda g: sequence_loss(g, model, triple),
            list(model.params.values()),
            step=step,
            max_coords=max_coords,
            rng=np.random.default_rng([seed, 1]),
            order=4,
        )
        out.append(GradcheckCase(mode, seed, err))
    return out
