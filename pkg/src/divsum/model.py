"""The full encode-attend-decode summarizer: decoder, loss and greedy decoding.

Per decoder step ``t``::

    s_t  = GRU_dec(s_{t-1}, [e(y_{t-1}), d'_{t-1}])
    q_t  = query attention over query states (or their mean, or nothing)
    d_t  = document attention conditioned on q_t
    d'_t = diversity transform of d_t
    y_t  = softmax(W_o (W_dec s_t + V_dec d'_t))

``s_0 = tanh(s_init h_n)`` from the last document state; ``y_0`` is SOS and
``d'_0`` is zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diversity as div
from .attention import DocAttnParams, QueryAttnParams, document_attention, project_keys, query_attention
from .corpus import EOS, PAD, SOS, Triple
from .diversity import DiversityMode
from .embeddings import EmbeddingTable, random_table
from .encoders import GruParams, encode, gru_step
from .tensor import Graph, Tensor, constant, parameter

QUERY_MODES = ("attention", "static", "none")


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 100
    dec_hidden: int = 200    # l1
    query_hidden: int = 200  # l2
    doc_hidden: int = 200    # l4 (the diversity LSTM uses the same size)
    mode: str = "SD2"
    query_mode: str = "attention"
    sd1_squash: bool = False
    store_raw_cell: bool = False
    embed_trainable: bool = True
    sampling_prob: float = 0.0
    max_len: int = 30

    def __post_init__(self):
        self.mode = DiversityMode.parse(self.mode).value
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")
        dims = (self.vocab_size, self.embed_dim, self.dec_hidden, self.query_hidden, self.doc_hidden)
        if min(dims) < 1:
            raise ValueError(f"dimensions must be positive: {dims}")
        if not 0.0 <= self.sampling_prob <= 1.0:
            raise ValueError("sampling_prob must lie in [0, 1]")

    @property
    def diversity(self) -> DiversityMode:
        return DiversityMode(self.mode)

    @property
    def uses_query(self) -> bool:
        # the distraction attention of M2 has no query term
        return self.query_mode != "none" and self.diversity is not DiversityMode.M2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class DecodeTrace:
    tokens: list[int] = field(default_factory=list)
    distributions: list[np.ndarray] = field(default_factory=list)
    contexts: list[np.ndarray] = field(default_factory=list)
    diverse_contexts: list[np.ndarray] = field(default_factory=list)
    query_weights: list[np.ndarray] = field(default_factory=list)
    doc_weights: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Encoded:
    Hd: Tensor
    d_keys: Tensor | None
    s0: Tensor
    Hq: Tensor | None = None
    q_keys: Tensor | None = None
    q_static: Tensor | None = None


@dataclass
class Step:
    s: Tensor
    logits: Tensor
    d_t: Tensor
    d_prime: Tensor
    doc_weights: Tensor
    query_weights: Tensor | None
    state: div.DiversityState


class Model:
    """Parameters plus the forward computation, for one configuration."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        c = config
        self.embeddings = EmbeddingTable(params["E"], c.embed_trainable)
        self.gru_d = GruParams.from_named("gru_d", params)
        self.gru_dec = GruParams.from_named("gru_dec", params)
        self.gru_q = GruParams.from_named("gru_q", params) if c.uses_query else None
        self.att_q = QueryAttnParams.from_named(params) if c.uses_query and c.query_mode == "attention" else None
        self.att_d = None if c.diversity is DiversityMode.M2 else DocAttnParams.from_named(params)
        self.div_params = {k: v for k, v in params.items() if k.startswith("div.")}
        expected = set(self.init_shapes(c))
        if set(params) != expected:
            raise ValueError(f"parameter names do not match the configuration: "
                             f"missing {sorted(expected - set(params))}, extra {sorted(set(params) - expected)}")
        for name, shape in self.init_shapes(c).items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")

    # -- construction ---------------------------------------------------

    @staticmethod
    def init_shapes(c: ModelConfig) -> dict[str, tuple[int, ...]]:
        rng = np.random.default_rng(0)
        tiny = Model._fresh(c, rng, shapes_only=True)
        return {k: v.shape for k, v in tiny.items()}

    @staticmethod
    def _fresh(c: ModelConfig, rng: np.random.Generator, shapes_only: bool = False,
               embedding: np.ndarray | None = None) -> dict[str, Tensor]:
        d, l1, l2, l4 = c.embed_dim, c.dec_hidden, c.query_hidden, c.doc_hidden
        if shapes_only:
            # same names and shapes without paying for a large random draw
            rng = _ShapeRng()
        E = embedding if embedding is not None else random_table(c.vocab_size, d, rng)
        params: dict[str, Tensor] = {"E": parameter(E, "E")}
        params.update(GruParams.init(d, l4, rng, "gru_d").named("gru_d"))
        if c.uses_query:
            params.update(GruParams.init(d, l2, rng, "gru_q").named("gru_q"))
            if c.query_mode == "attention":
                params.update(QueryAttnParams.init(l1, l2, rng).named())
        if c.diversity is not DiversityMode.M2:
            params.update(DocAttnParams.init(l1, l4, l2 if c.uses_query else None, rng).named())
        params.update(GruParams.init(d + l4, l1, rng, "gru_dec").named("gru_dec"))
        b = 1.0 / np.sqrt(l1)
        params["dec.W_o"] = parameter(rng.uniform(-b, b, (c.vocab_size, l1)), "dec.W_o")
        params["dec.W_dec"] = parameter(rng.uniform(-b, b, (l1, l1)), "dec.W_dec")
        params["dec.V_dec"] = parameter(rng.uniform(-b, b, (l1, l4)), "dec.V_dec")
        params["dec.s_init"] = parameter(rng.uniform(-b, b, (l1, l4)), "dec.s_init")
        params.update(div.init_params(c.diversity, l1, l4, rng))
        return params

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, embedding: np.ndarray | None = None) -> "Model":
        if embedding is not None and embedding.shape != (config.vocab_size, config.embed_dim):
            raise ValueError(f"embedding shape {embedding.shape} does not fit the configuration")
        return cls(config, cls._fresh(config, rng, embedding=embedding))

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k != "E" or self.config.embed_trainable}

    def copy(self) -> "Model":
        return Model(self.config, {k: parameter(v.data.copy(), k) for k, v in self.params.items()})

    # -- forward pieces -------------------------------------------------

    def encode_inputs(self, g: Graph, query_ids: Sequence[int], doc_ids: Sequence[int]) -> Encoded:
        if len(doc_ids) == 0:
            raise ValueError("empty document")
        if self.config.uses_query and len(query_ids) == 0:
            raise ValueError("empty query")
        Hd = encode(g, self.gru_d, self.embeddings.embed(g, doc_ids)).matrix
        d_keys = project_keys(g, self.att_d.U_d, Hd) if self.att_d is not None else None
        s0 = init_state(g, self.params["dec.s_init"], g.row(Hd, Hd.shape[0] - 1))
        enc = Encoded(Hd, d_keys, s0)
        if self.gru_q is not None:
            enc.Hq = encode(g, self.gru_q, self.embeddings.embed(g, query_ids)).matrix
            if self.att_q is not None:
                enc.q_keys = project_keys(g, self.att_q.U_q, enc.Hq)
            else:
                enc.q_static = g.mean_rows(enc.Hq)
        return enc

    def step(self, g: Graph, enc: Encoded, s_prev: Tensor, prev_emb: Tensor, dprime_prev: Tensor,
             state: div.DiversityState) -> Step:
        c = self.config
        s = decoder_step(g, self.gru_dec, s_prev, prev_emb, dprime_prev)
        q_alpha = None
        if c.diversity is DiversityMode.M2:
            d_alpha, d_t, d_prime, state = div.m2_attention(g, self.div_params, s, enc.Hd, state)
        else:
            q_t = None
            if self.att_q is not None:
                qa = query_attention(g, self.att_q, s, enc.Hq, keys=enc.q_keys)
                q_alpha, q_t = qa.weights, qa.context
            elif enc.q_static is not None:
                q_t = enc.q_static
            da = document_attention(g, self.att_d, s, enc.Hd, q_t, keys=enc.d_keys)
            d_alpha, d_t = da.weights, da.context
            d_prime, state = div.apply(g, c.diversity, self.div_params, d_t, state,
                                       sd1_squash=c.sd1_squash, store_raw_cell=c.store_raw_cell)
        logits = output_logits(g, self.params, s, d_prime)
        return Step(s, logits, d_t, d_prime, d_alpha, q_alpha, state)

    def start(self, enc: Encoded):
        l4 = self.config.doc_hidden
        state = div.initial_state(self.config.diversity, l4, enc.Hd.shape[0])
        return enc.s0, constant(np.zeros(l4)), state


def init_state(g: Graph, s_init: Tensor, h_final_doc: Tensor) -> Tensor:
    """Initial decoder state ``tanh(s_init h_n)``."""
    return g.tanh(g.matvec(s_init, h_final_doc))


def decoder_step(g: Graph, p: GruParams, s_prev: Tensor, prev_emb: Tensor, dprime_prev: Tensor) -> Tensor:
    return gru_step(g, p, s_prev, g.concat([prev_emb, dprime_prev]))


def output_logits(g: Graph, params: dict[str, Tensor], s_t: Tensor, d_prime: Tensor) -> Tensor:
    hidden = g.add(g.matvec(params["dec.W_dec"], s_t), g.matvec(params["dec.V_dec"], d_prime))
    return g.matvec(params["dec.W_o"], hidden)


def output_distribution(g: Graph, params: dict[str, Tensor], s_t: Tensor, d_prime: Tensor) -> Tensor:
    """``softmax(W_o (W_dec s_t + V_dec d'_t))``; the inner nonlinearity is the identity."""
    return g.softmax(output_logits(g, params, s_t, d_prime))


def sequence_loss(g: Graph, model: Model, triple: Triple, rng: np.random.Generator | None = None) -> Tensor:
    """Mean per-token negative log-likelihood of the summary under teacher forcing.

    With ``config.sampling_prob > 0`` and an ``rng`` the previous token is,
    with that probability, the model's own argmax instead of the gold one.
    """
    target = [t for t in triple.summary_ids if t != PAD]
    if not target or target[-1] != EOS:
        raise ValueError("summary must be non-empty and end with EOS")
    enc = model.encode_inputs(g, triple.query_ids, triple.doc_ids)
    s, dprime, state = model.start(enc)
    E = model.embeddings.matrix
    sampling = model.config.sampling_prob > 0 and rng is not None
    if not sampling:
        prev_rows = g.rows(E, [SOS] + target[:-1])
    losses = []
    prev_logits = None
    for t, gold in enumerate(target):
        if not sampling:
            emb = g.row(prev_rows, t)
        else:
            if t == 0:
                prev = SOS
            elif rng.random() < model.config.sampling_prob:
                prev = int(np.argmax(prev_logits.data))
            else:
                prev = target[t - 1]
            emb = g.row(E, prev)
        out = model.step(g, enc, s, emb, dprime, state)
        s, dprime, state, prev_logits = out.s, out.d_prime, out.state, out.logits
        losses.append(g.cross_entropy(out.logits, gold))
    return g.scale(g.add_n(losses), 1.0 / len(losses))


def greedy_decode(model: Model, query_ids: Sequence[int], doc_ids: Sequence[int],
                  max_len: int | None = None) -> DecodeTrace:
    """Feed back the most probable token (lowest id on ties) until EOS or ``max_len``."""
    max_len = model.config.max_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    if len(query_ids) == 0 or len(doc_ids) == 0:
        raise ValueError("query and document must be non-empty")
    g = Graph(record=False)
    enc = model.encode_inputs(g, query_ids, doc_ids)
    s, dprime, state = model.start(enc)
    E = model.embeddings.matrix
    trace = DecodeTrace()
    prev = SOS
    for _ in range(max_len):
        out = model.step(g, enc, s, g.row(E, prev), dprime, state)
        s, dprime, state = out.s, out.d_prime, out.state
        probs = g.softmax(out.logits).data
        prev = int(np.argmax(probs))
        trace.tokens.append(prev)
        trace.distributions.append(probs)
        trace.contexts.append(out.d_t.data)
        trace.diverse_contexts.append(out.d_prime.data)
        trace.doc_weights.append(out.doc_weights.data)
        if out.query_weights is not None:
            trace.query_weights.append(out.query_weights.data)
        if prev == EOS:
            break
    return trace


class _ShapeRng:
    """Stand-in generator that returns zeros of the requested size."""

    def uniform(self, low=0.0, high=1.0, size=None):
        return np.zeros(size if size is not None else ())
