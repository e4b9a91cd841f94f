"""Multi-view embedding network: shared per-view MLP encoder, element-wise
max view-pooling, an embedding head, and a linear classifier.

Forward and backward passes are written by hand against numpy (no autodiff).
Parameters live in plain float64 arrays; `ForwardTrace` stores everything the
backward pass needs (pre-activations, pool argmax, inputs). In cross-domain
mode each domain owns its own view encoder while the head, classifier and
centers are shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

INIT_STD = 0.01  # weights ~ N(0, INIT_STD^2), biases zero


@dataclass
class MlpParams:
    """Stacked dense layers; rectified-linear between layers, identity output."""

    weights: list[np.ndarray]  # each (out, in)
    biases: list[np.ndarray]  # each (out,)

    def __post_init__(self):
        if not self.weights:
            raise ContractViolation("an MLP needs at least one layer")
        if len(self.weights) != len(self.biases):
            raise ContractViolation("weights and biases must pair up")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ContractViolation(f"layer {i} has inconsistent shapes")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractViolation(f"layer {i} input does not chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])


@dataclass
class NetworkParams:
    """All learnable arrays of the embedding network.

    `view_encoders[k]` encodes views of domain k (pre-pool group). The
    embedding head and classifier are shared across domains (post-pool
    group). Classifier weights are separate storage from any center bank.
    """

    view_encoders: list[MlpParams]
    embed_head: MlpParams
    classifier_w: np.ndarray  # (K, d)
    classifier_b: np.ndarray  # (K,)

    def __post_init__(self):
        if not self.view_encoders:
            raise ContractViolation("need at least one view encoder")
        pool_dim = self.view_encoders[0].out_dim
        for enc in self.view_encoders:
            if enc.out_dim != pool_dim:
                raise ContractViolation("all view encoders must share an output width")
        if self.embed_head.in_dim != pool_dim:
            raise ContractViolation("embed head input must match the pooled width")
        if self.classifier_w.shape[1] != self.embed_head.out_dim:
            raise ContractViolation("classifier width must match the embedding dim")
        if self.classifier_b.shape != (self.classifier_w.shape[0],):
            raise ContractViolation("classifier bias shape mismatch")

    @property
    def embed_dim(self) -> int:
        return self.embed_head.out_dim

    @property
    def num_classes(self) -> int:
        return self.classifier_w.shape[0]

    @property
    def num_domains(self) -> int:
        return len(self.view_encoders)

    def copy(self) -> "NetworkParams":
        return NetworkParams([e.copy() for e in self.view_encoders],
                             self.embed_head.copy(),
                             self.classifier_w.copy(), self.classifier_b.copy())

    def arrays(self):
        """All parameter arrays in a fixed order (encoders, head, classifier)."""
        out = []
        for enc in self.view_encoders:
            out.extend(enc.weights)
            out.extend(enc.biases)
        out.extend(self.embed_head.weights)
        out.extend(self.embed_head.biases)
        out.append(self.classifier_w)
        out.append(self.classifier_b)
        return out


@dataclass
class ForwardTrace:
    """Everything the backward pass needs to replay one object's forward."""

    views: np.ndarray  # (V, D) input
    domain: int
    encoder_preacts: list[np.ndarray] = field(default_factory=list)  # per layer (V, h)
    encoder_out: np.ndarray | None = None  # (V, h_pool)
    pool_argmax: np.ndarray | None = None  # (h_pool,) winning view per dim
    pooled: np.ndarray | None = None  # (h_pool,)
    head_preacts: list[np.ndarray] = field(default_factory=list)  # per layer (h,)
    embedding: np.ndarray | None = None  # (d,)
    logits: np.ndarray | None = None  # (K,)


def init_params(seed: int, view_dim: int, encoder_widths, head_widths,
                embed_dim: int, num_classes: int, num_domains: int = 1) -> NetworkParams:
    """Seeded Gaussian init: every weight ~ N(0, 0.01^2), biases zero.

    Draw order is fixed (encoder per domain, head, classifier) so a seed
    fully determines the parameters.
    """
    encoder_widths = list(encoder_widths)
    head_widths = list(head_widths)
    if not encoder_widths:
        raise ContractViolation("encoder needs at least one layer width")
    if view_dim < 1 or embed_dim < 1 or num_classes < 1 or num_domains < 1:
        raise ContractViolation("dimensions must be positive")
    rng = np.random.default_rng(seed)

    def mlp(dims):
        ws, bs = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            ws.append(rng.normal(0.0, INIT_STD, size=(d_out, d_in)))
            bs.append(np.zeros(d_out))
        return MlpParams(ws, bs)

    encoders = [mlp([view_dim] + encoder_widths) for _ in range(num_domains)]
    head = mlp([encoder_widths[-1]] + head_widths + [embed_dim])
    w = rng.normal(0.0, INIT_STD, size=(num_classes, embed_dim))
    b = np.zeros(num_classes)
    return NetworkParams(encoders, head, w, b)


def _mlp_forward(x: np.ndarray, mlp: MlpParams):
    """Returns (output, preacts). ReLU after every layer except the last."""
    preacts = []
    a = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = a @ w.T + b
        preacts.append(z)
        a = z if i == last else np.maximum(z, 0.0)
    return a, preacts


def view_pool(view_feats: np.ndarray):
    """Element-wise max over views; ties go to the lowest view index."""
    view_feats = np.asarray(view_feats, dtype=np.float64)
    if view_feats.ndim != 2 or view_feats.shape[0] < 1:
        raise ContractViolation("view features must be a non-empty V x h matrix")
    argmax = np.argmax(view_feats, axis=0)
    pooled = view_feats[argmax, np.arange(view_feats.shape[1])]
    return pooled, argmax


def forward_object(views: np.ndarray, params: NetworkParams, domain: int = 0):
    """Runs one object through encoder -> max-pool -> head -> classifier.

    Returns (embedding, logits, trace).
    """
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 2 or views.shape[0] < 1:
        raise ContractViolation("views must be a non-empty V x D matrix")
    if not 0 <= domain < params.num_domains:
        raise ContractViolation(f"domain {domain} out of range")
    encoder = params.view_encoders[domain]
    if views.shape[1] != encoder.in_dim:
        raise ContractViolation("view dimension does not match the encoder input")

    trace = ForwardTrace(views=views, domain=domain)
    enc_out, trace.encoder_preacts = _mlp_forward(views, encoder)
    trace.encoder_out = enc_out
    trace.pooled, trace.pool_argmax = view_pool(enc_out)
    embedding, trace.head_preacts = _mlp_forward(trace.pooled, params.embed_head)
    trace.embedding = embedding
    trace.logits = params.classifier_w @ embedding + params.classifier_b
    return embedding, trace.logits, trace


def forward_batch(view_list, params: NetworkParams, domains=None):
    """Forward a list of objects; returns (embeddings M x d, logits M x K, traces)."""
    if domains is None:
        domains = [0] * len(view_list)
    embeddings, logits, traces = [], [], []
    for views, dom in zip(view_list, domains):
        e, l, t = forward_object(views, params, dom)
        embeddings.append(e)
        logits.append(l)
        traces.append(t)
    return np.asarray(embeddings), np.asarray(logits), traces


def zero_grads(params: NetworkParams) -> NetworkParams:
    """A NetworkParams mirror filled with zeros, used as a gradient accumulator."""
    return NetworkParams(
        [MlpParams([np.zeros_like(w) for w in enc.weights],
                   [np.zeros_like(b) for b in enc.biases])
         for enc in params.view_encoders],
        MlpParams([np.zeros_like(w) for w in params.embed_head.weights],
                  [np.zeros_like(b) for b in params.embed_head.biases]),
        np.zeros_like(params.classifier_w),
        np.zeros_like(params.classifier_b),
    )


def _mlp_backward(upstream, preacts, inputs, mlp: MlpParams, grads: MlpParams):
    """Accumulates layer gradients into `grads`; returns gradient w.r.t. inputs.

    `upstream` is the gradient at the MLP output (identity activation there);
    `inputs` is the forward input (vector or matrix of rows).
    """
    acts = [inputs]
    last = len(mlp.weights) - 1
    for z in preacts[:-1]:
        acts.append(np.maximum(z, 0.0))
    delta = upstream
    for i in range(last, -1, -1):
        if i < last:
            delta = delta * (preacts[i] > 0.0)
        a_prev = acts[i]
        if delta.ndim == 1:
            grads.weights[i] += np.outer(delta, a_prev)
            grads.biases[i] += delta
        else:
            grads.weights[i] += delta.T @ a_prev
            grads.biases[i] += delta.sum(axis=0)
        delta = delta @ mlp.weights[i]
    return delta


def backward_batch(traces, grad_embeddings, grad_logits,
                   params: NetworkParams) -> NetworkParams:
    """Hand-written backprop through classifier, head, max-pool and encoder.

    grad_logits flows through the classifier into the embedding path and is
    summed with grad_embeddings there; the max-pool routes gradient only to
    the argmax view per dimension; ReLU gates by the stored pre-activation
    sign. Accumulation runs in batch order, so results are deterministic.
    """
    grad_embeddings = np.asarray(grad_embeddings, dtype=np.float64)
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    M = len(traces)
    if grad_embeddings.shape != (M, params.embed_dim):
        raise ContractViolation("grad_embeddings shape does not match the traces")
    if grad_logits.shape != (M, params.num_classes):
        raise ContractViolation("grad_logits shape does not match the traces")

    grads = zero_grads(params)
    for i, trace in enumerate(traces):
        if trace.domain >= params.num_domains:
            raise ContractViolation("trace domain outside the network's domains")
        gl = grad_logits[i]
        grads.classifier_w += np.outer(gl, trace.embedding)
        grads.classifier_b += gl
        ge = grad_embeddings[i] + params.classifier_w.T @ gl

        g_pooled = _mlp_backward(ge, trace.head_preacts, trace.pooled,
                                 params.embed_head, grads.embed_head)

        enc_out = trace.encoder_out
        g_enc_out = np.zeros_like(enc_out)
        cols = np.arange(enc_out.shape[1])
        g_enc_out[trace.pool_argmax, cols] = g_pooled

        encoder = params.view_encoders[trace.domain]
        _mlp_backward(g_enc_out, trace.encoder_preacts, trace.views,
                      encoder, grads.view_encoders[trace.domain])
    return grads
