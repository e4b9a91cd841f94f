"""Supervision losses with hand-derived gradients.

Distances are half squared Euclidean throughout: D(a, b) = 0.5 * ||a - b||^2.
Every gradient returned here is an exact analytic derivative; the test suite
verifies each one against central finite differences. All arithmetic is
float64 -- the gradient checks are infeasible in single precision.

The center update returned by `tcl_center_update` and `center_loss` is not
the raw gradient: both terms carry a damped 1/(1 + count) average, and the
result is a loss-decreasing direction meant to be *added* to the centers
(the optimizer applies its own learning rate and clipping).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DegenerateBatchError, NumericError

LOSS_KINDS = ("softmax", "triplet", "center", "tcl", "tcl+softmax", "center+softmax")
REDUCTIONS = ("sum", "mean")
TRIPLET_STRATEGIES = ("batch-all", "batch-hard")

# Loss kinds that own (and update) a center bank during training.
CENTER_KINDS = ("center", "tcl", "tcl+softmax", "center+softmax")


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite values")
    return arr


def _check_reduction(reduction: str) -> None:
    if reduction not in REDUCTIONS:
        raise ContractViolation(f"unknown reduction {reduction!r}")


@dataclass
class EmbeddingBatch:
    """A batch of embedding rows with integer class labels."""

    features: np.ndarray  # (M, d)
    labels: np.ndarray  # (M,) class indices
    sample_ids: list[str] | None = None

    def __post_init__(self):
        self.features = _as_matrix(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ContractViolation("labels must be 1-D with one entry per feature row")
        if self.features.shape[0] < 1:
            raise ContractViolation("batch must contain at least one sample")
        if np.any(self.labels < 0):
            raise ContractViolation("labels must be non-negative class indices")
        if self.sample_ids is None:
            self.sample_ids = [str(i) for i in range(self.labels.shape[0])]
        elif len(self.sample_ids) != self.labels.shape[0]:
            raise ContractViolation("sample_ids length must match the batch size")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class CenterBank:
    """Learnable class centers, one d-vector per class (row j = center of class j)."""

    centers: np.ndarray  # (K, d)

    def __post_init__(self):
        self.centers = _as_matrix(self.centers, "centers")
        if self.centers.shape[0] < 1:
            raise ContractViolation("center bank needs at least one class")

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @classmethod
    def init_gaussian(cls, num_classes: int, dim: int, seed: int) -> "CenterBank":
        """Centers drawn from N(0, 0.01^2), the same law used for network weights."""
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 0.01, size=(num_classes, dim)))

    def copy(self) -> "CenterBank":
        return CenterBank(self.centers.copy())


@dataclass
class LossConfig:
    """Selects a supervision loss and its hyper-parameters."""

    kind: str = "tcl+softmax"
    margin: float = 5.0
    lam: float = 0.01  # trade-off weight on the metric component
    reduction: str = "sum"
    triplet_strategy: str = "batch-all"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ContractViolation(f"unknown loss kind {self.kind!r}")
        if self.margin < 0:
            raise ContractViolation("margin must be non-negative")
        if self.lam < 0:
            raise ContractViolation("lambda must be non-negative")
        _check_reduction(self.reduction)
        if self.triplet_strategy not in TRIPLET_STRATEGIES:
            raise ContractViolation(f"unknown triplet strategy {self.triplet_strategy!r}")

    @property
    def uses_centers(self) -> bool:
        return self.kind in CENTER_KINDS

    @property
    def uses_softmax(self) -> bool:
        return self.kind in ("softmax", "tcl+softmax", "center+softmax")


@dataclass
class TclForwardResult:
    loss: float
    per_sample_loss: np.ndarray  # (M,) hinge values, >= 0
    nearest_negative: np.ndarray  # (M,) index of the closest other-class center
    active: np.ndarray  # (M,) bool, hinge strictly positive
    reduction: str = "sum"


@dataclass
class LossResult:
    """Scalar loss plus whichever gradients the loss kind produces."""

    loss: float
    grad_features: np.ndarray | None = None  # (M, d)
    grad_logits: np.ndarray | None = None  # (M, K)
    center_update: np.ndarray | None = None  # (K, d), additive direction
    components: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Operation counting (cost instrumentation, opt-in)

@dataclass
class OpCounts:
    positive_distance_evals: int = 0
    negative_distance_evals: int = 0
    pairwise_distance_evals: int = 0
    triples_enumerated: int = 0


_ACTIVE_COUNTS: OpCounts | None = None


@contextlib.contextmanager
def count_operations():
    """Collect distance/triple evaluation counts from losses run in the block.

    Counting never changes any computed value; it only observes how many
    distance evaluations and triple hinges each loss performs.
    """
    global _ACTIVE_COUNTS
    prev, counts = _ACTIVE_COUNTS, OpCounts()
    _ACTIVE_COUNTS = counts
    try:
        yield counts
    finally:
        _ACTIVE_COUNTS = prev


# ---------------------------------------------------------------------------
# Distances

def half_sq_dist(a, b) -> float:
    """Half squared Euclidean distance: 0.5 * sum_k (a_k - b_k)^2."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"dimension mismatch: {a.shape} vs {b.shape}")
    return 0.5 * float(np.sum((a - b) ** 2))


def _dists_to_centers(features: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(M, K) matrix of half squared distances from each row to each center."""
    diff = features[:, None, :] - centers[None, :, :]
    return 0.5 * np.einsum("mkd,mkd->mk", diff, diff)


def _pairwise_dists(features: np.ndarray) -> np.ndarray:
    """(M, M) matrix of half squared distances between embedding rows."""
    diff = features[:, None, :] - features[None, :, :]
    return 0.5 * np.einsum("abd,abd->ab", diff, diff)


# ---------------------------------------------------------------------------
# Triplet-center loss

def tcl_forward(batch: EmbeddingBatch, centers: CenterBank, margin: float = 5.0,
                reduction: str = "sum") -> TclForwardResult:
    """Hinge loss requiring each sample to sit closer to its own center than
    to the nearest other-class center, by `margin` in half-squared distance.

    Per sample: max(D(f_i, c_{y_i}) + margin - min_{j != y_i} D(f_i, c_j), 0).
    Nearest-negative ties resolve to the lowest class index.
    """
    _check_reduction(reduction)
    if margin < 0:
        raise ContractViolation("margin must be non-negative")
    K = centers.num_classes
    if K < 2:
        raise ContractViolation("TCL undefined without a negative center")
    if np.any(batch.labels >= K):
        raise ContractViolation("batch labels exceed the number of centers")
    if batch.dim != centers.dim:
        raise ContractViolation("feature and center dimensions differ")

    M = batch.size
    rows = np.arange(M)
    dists = _dists_to_centers(batch.features, centers.centers)
    if _ACTIVE_COUNTS is not None:
        _ACTIVE_COUNTS.positive_distance_evals += M
        _ACTIVE_COUNTS.negative_distance_evals += M * (K - 1)
    pos = dists[rows, batch.labels]
    masked = dists.copy()
    masked[rows, batch.labels] = np.inf
    nearest = np.argmin(masked, axis=1)  # first minimum -> lowest class index
    neg = masked[rows, nearest]
    per_sample = np.maximum(pos + margin - neg, 0.0)
    active = per_sample > 0.0
    loss = float(per_sample.sum() if reduction == "sum" else per_sample.mean())
    return TclForwardResult(loss=loss, per_sample_loss=per_sample,
                            nearest_negative=nearest, active=active,
                            reduction=reduction)


def tcl_backward(result: TclForwardResult, batch: EmbeddingBatch,
                 centers: CenterBank) -> np.ndarray:
    """Gradient of the TCL value w.r.t. the embeddings.

    Active rows get exactly c_{q_i} - c_{y_i}; inactive rows are exactly zero.
    Scaled by 1/M under mean reduction.
    """
    grad = np.zeros_like(batch.features)
    act = result.active
    if np.any(act):
        grad[act] = (centers.centers[result.nearest_negative[act]]
                     - centers.centers[batch.labels[act]])
    if result.reduction == "mean":
        grad /= batch.size
    return grad


def tcl_center_update(result: TclForwardResult, batch: EmbeddingBatch,
                      centers: CenterBank) -> np.ndarray:
    """Damped-average update direction for every center.

    delta_j =   sum_i (f_i - c_j) [active_i][y_i = j] / (1 + #{active own members})
              - sum_i (f_i - c_j) [active_i][q_i = j] / (1 + #{actives with j nearest negative})

    Adding the result to the centers pulls each one toward its own active
    members and pushes it away from actives that chose it as nearest negative.
    """
    K = centers.num_classes
    delta = np.zeros_like(centers.centers)
    act = result.active
    if not np.any(act):
        return delta
    f = batch.features[act]
    y = batch.labels[act]
    q = result.nearest_negative[act]

    pull = np.zeros_like(centers.centers)
    np.add.at(pull, y, f - centers.centers[y])
    n_own = np.bincount(y, minlength=K)

    push = np.zeros_like(centers.centers)
    np.add.at(push, q, f - centers.centers[q])
    n_neg = np.bincount(q, minlength=K)

    delta = pull / (1.0 + n_own)[:, None] - push / (1.0 + n_neg)[:, None]
    return delta


# ---------------------------------------------------------------------------
# Center loss

def center_loss(batch: EmbeddingBatch, centers: CenterBank,
                reduction: str = "sum") -> LossResult:
    """Pulls each embedding toward its class center: 0.5 * sum_i ||f_i - c_{y_i}||^2.

    A single factor 1/2 total. The center update averages the residuals with
    the same 1/(1 + count) damping as the triplet-center rule, without an
    activity gate (every sample counts).
    """
    _check_reduction(reduction)
    K = centers.num_classes
    if np.any(batch.labels >= K):
        raise ContractViolation("batch labels exceed the number of centers")
    if batch.dim != centers.dim:
        raise ContractViolation("feature and center dimensions differ")

    M = batch.size
    diffs = batch.features - centers.centers[batch.labels]
    if _ACTIVE_COUNTS is not None:
        _ACTIVE_COUNTS.positive_distance_evals += M
    per_sample = 0.5 * np.sum(diffs ** 2, axis=1)
    loss = float(per_sample.sum() if reduction == "sum" else per_sample.mean())
    grad = diffs.copy()
    if reduction == "mean":
        grad /= M

    pull = np.zeros_like(centers.centers)
    np.add.at(pull, batch.labels, diffs)
    counts = np.bincount(batch.labels, minlength=K)
    update = pull / (1.0 + counts)[:, None]
    return LossResult(loss=loss, grad_features=grad, center_update=update,
                      components={"center": loss})


# ---------------------------------------------------------------------------
# Triplet loss

def triplet_hinge(anchor, positive, negative, margin: float) -> float:
    """Loss of a single (anchor, positive, negative) triple."""
    return max(0.0, margin + half_sq_dist(anchor, positive)
               - half_sq_dist(anchor, negative))


def triplet_loss(batch: EmbeddingBatch, margin: float = 5.0,
                 strategy: str = "batch-all") -> LossResult:
    """Within-batch triplet loss over embeddings.

    batch-all averages the hinge over every ordered (anchor, positive,
    negative) triple with y_a = y_p (a != p) and y_a != y_n. batch-hard keeps,
    per anchor, its hardest positive (max D) and hardest negative (min D) and
    averages over anchors that have both. Raises DegenerateBatchError when the
    batch contains no valid triple.
    """
    if strategy not in TRIPLET_STRATEGIES:
        raise ContractViolation(f"unknown triplet strategy {strategy!r}")
    if margin < 0:
        raise ContractViolation("margin must be non-negative")

    f = batch.features
    labels = batch.labels
    M = batch.size
    same = labels[:, None] == labels[None, :]
    eye = np.eye(M, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same

    D = _pairwise_dists(f)
    if _ACTIVE_COUNTS is not None:
        _ACTIVE_COUNTS.pairwise_distance_evals += M * (M - 1)

    if strategy == "batch-all":
        # hinge[a, p, n] = margin + D[a, p] - D[a, n]
        hinge = margin + D[:, :, None] - D[:, None, :]
        valid = pos_mask[:, :, None] & neg_mask[:, None, :]
        n_triples = int(valid.sum())
        if n_triples == 0:
            raise DegenerateBatchError(
                "degenerate batch: no valid (anchor, positive, negative) triple")
        if _ACTIVE_COUNTS is not None:
            _ACTIVE_COUNTS.triples_enumerated += n_triples
        active = valid & (hinge > 0.0)
        loss = float(np.where(active, hinge, 0.0).sum() / n_triples)

        # W[a, b] = net coefficient on D[a, b] across active triples
        W = np.zeros((M, M))
        W += active.sum(axis=2)  # (a, p) appearances
        W -= active.sum(axis=1)  # (a, n) appearances
        row = W.sum(axis=1)
        col = W.sum(axis=0)
        grad = ((row + col)[:, None] * f - (W + W.T) @ f) / n_triples
        return LossResult(loss=loss, grad_features=grad,
                          components={"triplet": loss})

    # batch-hard
    has_pos = pos_mask.any(axis=1)
    has_neg = neg_mask.any(axis=1)
    anchors = np.flatnonzero(has_pos & has_neg)
    if anchors.size == 0:
        raise DegenerateBatchError(
            "degenerate batch: no anchor with both a positive and a negative")
    if _ACTIVE_COUNTS is not None:
        _ACTIVE_COUNTS.triples_enumerated += int(anchors.size)

    grad = np.zeros_like(f)
    total = 0.0
    for a in anchors:
        pd = np.where(pos_mask[a], D[a], -np.inf)
        hp = int(np.argmax(pd))  # first maximum -> lowest index
        nd = np.where(neg_mask[a], D[a], np.inf)
        hn = int(np.argmin(nd))
        h = margin + D[a, hp] - D[a, hn]
        if h > 0.0:
            total += h
            grad[a] += (f[a] - f[hp]) - (f[a] - f[hn])
            grad[hp] += f[hp] - f[a]
            grad[hn] += f[a] - f[hn]
    n = anchors.size
    loss = float(total / n)
    grad /= n
    return LossResult(loss=loss, grad_features=grad,
                      components={"triplet": loss})


# ---------------------------------------------------------------------------
# Softmax cross-entropy

def softmax_ce(logits, labels) -> LossResult:
    """Mean cross-entropy over rows, stabilized via log-sum-exp.

    grad_logits row i = (softmax(logits_i) - onehot(y_i)) / M.
    """
    logits = _as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    M, K = logits.shape
    if labels.shape != (M,):
        raise ContractViolation("labels must be 1-D with one entry per logits row")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ContractViolation("labels out of range for the logit width")

    rows = np.arange(M)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1))[:, None]
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= M
    return LossResult(loss=loss, grad_logits=grad, components={"softmax": loss})


# ---------------------------------------------------------------------------
# Joint supervision

def combined_loss(batch: EmbeddingBatch, logits, centers: CenterBank | None,
                  cfg: LossConfig) -> LossResult:
    """Dispatches on cfg.kind; joint kinds return lam * metric + softmax.

    The center update is passed through unweighted: centers have their own
    learning rate, so lam only scales the embedding gradients.
    """
    kind = cfg.kind
    if kind == "softmax":
        return softmax_ce(logits, batch.labels)
    if kind == "triplet":
        return triplet_loss(batch, cfg.margin, cfg.triplet_strategy)
    if kind == "center":
        return center_loss(batch, centers, cfg.reduction)
    if kind == "tcl":
        res = tcl_forward(batch, centers, cfg.margin, cfg.reduction)
        return LossResult(loss=res.loss,
                          grad_features=tcl_backward(res, batch, centers),
                          center_update=tcl_center_update(res, batch, centers),
                          components={"tcl": res.loss})
    if kind == "tcl+softmax":
        res = tcl_forward(batch, centers, cfg.margin, cfg.reduction)
        sm = softmax_ce(logits, batch.labels)
        return LossResult(loss=cfg.lam * res.loss + sm.loss,
                          grad_features=cfg.lam * tcl_backward(res, batch, centers),
                          grad_logits=sm.grad_logits,
                          center_update=tcl_center_update(res, batch, centers),
                          components={"tcl": res.loss, "softmax": sm.loss})
    if kind == "center+softmax":
        cl = center_loss(batch, centers, cfg.reduction)
        sm = softmax_ce(logits, batch.labels)
        return LossResult(loss=cfg.lam * cl.loss + sm.loss,
                          grad_features=cfg.lam * cl.grad_features,
                          grad_logits=sm.grad_logits,
                          center_update=cl.center_update,
                          components={"center": cl.loss, "softmax": sm.loss})
    raise ContractViolation(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Finite-difference oracle

def finite_diff_check(loss_fn, analytic_grad, point, h: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central differences.

    `loss_fn` maps a flat parameter vector to a scalar; `point` is where to
    differentiate. Relative error per coordinate uses max(1, |numeric|) in the
    denominator, so near-zero gradients are compared absolutely. The caller is
    responsible for keeping `point` away from hinge kinks and argmin ties.
    """
    if h <= 0:
        raise ContractViolation("step size h must be positive")
    point = np.array(point, dtype=np.float64).ravel()
    analytic = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if analytic.shape != point.shape:
        raise ContractViolation("analytic gradient and point shapes differ")

    numeric = np.empty_like(point)
    x = point.copy()
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + h
        up = float(loss_fn(x))
        x[k] = orig - h
        dn = float(loss_fn(x))
        x[k] = orig
        if not (np.isfinite(up) and np.isfinite(dn)):
            raise NumericError("loss evaluated to a non-finite value during differencing")
        numeric[k] = (up - dn) / (2.0 * h)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
