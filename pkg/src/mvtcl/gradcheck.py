"""Finite-difference verification drivers for every analytic gradient.

Random configurations are filtered away from non-differentiable points
(hinge kinks, argmin/argmax ties, ReLU zeros) before differencing; the
filters are the kink-margin and gap thresholds stated with each driver.
"""

from __future__ import annotations

import numpy as np

from . import losses as L
from . import model as M

KINK_MARGIN = 1e-3  # min |hinge| and argmin gap accepted for differencing
FD_STEP = 1e-5

LOSS_TOLERANCES = {"tcl": 1e-5, "triplet": 1e-5, "center": 1e-5, "softmax": 1e-6}
NETWORK_TOLERANCE = 1e-4


def _tcl_margins(batch, centers, margin):
    """(per-sample |hinge|, per-sample argmin gap) for kink filtering."""
    dists = L._dists_to_centers(batch.features, centers.centers)
    rows = np.arange(batch.size)
    pos = dists[rows, batch.labels]
    masked = dists.copy()
    masked[rows, batch.labels] = np.inf
    part = np.sort(masked, axis=1)
    gap = part[:, 1] - part[:, 0] if masked.shape[1] >= 2 else np.full(batch.size, np.inf)
    hinge = pos + margin - part[:, 0]
    return np.abs(hinge), gap


def random_tcl_config(rng, m=6, k=4, d=5, margin=1.0, require_active=False):
    """Draws (batch, centers) away from hinge kinks and argmin ties."""
    while True:
        feats = rng.normal(0.0, 1.0, size=(m, d))
        centers = L.CenterBank(rng.normal(0.0, 1.0, size=(k, d)))
        labels = rng.integers(0, k, size=m)
        batch = L.EmbeddingBatch(feats, labels)
        hinge_margin, gap = _tcl_margins(batch, centers, margin)
        if np.all(hinge_margin > KINK_MARGIN) and np.all(gap > KINK_MARGIN):
            if not require_active or L.tcl_forward(batch, centers, margin).active.any():
                return batch, centers


def check_tcl(rng, margin=1.0, reduction="sum"):
    batch, centers = random_tcl_config(rng)
    result = L.tcl_forward(batch, centers, margin, reduction)
    analytic = L.tcl_backward(result, batch, centers)
    shape = batch.features.shape

    def loss_fn(flat):
        b = L.EmbeddingBatch(flat.reshape(shape), batch.labels, batch.sample_ids)
        return L.tcl_forward(b, centers, margin, reduction).loss

    return L.finite_diff_check(loss_fn, analytic, batch.features, FD_STEP)


def _triplet_kink_free(batch, margin, strategy):
    """True when every hinge sits away from zero and hard picks are unique."""
    f = batch.features
    labels = batch.labels
    m = batch.size
    D = L._pairwise_dists(f)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(m, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    if strategy == "batch-all":
        hinge = margin + D[:, :, None] - D[:, None, :]
        valid = pos_mask[:, :, None] & neg_mask[:, None, :]
        if not valid.any():
            return False
        return bool(np.all(np.abs(hinge[valid]) > KINK_MARGIN))
    # batch-hard: hardest picks must be unique and the hinge away from zero
    for a in range(m):
        if not (pos_mask[a].any() and neg_mask[a].any()):
            continue
        pd = D[a][pos_mask[a]]
        nd = D[a][neg_mask[a]]
        if pd.size > 1 and np.sort(pd)[-1] - np.sort(pd)[-2] < KINK_MARGIN:
            return False
        if nd.size > 1 and np.sort(nd)[1] - np.sort(nd)[0] < KINK_MARGIN:
            return False
        if abs(margin + pd.max() - nd.min()) < KINK_MARGIN:
            return False
    return True


def random_triplet_config(rng, m=6, k=3, d=4, margin=1.0, strategy="batch-all"):
    while True:
        feats = rng.normal(0.0, 1.0, size=(m, d))
        labels = rng.integers(0, k, size=m)
        if len(np.unique(labels)) < 2 or np.all(np.bincount(labels, minlength=k) < 2):
            continue
        batch = L.EmbeddingBatch(feats, labels)
        if _triplet_kink_free(batch, margin, strategy):
            return batch


def check_triplet(rng, margin=1.0, strategy="batch-all"):
    batch = random_triplet_config(rng, margin=margin, strategy=strategy)
    result = L.triplet_loss(batch, margin, strategy)
    shape = batch.features.shape

    def loss_fn(flat):
        b = L.EmbeddingBatch(flat.reshape(shape), batch.labels, batch.sample_ids)
        return L.triplet_loss(b, margin, strategy).loss

    return L.finite_diff_check(loss_fn, result.grad_features, batch.features, FD_STEP)


def check_center(rng, m=6, k=4, d=5, reduction="sum"):
    feats = rng.normal(0.0, 1.0, size=(m, d))
    centers = L.CenterBank(rng.normal(0.0, 1.0, size=(k, d)))
    labels = rng.integers(0, k, size=m)
    batch = L.EmbeddingBatch(feats, labels)
    result = L.center_loss(batch, centers, reduction)
    shape = batch.features.shape

    def loss_fn(flat):
        b = L.EmbeddingBatch(flat.reshape(shape), batch.labels, batch.sample_ids)
        return L.center_loss(b, centers, reduction).loss

    return L.finite_diff_check(loss_fn, result.grad_features, feats, FD_STEP)


def check_softmax(rng, m=6, k=5):
    logits = rng.normal(0.0, 2.0, size=(m, k))
    labels = rng.integers(0, k, size=m)
    result = L.softmax_ce(logits, labels)

    def loss_fn(flat):
        return L.softmax_ce(flat.reshape(m, k), labels).loss

    return L.finite_diff_check(loss_fn, result.grad_logits, logits, FD_STEP)


# ---------------------------------------------------------------------------
# Full-network parameter gradients.

def _flatten_params(params: M.NetworkParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def _unflatten_params(flat: np.ndarray, template: M.NetworkParams) -> M.NetworkParams:
    out = template.copy()
    pos = 0
    for a in out.arrays():
        a[...] = flat[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    return out


def _network_kink_free(traces, batch, centers, margin):
    for t in traces:
        for z in t.encoder_preacts[:-1] + t.head_preacts[:-1]:
            if np.any(np.abs(z) < KINK_MARGIN):
                return False
        srt = np.sort(t.encoder_out, axis=0)
        if srt.shape[0] > 1 and np.any(srt[-1] - srt[-2] < KINK_MARGIN):
            return False
    hinge_margin, gap = _tcl_margins(batch, centers, margin)
    return bool(np.all(hinge_margin > KINK_MARGIN) and np.all(gap > KINK_MARGIN))


def make_toy_network(rng, view_dim=3, encoder_widths=(4,), head_widths=(4,),
                     embed_dim=3, num_classes=2, weight_scale=0.7):
    """A small healthy-scale network for verification (init-law weights are
    too tiny to keep pre-activations away from ReLU kinks)."""
    params = M.init_params(0, view_dim, encoder_widths, head_widths,
                           embed_dim, num_classes)
    for a in params.arrays():
        a[...] = rng.normal(0.0, weight_scale, size=a.shape)
    return params


def check_network(rng, batch_size=4, views=2, margin=1.0, lam=0.5):
    """Finite differences of (lam * TCL + softmax) w.r.t. every parameter."""
    while True:
        params = make_toy_network(rng)
        view_list = [rng.normal(0.0, 1.0, size=(views, 3)) for _ in range(batch_size)]
        labels = np.array([i % 2 for i in range(batch_size)])
        centers = L.CenterBank(rng.normal(0.0, 1.0, size=(2, params.embed_dim)))
        embeddings, logits, traces = M.forward_batch(view_list, params)
        batch = L.EmbeddingBatch(embeddings, labels)
        if _network_kink_free(traces, batch, centers, margin):
            break

    cfg = L.LossConfig(kind="tcl+softmax", margin=margin, lam=lam)
    result = L.combined_loss(batch, logits, centers, cfg)
    grads = M.backward_batch(traces, result.grad_features, result.grad_logits, params)
    analytic = _flatten_params(grads)

    def loss_fn(flat):
        p = _unflatten_params(flat, params)
        emb, lg, _ = M.forward_batch(view_list, p)
        b = L.EmbeddingBatch(emb, labels)
        return L.combined_loss(b, lg, centers, cfg).loss

    return L.finite_diff_check(loss_fn, analytic, _flatten_params(params), FD_STEP)


def run_gradcheck(seed: int = 0, trials: int = 100, network_trials: int = 3):
    """Max relative error per loss (over `trials` random configs) and for the
    full network. Returns {name: (max_err, tolerance)}."""
    rng = np.random.default_rng(seed)
    results = {}
    checks = {"tcl": check_tcl, "triplet": check_triplet,
              "center": check_center, "softmax": check_softmax}
    for name, fn in checks.items():
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, fn(rng))
        results[name] = (worst, LOSS_TOLERANCES[name])
    worst = 0.0
    for _ in range(network_trials):
        worst = max(worst, check_network(rng))
    results["network"] = (worst, NETWORK_TOLERANCE)
    return results


def descent_check(rng, trials: int = 100, eps: float = 1e-3, margin: float = 1.0):
    """Verifies c <- c + eps * delta never increases the batch TCL value.

    Returns the worst (most positive) observed loss change over `trials`
    random active configurations filtered by the kink margins.
    """
    worst = -np.inf
    for _ in range(trials):
        batch, centers = random_tcl_config(rng, margin=margin, require_active=True)
        result = L.tcl_forward(batch, centers, margin)
        delta = L.tcl_center_update(result, batch, centers)
        moved = L.CenterBank(centers.centers + eps * delta)
        after = L.tcl_forward(batch, moved, margin)
        worst = max(worst, after.loss - result.loss)
    return worst
