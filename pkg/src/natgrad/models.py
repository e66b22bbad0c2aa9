"""Differentiable model zoo with per-sample linearisation.

Three model kinds cover everything the rest of the package needs:

* ``mlp-softmax-ce`` -- a fully connected ReLU network with softmax
  cross-entropy loss, the workhorse for training experiments;
* ``linear-least-squares`` -- an affine predictor under squared error, the
  setting where several preconditioners coincide analytically;
* ``logistic-binary`` -- an affine logit under binary cross-entropy, used by
  the two-parameter classification toy.

Every update rule in this package is built from four per-batch quantities:
the per-sample loss gradients stacked into a Jacobian, their squared
logit-space gradient norms, the summed gradient, and (for classification)
the predictive probabilities.  :func:`batch_linearize` returns all of them in
one pass.  The parameter vector is flat; the layout is row-major weights then
bias per layer for the MLP, and offset-first affine coordinates for the two
regression kinds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.special

KINDS = ("mlp-softmax-ce", "linear-least-squares", "logistic-binary")
ACTIVATIONS = ("relu", "identity")


class ShapeMismatch(Exception):
    """Parameter vector, feature matrix, or labels do not fit the model spec."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``widths`` lists the full layer chain for the MLP (input width, hidden
    widths, class count) and just ``(input_width,)`` for the affine
    regression kinds, whose single output is implicit.
    """

    kind: str
    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ShapeMismatch(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ShapeMismatch(f"unknown activation {self.activation!r}")
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ShapeMismatch(f"widths must be positive, got {self.widths}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind == "mlp-softmax-ce":
            if len(self.widths) < 2:
                raise ShapeMismatch("MLP needs at least input and output widths")
            if self.widths[-1] < 2:
                raise ShapeMismatch("softmax output needs at least two classes")
        elif len(self.widths) != 1:
            raise ShapeMismatch(
                f"{self.kind} takes a single input width, got {self.widths}"
            )

    @property
    def n_features(self) -> int:
        return self.widths[0]

    @property
    def n_outputs(self) -> int:
        return self.widths[-1] if self.kind == "mlp-softmax-ce" else 1

    @property
    def is_classification(self) -> bool:
        return self.kind != "linear-least-squares"

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """Per-layer (out, in) weight shapes; empty for the affine kinds."""
        if self.kind != "mlp-softmax-ce":
            return []
        return [
            (self.widths[i + 1], self.widths[i]) for i in range(len(self.widths) - 1)
        ]

    @property
    def n_params(self) -> int:
        if self.kind == "mlp-softmax-ce":
            return sum(out * inp + out for out, inp in self.layer_shapes)
        return self.n_features + 1

    def signature(self) -> str:
        """Canonical string identifying the architecture (used in checkpoints)."""
        widths = "-".join(str(w) for w in self.widths)
        return f"{self.kind}:{widths}:{self.activation}"


@dataclass(frozen=True)
class Batch:
    """A feature matrix with aligned targets (class indices or regression values)."""

    features: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray
    losses: np.ndarray
    probs: np.ndarray | None


@dataclass(frozen=True)
class BatchLinearization:
    """Per-sample first-order data for one batch at one parameter point.

    Attributes
    ----------
    losses : ndarray, shape (n,)
        Per-sample loss values.
    jacobian : ndarray, shape (n, p)
        Rows are per-sample loss gradients in flat parameter coordinates.
    logit_sqnorms : ndarray, shape (n,)
        Squared norms of the per-sample loss gradients taken in logit space.
        These are the row rescaling weights of the improved empirical Fisher.
    total_grad : ndarray, shape (p,)
        Summed loss gradient, computed by an accumulated backward pass that
        never materialises per-sample rows (so the ``jacobian.T @ 1`` identity
        is a real consistency check, not a tautology).
    probs : ndarray or None
        Predictive probabilities for classification kinds; class-1
        probabilities for the binary kind.
    logits : ndarray
        Model outputs before the loss.
    """

    losses: np.ndarray
    jacobian: np.ndarray
    logit_sqnorms: np.ndarray
    total_grad: np.ndarray
    probs: np.ndarray | None
    logits: np.ndarray

    @property
    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.jacobian, axis=1)


@dataclass(frozen=True)
class PseudoGradients:
    """Per-sample gradients under labels drawn from the model's own predictions."""

    labels: np.ndarray
    jacobian: np.ndarray


# ---------------------------------------------------------------------------
# parameter handling


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Seeded uniform initialisation with limit sqrt(6 / (fan_in + fan_out)).

    Weights are drawn layer by layer in layout order; biases start at zero.
    """
    rng = np.random.default_rng(seed)
    if spec.kind == "mlp-softmax-ce":
        chunks = []
        for out, inp in spec.layer_shapes:
            limit = np.sqrt(6.0 / (inp + out))
            chunks.append(rng.uniform(-limit, limit, size=out * inp))
            chunks.append(np.zeros(out))
        return np.concatenate(chunks)
    d = spec.n_features
    limit = np.sqrt(6.0 / (d + 1))
    return np.concatenate([[0.0], rng.uniform(-limit, limit, size=d)])


def unpack_params(spec: ModelSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat MLP parameter vector into per-layer (weight, bias) views."""
    theta = _check_theta(spec, theta)
    if spec.kind != "mlp-softmax-ce":
        raise ShapeMismatch("unpack_params applies to the MLP kind only")
    out = []
    offset = 0
    for k, m in spec.layer_shapes:
        w = theta[offset : offset + k * m].reshape(k, m)
        offset += k * m
        b = theta[offset : offset + k]
        offset += k
        out.append((w, b))
    return out


def layer_param_slices(spec: ModelSpec) -> list[tuple[slice, slice]]:
    """Flat-vector (weight, bias) slices per MLP layer, in layout order."""
    if spec.kind != "mlp-softmax-ce":
        raise ShapeMismatch("layer_param_slices applies to the MLP kind only")
    slices = []
    offset = 0
    for k, m in spec.layer_shapes:
        w = slice(offset, offset + k * m)
        offset += k * m
        b = slice(offset, offset + k)
        offset += k
        slices.append((w, b))
    return slices


def _check_theta(spec: ModelSpec, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ShapeMismatch(
            f"parameter vector has shape {theta.shape}, expected ({spec.n_params},)"
        )
    return theta


def _check_batch(spec: ModelSpec, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(batch.features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_features:
        raise ShapeMismatch(
            f"features have shape {x.shape}, expected (n, {spec.n_features})"
        )
    y = np.asarray(batch.targets)
    if y.shape != (x.shape[0],):
        raise ShapeMismatch(f"targets have shape {y.shape}, expected ({x.shape[0]},)")
    if spec.kind == "mlp-softmax-ce":
        y = y.astype(np.int64)
        if y.size and (y.min() < 0 or y.max() >= spec.widths[-1]):
            raise ShapeMismatch(
                f"class labels must lie in [0, {spec.widths[-1]}), got "
                f"[{y.min()}, {y.max()}]"
            )
    elif spec.kind == "logistic-binary":
        y = y.astype(np.int64)
        if y.size and not np.isin(y, (0, 1)).all():
            raise ShapeMismatch("binary labels must be 0 or 1")
    else:
        y = y.astype(np.float64)
    return x, y


# ---------------------------------------------------------------------------
# forward passes


def _affine_features(x: np.ndarray) -> np.ndarray:
    """Offset-first affine coordinates: prepend a ones column."""
    return np.hstack([np.ones((x.shape[0], 1)), x])


def _mlp_stack(
    spec: ModelSpec, theta: np.ndarray, x: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Run the MLP forward, returning layer inputs, hidden masks, and logits."""
    layers = unpack_params(spec, theta)
    inputs = [x]
    masks = []
    a = x
    for i, (w, b) in enumerate(layers):
        pre = a @ w.T + b
        if i < len(layers) - 1:
            if spec.activation == "relu":
                mask = pre > 0.0  # subgradient 0 at the kink
                a = np.where(mask, pre, 0.0)
            else:
                mask = np.ones_like(pre, dtype=bool)
                a = pre
            masks.append(mask)
            inputs.append(a)
        else:
            logits = pre
    return inputs, masks, logits


def forward(spec: ModelSpec, theta: np.ndarray, batch: Batch) -> ForwardResult:
    """Evaluate logits, per-sample losses, and predictive probabilities."""
    theta = _check_theta(spec, theta)
    x, y = _check_batch(spec, batch)
    if spec.kind == "mlp-softmax-ce":
        _, _, logits = _mlp_stack(spec, theta, x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        losses = log_z - shifted[np.arange(len(y)), y]
        probs = np.exp(shifted - log_z[:, None])
        return ForwardResult(logits=logits, losses=losses, probs=probs)
    z = _affine_features(x) @ theta
    if spec.kind == "linear-least-squares":
        losses = 0.5 * (z - y) ** 2
        return ForwardResult(logits=z, losses=losses, probs=None)
    p = scipy.special.expit(z)
    losses = np.logaddexp(0.0, z) - y * z
    return ForwardResult(logits=z, losses=losses, probs=p)


# ---------------------------------------------------------------------------
# backward passes


def _backward(
    spec: ModelSpec,
    theta: np.ndarray,
    inputs: list[np.ndarray],
    masks: list[np.ndarray],
    delta: np.ndarray,
    per_sample: bool,
) -> np.ndarray:
    """Backpropagate logit-space gradients through the MLP stack.

    With ``per_sample`` the result stacks one flat gradient row per sample
    (an n-by-p matrix); otherwise rows are accumulated into a single summed
    gradient using only batched matrix products.
    """
    layers = unpack_params(spec, theta)
    n = delta.shape[0]
    out: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a = inputs[i]
        if per_sample:
            w_block = np.einsum("nk,nm->nkm", delta, a).reshape(n, -1)
            out.append(delta)
            out.append(w_block)
        else:
            out.append(delta.sum(axis=0))
            out.append((delta.T @ a).ravel())
        if i > 0:
            delta = (delta @ w) * masks[i - 1]
    out.reverse()
    if per_sample:
        return np.hstack(out)
    return np.concatenate(out)


def _logit_loss_grads(
    spec: ModelSpec, result: ForwardResult, y: np.ndarray
) -> np.ndarray:
    """Per-sample loss gradients in logit space (the shared backward seed)."""
    if spec.kind == "mlp-softmax-ce":
        delta = result.probs.copy()
        delta[np.arange(len(y)), y] -= 1.0
        return delta
    if spec.kind == "linear-least-squares":
        return result.logits - y
    return result.probs - y


def batch_linearize(spec: ModelSpec, theta: np.ndarray, batch: Batch) -> BatchLinearization:
    """Compute losses, the per-sample gradient Jacobian, logit-space squared
    gradient norms, and the summed gradient for one batch.

    The summed gradient comes from an accumulated backward pass rather than a
    row sum, so agreement between ``total_grad`` and ``jacobian.T @ ones`` is
    a meaningful invariant.
    """
    theta = _check_theta(spec, theta)
    x, y = _check_batch(spec, batch)
    result = forward(spec, theta, batch)
    delta = _logit_loss_grads(spec, result, y)
    if spec.kind == "mlp-softmax-ce":
        inputs, masks, _ = _mlp_stack(spec, theta, x)
        jacobian = _backward(spec, theta, inputs, masks, delta, per_sample=True)
        total = _backward(spec, theta, inputs, masks, delta, per_sample=False)
        sq = (delta**2).sum(axis=1)
    else:
        feats = _affine_features(x)
        jacobian = delta[:, None] * feats
        total = feats.T @ delta
        sq = delta**2
    return BatchLinearization(
        losses=result.losses,
        jacobian=jacobian,
        logit_sqnorms=sq,
        total_grad=total,
        probs=result.probs,
        logits=result.logits,
    )


def affine_feature_rows(spec: ModelSpec, batch: Batch) -> np.ndarray:
    """Offset-first feature rows of the affine kinds (their logit gradients).

    Row ``n`` is the gradient of the scalar output with respect to the flat
    parameters, which for an affine predictor is just ``(1, x_n)``.
    """
    if spec.kind == "mlp-softmax-ce":
        raise ShapeMismatch("affine feature rows exist for the affine kinds only")
    x, _ = _check_batch(spec, batch)
    return _affine_features(x)


def relabelled_jacobian(
    spec: ModelSpec, theta: np.ndarray, batch: Batch, labels: np.ndarray
) -> np.ndarray:
    """Per-sample loss-gradient rows computed as if ``labels`` were the targets.

    Classification kinds only.  This is the building block for both the
    sampled-Fisher update and the class-summed exact Fisher.
    """
    if not spec.is_classification:
        raise ShapeMismatch("relabelled gradients need a classification model")
    swapped = Batch(features=batch.features, targets=np.asarray(labels))
    return batch_linearize(spec, theta, swapped).jacobian


def sample_pseudo_gradients(
    spec: ModelSpec, theta: np.ndarray, batch: Batch, seed: int
) -> PseudoGradients:
    """Draw one label per sample from the model's predictive distribution and
    return the gradient rows under those labels.

    Sampling uses an inverse-CDF draw against the cumulative predictive
    probabilities, so results are reproducible from the seed alone.
    """
    if not spec.is_classification:
        raise ShapeMismatch("pseudo-gradient sampling needs a classification model")
    theta = _check_theta(spec, theta)
    _check_batch(spec, batch)
    result = forward(spec, theta, batch)
    rng = np.random.default_rng(seed)
    u = rng.random(len(batch))
    if spec.kind == "mlp-softmax-ce":
        cum = np.cumsum(result.probs, axis=1)
        labels = (u[:, None] > cum).sum(axis=1)
        labels = np.minimum(labels, spec.widths[-1] - 1)
    else:
        labels = (u < result.probs).astype(np.int64)
    return PseudoGradients(
        labels=labels,
        jacobian=relabelled_jacobian(spec, theta, batch, labels),
    )


def fisher_vector_product(
    spec: ModelSpec, theta: np.ndarray, batch: Batch, v: np.ndarray
) -> np.ndarray:
    """Multiply the exact batch Fisher by a vector without forming the matrix.

    The product runs a forward-mode sweep to get logit-space tangents, scales
    them by the loss Hessian in logit space (``diag(p) - p p^T`` for softmax,
    ``p (1 - p)`` for the binary kind, identity for least squares), and pulls
    the result back with a reverse sweep.  For the loss families here this
    Gauss-Newton form equals the Fisher information exactly.
    """
    theta = _check_theta(spec, theta)
    x, y = _check_batch(spec, batch)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ShapeMismatch(f"vector has shape {v.shape}, expected {theta.shape}")
    result = forward(spec, theta, batch)
    if spec.kind == "mlp-softmax-ce":
        inputs, masks, _ = _mlp_stack(spec, theta, x)
        layers = unpack_params(spec, theta)
        tangents = unpack_params(spec, v)
        da = np.zeros_like(x)
        for i, ((w, _), (dw, db)) in enumerate(zip(layers, tangents)):
            dpre = da @ w.T + inputs[i] @ dw.T + db
            if i < len(layers) - 1:
                da = dpre * masks[i]
        p = result.probs
        scaled = p * dpre - p * (p * dpre).sum(axis=1, keepdims=True)
        return _backward(spec, theta, inputs, masks, scaled, per_sample=False)
    feats = _affine_features(x)
    tangent = feats @ v
    if spec.kind == "linear-least-squares":
        weight = np.ones(len(batch))
    else:
        weight = result.probs * (1.0 - result.probs)
    return feats.T @ (weight * tangent)


def layer_backprop_terms(
    spec: ModelSpec,
    theta: np.ndarray,
    batch: Batch,
    labels: np.ndarray | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer (input activations, per-sample pre-activation gradients).

    These are the two factors whose outer product gives each layer's slice of
    a per-sample gradient; Kronecker-factored curvature builds directly on
    them.  Passing ``labels`` overrides the batch targets (used for sampled
    variants).  MLP only.
    """
    if spec.kind != "mlp-softmax-ce":
        raise ShapeMismatch("layer terms apply to the MLP kind only")
    theta = _check_theta(spec, theta)
    x, y = _check_batch(spec, batch)
    if labels is not None:
        y = np.asarray(labels, dtype=np.int64)
        _check_batch(spec, Batch(features=batch.features, targets=y))
    result = forward(spec, theta, Batch(features=batch.features, targets=y))
    delta = _logit_loss_grads(spec, result, y)
    inputs, masks, _ = _mlp_stack(spec, theta, x)
    layers = unpack_params(spec, theta)
    deltas = [np.empty(0)] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        deltas[i] = delta
        if i > 0:
            delta = (delta @ layers[i][0]) * masks[i - 1]
    return [(inputs[i], deltas[i]) for i in range(len(layers))]


# ---------------------------------------------------------------------------
# toy problems


def lls_toy() -> tuple[ModelSpec, Batch]:
    """Two-sample affine least-squares toy: targets zero at x = 0 and x = 1.

    Both per-sample optima are lines in the two-dimensional parameter plane
    (offset axis and offset-plus-slope axis), which makes every update rule's
    behaviour visible as a vector field.
    """
    spec = ModelSpec(kind="linear-least-squares", widths=(1,))
    batch = Batch(
        features=np.array([[0.0], [1.0]]),
        targets=np.array([0.0, 0.0]),
    )
    return spec, batch


def logistic_toy() -> tuple[ModelSpec, Batch]:
    """Two-sample logistic toy: class 0 at x = 0, class 1 at x = 2.

    Separable, so the loss has no finite minimiser and the interesting
    behaviour is how fast each update rule escapes toward the separating
    ray.
    """
    spec = ModelSpec(kind="logistic-binary", widths=(1,))
    batch = Batch(
        features=np.array([[0.0], [2.0]]),
        targets=np.array([0, 1]),
    )
    return spec, batch
