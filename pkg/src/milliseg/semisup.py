"""Two-stage training on pseudo-labels with a lagging-teacher second stage.

Stage one fits a small pointwise classifier to the pseudo-labeled frames with
a cross-entropy plus Lovász-softmax objective. Stage two initializes a
teacher and a student from the stage-one weights and keeps training the
student with the same supervised terms plus a tempered KL term that pulls the
student toward the teacher on every point, labeled or not; the teacher
trails the student as an exponential moving average after every step.

Everything here is plain numpy with hand-written gradients; the classifier
is a stand-in for whatever segmentation backbone produced the features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import FORMAT_VERSION, UNLABELED
from .errors import (
    AllUnlabeledError,
    DegenerateError,
    IOFailureError,
    LengthMismatchError,
    MalformedFileError,
    NoLabeledDataError,
    NonFiniteLossError,
)

MODEL_MAGIC = b"MLNM"

_PROB_FLOOR = 1e-12


@dataclass
class SemiSupConfig:
    """Loss weights and trainer knobs.

    ``lambda_kl`` left as None resolves to 0.5 * T^2, the preset that keeps
    the tempered-KL gradient magnitude roughly temperature-independent.
    ``jitter`` is the std of Gaussian noise added to the student's input in
    stage two so the teacher and student see slightly different views; 0
    makes both views identical.
    """

    lambda_ce: float = 0.5
    lambda_lovasz: float = 1.0
    temperature: float = 4.0
    lambda_kl: float | None = None
    beta: float = 0.99
    epochs: int = 30
    lr: float = 0.1
    batch: int = 256
    jitter: float = 0.0

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_lovasz < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_kl is not None and self.lambda_kl < 0:
            raise ValueError("lambda_kl must be non-negative")
        if self.temperature <= 1.0:
            raise ValueError(f"temperature must be > 1, got {self.temperature}")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")

    @property
    def kl_weight(self) -> float:
        if self.lambda_kl is not None:
            return self.lambda_kl
        return 0.5 * self.temperature**2


# -- probability pieces ----------------------------------------------------------

def log_softmax_t(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_t(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Tempered softmax, max-shifted for stability; rows sum to 1."""
    if temperature < 1.0:
        raise ValueError(f"temperature must be >= 1, got {temperature}")
    return np.exp(log_softmax_t(logits, temperature))


def cross_entropy(p: np.ndarray, y: int) -> float:
    """-log p_y with the probability floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    return float(-np.log(max(float(p[int(y)]), _PROB_FLOOR)))


def _mean_cross_entropy(probs: np.ndarray, y: np.ndarray) -> float:
    picked = np.maximum(probs[np.arange(len(y)), y], _PROB_FLOOR)
    return float(-np.log(picked).mean())


def lovasz_softmax(probs: np.ndarray, y: np.ndarray) -> float:
    loss, _ = lovasz_softmax_with_grad(probs, y)
    return loss


def lovasz_softmax_with_grad(
    probs: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Smooth Jaccard surrogate, averaged over the classes present in ``y``.

    Per class, the prediction errors (1-p on the class, p off it) are sorted
    descending and dotted with the discrete gradient of the Jaccard index
    along that order. The returned gradient treats the sort permutation as
    constant, the usual subgradient choice.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != y.shape[0]:
        raise LengthMismatchError(
            f"probs {probs.shape} incompatible with labels {y.shape}"
        )
    present = np.unique(y)
    if present.size == 0:
        raise DegenerateError("no labels present")

    m = probs.shape[0]
    total = 0.0
    dprobs = np.zeros_like(probs)
    for c in present:
        fg = (y == c).astype(np.float64)
        sign = 1.0 - 2.0 * fg                     # -1 on the class, +1 off it
        errors = np.where(fg > 0.5, 1.0 - probs[:, c], probs[:, c])
        order = np.argsort(-errors, kind="stable")
        f_sorted = fg[order]
        gts = f_sorted.sum()
        intersection = gts - np.cumsum(f_sorted)
        union = gts + np.cumsum(1.0 - f_sorted)
        jaccard = 1.0 - intersection / union
        grad = jaccard.copy()
        grad[1:] -= jaccard[:-1]
        total += float(errors[order] @ grad)
        unsorted = np.empty(m)
        unsorted[order] = grad
        dprobs[:, c] += sign * unsorted
    k = present.size
    return total / k, dprobs / k


def kl_distill(
    student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float
) -> float:
    loss, _ = kl_distill_with_grad(student_logits, teacher_logits, temperature)
    return loss


def kl_distill_with_grad(
    student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float
) -> tuple[float, np.ndarray]:
    """Mean KL(teacher || student) of the tempered distributions.

    Gradient is with respect to the student logits: (p_s - p_t) / (T * M).
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise LengthMismatchError(f"logit shapes differ: {s.shape} vs {t.shape}")
    if s.ndim == 1:
        s = s[None, :]
        t = t[None, :]
    log_ps = log_softmax_t(s, temperature)
    log_pt = log_softmax_t(t, temperature)
    pt = np.exp(log_pt)
    m = s.shape[0]
    loss = float((pt * (log_pt - log_ps)).sum() / m)
    grad = (np.exp(log_ps) - pt) / (temperature * m)
    return max(loss, 0.0), grad


# -- composite losses ----------------------------------------------------------

def supervised_loss(probs: np.ndarray, y: np.ndarray, cfg: SemiSupConfig) -> float:
    """lambda_ce * mean CE + lambda_lovasz * Lovász over the labeled points."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    labeled = y != UNLABELED
    if not labeled.any():
        raise AllUnlabeledError("supervised loss needs at least one labeled point")
    p = probs[labeled]
    yl = y[labeled]
    loss = 0.0
    if cfg.lambda_ce > 0:
        loss += cfg.lambda_ce * _mean_cross_entropy(p, yl)
    if cfg.lambda_lovasz > 0:
        loss += cfg.lambda_lovasz * lovasz_softmax(p, yl)
    return loss


def _supervised_grad(
    logits: np.ndarray, y: np.ndarray, cfg: SemiSupConfig
) -> tuple[float, np.ndarray]:
    """Supervised loss and its gradient w.r.t. the logits of labeled rows."""
    y = np.asarray(y, dtype=np.int64)
    labeled = y != UNLABELED
    dlogits = np.zeros_like(logits)
    if not labeled.any():
        return 0.0, dlogits
    ll = logits[labeled]
    yl = y[labeled]
    p = softmax_t(ll, 1.0)
    ml = ll.shape[0]
    loss = 0.0
    dl = np.zeros_like(ll)
    if cfg.lambda_ce > 0:
        loss += cfg.lambda_ce * _mean_cross_entropy(p, yl)
        ce_grad = p.copy()
        ce_grad[np.arange(ml), yl] -= 1.0
        dl += cfg.lambda_ce * ce_grad / ml
    if cfg.lambda_lovasz > 0:
        lov, dprobs = lovasz_softmax_with_grad(p, yl)
        loss += cfg.lambda_lovasz * lov
        inner = (dprobs * p).sum(axis=1, keepdims=True)
        dl += cfg.lambda_lovasz * p * (dprobs - inner)
    dlogits[labeled] = dl
    return loss, dlogits


def combined_loss(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    y: np.ndarray,
    cfg: SemiSupConfig,
) -> float:
    loss, _ = combined_loss_with_grad(student_logits, teacher_logits, y, cfg)
    return loss


def combined_loss_with_grad(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    y: np.ndarray,
    cfg: SemiSupConfig,
) -> tuple[float, np.ndarray]:
    """Supervised terms on labeled points plus the KL term on every point.

    A batch with no labeled points is legal: only the KL term remains.
    """
    loss, dlogits = _supervised_grad(student_logits, y, cfg)
    kl_w = cfg.kl_weight
    if kl_w > 0:
        kl, dkl = kl_distill_with_grad(student_logits, teacher_logits, cfg.temperature)
        loss += kl_w * kl
        dlogits = dlogits + kl_w * dkl
    return loss, dlogits


def ema_update(theta_t: np.ndarray, theta_s: np.ndarray, beta: float) -> np.ndarray:
    """theta_t <- beta * theta_t + (1 - beta) * theta_s, elementwise."""
    theta_t = np.asarray(theta_t, dtype=np.float64)
    theta_s = np.asarray(theta_s, dtype=np.float64)
    if theta_t.shape != theta_s.shape:
        raise LengthMismatchError(
            f"parameter shapes differ: {theta_t.shape} vs {theta_s.shape}"
        )
    return beta * theta_t + (1.0 - beta) * theta_s


# -- the pointwise classifier ----------------------------------------------------

class PointwiseClassifier:
    """Fully-connected tanh net mapping a feature row to class logits.

    Parameters live in one flat float64 vector so the EMA update and the
    optimizer stay trivial; layout is (W, b) per layer in order.
    """

    def __init__(self, layer_sizes: tuple[int, ...] | list[int]):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        self.layer_sizes = sizes
        self._shapes = [
            (sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)
        ]

    @property
    def num_params(self) -> int:
        return sum(o * i + o for o, i in self._shapes)

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        for out, inp in self._shapes:
            parts.append(rng.standard_normal(out * inp) * np.sqrt(1.0 / inp))
            parts.append(np.zeros(out))
        return np.concatenate(parts)

    def _unpack(self, params: np.ndarray):
        layers = []
        off = 0
        for out, inp in self._shapes:
            w = params[off:off + out * inp].reshape(out, inp)
            off += out * inp
            b = params[off:off + out]
            off += out
            layers.append((w, b))
        return layers

    def forward(self, x: np.ndarray, params: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        layers = self._unpack(params)
        h = x
        for w, b in layers[:-1]:
            h = np.tanh(h @ w.T + b)
        w, b = layers[-1]
        return h @ w.T + b

    def forward_cache(self, x: np.ndarray, params: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        layers = self._unpack(params)
        acts = [x]
        h = x
        for w, b in layers[:-1]:
            h = np.tanh(h @ w.T + b)
            acts.append(h)
        w, b = layers[-1]
        return h @ w.T + b, acts

    def backward(
        self, params: np.ndarray, acts: list[np.ndarray], dlogits: np.ndarray
    ) -> np.ndarray:
        layers = self._unpack(params)
        grads = [None] * len(layers)
        delta = dlogits
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            grads[li] = (delta.T @ acts[li], delta.sum(axis=0))
            if li > 0:
                delta = (delta @ w) * (1.0 - acts[li] ** 2)
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


# -- training --------------------------------------------------------------------

@dataclass
class TrainResult:
    params: np.ndarray               # final student
    stage1_params: np.ndarray
    trace: list[dict] = field(default_factory=list)


def _predict_miou(model, params, x, y, num_classes) -> float:
    from .annotate import miou

    pred = np.argmax(model.forward(x, params), axis=1)
    return miou(pred, y, num_classes)


def _check_finite(loss: float) -> None:
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"loss diverged to {loss}")


def train_two_stage(
    labeled: list[tuple[np.ndarray, np.ndarray]],
    unlabeled: list[np.ndarray],
    model: PointwiseClassifier,
    cfg: SemiSupConfig,
    seed: int,
    val: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainResult:
    """Run both training stages and return the student plus the metric trace.

    ``labeled`` holds (features, labels) pairs per frame, labels carrying the
    UNLABELED sentinel where propagation left gaps; ``unlabeled`` holds bare
    feature matrices. ``val``, when given, adds a validation mIoU column to
    the per-epoch trace.
    """
    lab_x = [np.asarray(f, dtype=np.float64) for f, _ in labeled]
    lab_y = [np.asarray(l, dtype=np.int64) for _, l in labeled]
    if lab_x:
        x_lab = np.vstack(lab_x)
        y_lab = np.concatenate(lab_y)
        keep = y_lab != UNLABELED
        x_lab = x_lab[keep]
        y_lab = y_lab[keep]
    else:
        x_lab = np.zeros((0, model.layer_sizes[0]))
        y_lab = np.zeros(0, dtype=np.int64)
    if x_lab.shape[0] == 0:
        raise NoLabeledDataError("no labeled points to train on")

    rng = np.random.default_rng(seed)
    params = model.init_params(rng)
    trace: list[dict] = []

    def epoch_row(stage, epoch, losses, current):
        row = {
            "stage": stage,
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_miou": _predict_miou(model, current, x_lab, y_lab, model.num_classes),
        }
        if val is not None:
            row["val_miou"] = _predict_miou(
                model, current, val[0], val[1], model.num_classes
            )
        return row

    # Stage one: supervised only, pseudo-labeled points.
    n = x_lab.shape[0]
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch):
            idx = perm[start:start + cfg.batch]
            logits, acts = model.forward_cache(x_lab[idx], params)
            loss, dlogits = _supervised_grad(logits, y_lab[idx], cfg)
            _check_finite(loss)
            params = params - cfg.lr * model.backward(params, acts, dlogits)
            losses.append(loss)
        trace.append(epoch_row(1, epoch, losses, params))

    stage1_params = params.copy()

    # Stage two: teacher-student over labeled plus unlabeled points.
    unl = [np.asarray(u, dtype=np.float64) for u in unlabeled]
    x_all = np.vstack([x_lab] + unl) if unl else x_lab
    y_all = np.concatenate(
        [y_lab, np.full(x_all.shape[0] - x_lab.shape[0], UNLABELED, dtype=np.int64)]
    )

    teacher = params.copy()
    student = params.copy()
    n_all = x_all.shape[0]
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_all)
        losses = []
        for start in range(0, n_all, cfg.batch):
            idx = perm[start:start + cfg.batch]
            xb = x_all[idx]
            xs = xb + cfg.jitter * rng.standard_normal(xb.shape) if cfg.jitter > 0 else xb
            s_logits, acts = model.forward_cache(xs, student)
            t_logits = model.forward(xb, teacher)
            loss, dlogits = combined_loss_with_grad(s_logits, t_logits, y_all[idx], cfg)
            _check_finite(loss)
            student = student - cfg.lr * model.backward(student, acts, dlogits)
            teacher = ema_update(teacher, student, cfg.beta)
            losses.append(loss)
        trace.append(epoch_row(2, epoch, losses, student))

    return TrainResult(params=student, stage1_params=stage1_params, trace=trace)


# -- model files --------------------------------------------------------------------

def save_model(model: PointwiseClassifier, params: np.ndarray, path: str | Path) -> None:
    sizes = model.layer_sizes
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", MODEL_MAGIC, FORMAT_VERSION, len(sizes)))
            fh.write(np.asarray(sizes, dtype="<u4").tobytes())
            fh.write(np.asarray(params, dtype="<f4").tobytes())
    except OSError as exc:
        raise IOFailureError(f"cannot write {path}: {exc}") from exc


def load_model(path: str | Path) -> tuple[PointwiseClassifier, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailureError(f"cannot read {path}: {exc}") from exc
    head = struct.Struct("<4sII")
    if len(raw) < head.size:
        raise MalformedFileError(f"{path}: truncated header")
    magic, version, n_sizes = head.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise MalformedFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedFileError(f"{path}: unsupported version {version}")
    sizes = np.frombuffer(raw, dtype="<u4", count=n_sizes, offset=head.size)
    model = PointwiseClassifier(tuple(int(s) for s in sizes))
    off = head.size + 4 * n_sizes
    expected = off + 4 * model.num_params
    if len(raw) != expected:
        raise MalformedFileError(f"{path}: {len(raw)} bytes, layout requires {expected}")
    params = np.frombuffer(raw, dtype="<f4", offset=off).astype(np.float64)
    return model, params
