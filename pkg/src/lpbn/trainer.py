"""SGD with Nesterov momentum and the experiment procedures built on it."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import quantizers as qz
from .data import Dataset
from .normcore import RunningStats
from .netgraph import (
    GRAD_MODES,
    Graph,
    NodeKind,
    backward,
    build_fc_stack,
    forward,
    load_checkpoint,
)
from .tensorcore import NonFiniteError, make_rng


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"loss became non-finite in epoch {epoch} (step {step})")
        self.epoch, self.step = epoch, step


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 100
    epochs: int = 20
    scheme: str | None = None
    grad_mode: str = "float"
    seed: int = 0
    lr_schedule: tuple = ()  # ((epoch, multiplier), ...): multiplier applies from that epoch on
    population_stats: bool = True  # re-estimate Norm statistics over the training set before each evaluation

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        if self.scheme in ("", "fp32", "none", "None"):
            self.scheme = None
        if self.scheme is not None:
            self.scheme = qz.get_scheme(self.scheme).id
        self.lr_schedule = tuple((int(e), float(m)) for e, m in self.lr_schedule)

    def lr_at(self, epoch: int) -> float:
        mult = 1.0
        for start, m in sorted(self.lr_schedule):
            if epoch >= start:
                mult = m
        return self.learning_rate * mult

    def to_kv(self) -> str:
        """Flat key=value text, one setting per line."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "lr_schedule":
                v = ",".join(f"{e}:{m!r}" for e, m in v)
            elif v is None:
                v = "fp32"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str, **overrides) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = val
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**{k: _parse_field(k, v) for k, v in values.items()})


def _parse_field(key: str, val):
    if not isinstance(val, str):
        return val
    if key == "population_stats":
        return val.lower() in ("1", "true", "yes", "on")
    if key in ("batch_size", "epochs", "seed"):
        return int(val)
    if key in ("learning_rate", "momentum", "weight_decay"):
        return float(val)
    if key == "lr_schedule":
        return tuple(tuple(p.split(":")) for p in val.split(",") if p.strip())
    return val


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_nesterov_step(params: dict, grads: dict, velocity: dict, cfg: TrainConfig, lr: float | None = None, decay: dict | None = None):
    """One in-place Nesterov step over matching dicts of arrays.

    v <- mu*v - lr*(g + wd*p);  p <- p + mu*v - lr*(g + wd*p).
    ``decay`` maps keys to whether weight decay applies (default: everywhere).
    """
    lr = cfg.learning_rate if lr is None else lr
    mu = cfg.momentum
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {key} {p.shape}")
        wd = cfg.weight_decay if decay is None or decay.get(key, True) else 0.0
        step = lr * (g + wd * p) if wd else lr * g
        v = velocity.get(key)
        v = -step if v is None else mu * v - step
        velocity[key] = v
        p += (mu * v - step).astype(p.dtype, copy=False)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, (grad / n).astype(logits.dtype)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_accuracy: float
    train_loss: float
    test_accuracy: float | None = None
    test_loss: float | None = None


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "accuracy", "loss"])
        for r in self.epochs:
            w.writerow([r.epoch, "train", f"{r.train_accuracy:.6f}", f"{r.train_loss:.6f}"])
            if r.test_accuracy is not None:
                w.writerow([r.epoch, "test", f"{r.test_accuracy:.6f}", f"{r.test_loss:.6f}"])
        return buf.getvalue()


def evaluate(g: Graph, data: Dataset, batch_size: int = 1000) -> tuple[float, float]:
    """(accuracy, mean loss) in eval mode."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct, loss_sum = 0, 0.0
    for start in range(0, len(data), batch_size):
        xb, yb = data.x[start : start + batch_size], data.y[start : start + batch_size]
        logits, _ = forward(g, xb, "eval")
        loss, _ = softmax_cross_entropy(logits, yb)
        loss_sum += loss * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / len(data), loss_sum / len(data)


def estimate_population_stats(g: Graph, data: Dataset, batch_size: int):
    """Replace running statistics by the average of batch statistics over one
    fixed-order pass of ``data`` with the current parameters."""
    norms = g.norm_nodes()
    saved = [n.running for n in norms]
    for n in norms:
        n.running = RunningStats(momentum=None)
    try:
        for start in range(0, len(data) - 1, batch_size):
            xb = data.x[start : start + batch_size]
            if len(xb) >= 2:
                forward(g, xb, "train", record=False)
    except Exception:
        for n, r in zip(norms, saved):
            n.running = r
        raise
    for n, r in zip(norms, saved):
        n.running.momentum, n.running.count = r.momentum if r else 0.1, 0


def _param_views(g: Graph):
    params, decay = {}, {}
    for node in g:
        for pname, value in node.params.items():
            key = (node.name, pname)
            params[key] = value
            decay[key] = node.kind != NodeKind.AFFINE
    return params, decay


def train(g: Graph, data: Dataset, cfg: TrainConfig, test: Dataset | None = None, on_epoch=None) -> History:
    """Minibatch training with per-epoch shuffling; returns per-epoch accuracy and loss.

    Learnt layers without parameters are initialized from ``cfg.seed``.  Weight
    decay skips the affine (a, b) parameters.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if any(not n.params for n in g.learnt_nodes() if n.kind != NodeKind.IDENTITY):
        g.init_params(cfg.seed)
    rng = make_rng(cfg.seed + 1)
    params, decay = _param_views(g)
    velocity: dict = {}
    history = History()
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need two samples
            try:
                logits, tape = forward(g, data.x[idx], "train")
                loss, grad = softmax_cross_entropy(logits, data.y[idx])
                if not np.isfinite(loss):
                    raise TrainingDiverged(epoch, step)
                result = backward(g, tape, grad, cfg.grad_mode)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, step) from exc
            grads = {(n, p): gv for n, d in result.params.items() for p, gv in d.items()}
            sgd_nesterov_step(params, grads, velocity, cfg, lr, decay)
            g.bump()
            step += 1
        try:
            if cfg.population_stats:
                estimate_population_stats(g, data, cfg.batch_size)
            tr_acc, tr_loss = evaluate(g, data)
        except NonFiniteError as exc:
            raise TrainingDiverged(epoch, step) from exc
        if not np.isfinite(tr_loss):
            raise TrainingDiverged(epoch, step)
        rec = EpochRecord(epoch, tr_acc, tr_loss)
        if test is not None and len(test):
            rec.test_accuracy, rec.test_loss = evaluate(g, test)
        history.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    width_exponent: int
    scheme: str
    train_accuracy: float
    test_accuracy: float
    baseline_train_accuracy: float
    baseline_test_accuracy: float

    @property
    def delta_train_pp(self) -> float:
        return 100.0 * (self.train_accuracy - self.baseline_train_accuracy)

    @property
    def delta_test_pp(self) -> float:
        return 100.0 * (self.test_accuracy - self.baseline_test_accuracy)


def _fit_fc(n: int, scheme, cfg: TrainConfig, data: Dataset, test: Dataset) -> EpochRecord:
    g = build_fc_stack(n, scheme, input_dim=int(np.prod(data.x.shape[1:])), classes=max(data.num_classes, 2))
    g.init_params(cfg.seed)
    return train(g, data, cfg, test).final


def quantsweep(widths, schemes, cfg: TrainConfig, data: Dataset, test: Dataset) -> list[SweepRow]:
    """Accuracy deltas of each scheme against the fp32 network of the same width and seed."""
    rows = []
    for n in widths:
        base = _fit_fc(n, None, cfg, data, test)
        for s in schemes:
            sid = None if s in (None, "fp32") else qz.get_scheme(s).id
            rec = base if sid is None else _fit_fc(n, sid, cfg, data, test)
            rows.append(SweepRow(n, sid or "fp32", rec.train_accuracy, rec.test_accuracy, base.train_accuracy, base.test_accuracy))
    return rows


def sweep_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "width", "scheme", "train_acc", "test_acc", "baseline_train_acc", "baseline_test_acc", "delta_train_pp", "delta_test_pp"])
    for r in rows:
        w.writerow([r.width_exponent, 2**r.width_exponent, r.scheme, f"{r.train_accuracy:.6f}", f"{r.test_accuracy:.6f}",
                    f"{r.baseline_train_accuracy:.6f}", f"{r.baseline_test_accuracy:.6f}",
                    f"{r.delta_train_pp:.4f}", f"{r.delta_test_pp:.4f}"])
    return buf.getvalue()


@dataclass
class RetrofitReport:
    scheme: str
    policy: str
    quantized_nodes: list[str]
    baseline_error: float
    raw_error: float
    fine_tuned_error: float | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scheme", "policy", "quantized_nodes", "baseline_error", "raw_error", "fine_tuned_error"])
        ft = "" if self.fine_tuned_error is None else f"{self.fine_tuned_error:.6f}"
        w.writerow([self.scheme, self.policy, " ".join(self.quantized_nodes), f"{self.baseline_error:.6f}", f"{self.raw_error:.6f}", ft])
        return buf.getvalue()


def select_norms(g: Graph, policy: str, subset=None) -> list[str]:
    norms = [n.name for n in g.norm_nodes()]
    if policy == "all":
        return norms
    if policy == "all_but_first":
        return norms[1:]
    if policy == "subset":
        if not subset:
            raise ValueError("policy 'subset' needs a list of norm indices")
        bad = [i for i in subset if not 0 <= i < len(norms)]
        if bad:
            raise ValueError(f"norm indices {bad} out of range 0..{len(norms) - 1}")
        return [norms[i] for i in subset]
    raise ValueError(f"unknown policy {policy!r}")


def retrofit(checkpoint, scheme, policy: str, test: Dataset, fine_tune_cfg: TrainConfig | None = None, data: Dataset | None = None, subset=None) -> RetrofitReport:
    """Swap quantized storage into a trained network's Norm nodes; optionally fine-tune."""
    g = checkpoint if isinstance(checkpoint, Graph) else load_checkpoint(checkpoint)
    baseline = 1.0 - evaluate(g, test)[0]
    chosen = select_norms(g, policy, subset)
    sid = None if scheme in (None, "fp32") else qz.get_scheme(scheme).id
    g.set_scheme(sid, chosen)
    raw = 1.0 - evaluate(g, test)[0]
    report = RetrofitReport(sid or "fp32", policy, chosen, baseline, raw)
    if fine_tune_cfg is not None:
        if data is None:
            raise ValueError("fine-tuning needs training data")
        train(g, data, fine_tune_cfg)
        report.fine_tuned_error = 1.0 - evaluate(g, test)[0]
    return report


def manifest(cfg: TrainConfig, **extra) -> str:
    lines = ["# lpbn run manifest", cfg.to_kv().rstrip("\n")]
    lines += [f"{k}={v}" for k, v in extra.items()]
    return "\n".join(lines) + "\n"


__all__ = [
    "EpochRecord",
    "History",
    "RetrofitReport",
    "SweepRow",
    "TrainConfig",
    "TrainingDiverged",
    "asdict",
    "estimate_population_stats",
    "evaluate",
    "manifest",
    "quantsweep",
    "retrofit",
    "select_norms",
    "sgd_nesterov_step",
    "softmax_cross_entropy",
    "sweep_to_csv",
    "train",
]
