"""Optimiser, schedule, gradient checker, synthetic tasks and the training loop."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .adapters import ClassEmbeddings, InjectionTarget, context_inject, contrastive_predict
from .network import SEN, first_pass
from .tensor import NumericError, Tensor


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    base_lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    schedule: str = "cosine"
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list, **kwargs) -> "OptimizerState":
        for p in params:
            if not p.requires_grad:
                raise ValueError(f"refusing optimiser state for frozen tensor {p.name or p.shape}")
        state = cls(**kwargs)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def cosine_lr(step: int, base_lr: float, total_steps: int) -> float:
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(params: list, grads: list, state: OptimizerState) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state are misaligned")
    for p, g in zip(params, grads):
        if g is None:
            raise ValueError(f"missing gradient for parameter {p.name or p.shape}")
    if state.schedule == "cosine":
        lr = cosine_lr(min(state.step, state.total_steps), state.base_lr, state.total_steps)
    else:
        lr = state.base_lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t


# ---------------------------------------------------------------- gradient check


def grad_check_report(model_fn: Callable[[], Tensor], params: list, eps: float = 1e-5,
                      max_full: int = 10_000, subsample: int = 256, seed: int = 0) -> tuple:
    """Central-difference check of every entry of ``params``.

    Returns ``(max_rel_err, n_checked)`` with relative error
    ``|analytic - fd| / (|fd| + 1e-8)``. Above ``max_full`` entries a seeded
    subsample of ``subsample`` entries is checked.
    """
    for p in params:
        if not p.requires_grad:
            raise ValueError("grad_check only sweeps trainable tensors")
        if p.data.dtype != np.float64:
            raise TypeError("grad_check needs 64-bit parameters")
        p.grad = None
    loss = model_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss")
    T.backward(loss)
    entries = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if len(entries) > max_full:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(entries), size=subsample, replace=False)
        entries = [entries[k] for k in sorted(pick)]
    worst = 0.0
    with T.no_grad():
        for i, j in entries:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            up = model_fn().item()
            flat[j] = orig - eps
            down = model_fn().item()
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError("non-finite loss during finite differences")
            fd = (up - down) / (2.0 * eps)
            grad = params[i].grad
            analytic = 0.0 if grad is None else grad.reshape(-1)[j]
            worst = max(worst, abs(analytic - fd) / (abs(fd) + 1e-8))
    return worst, len(entries)


def grad_check(model_fn: Callable[[], Tensor], params: list, eps: float = 1e-5) -> float:
    return grad_check_report(model_fn, params, eps)[0]


# ---------------------------------------------------------------- synthetic tasks


@dataclass
class Split:
    inputs: list                      # M arrays [N, n, d_in]
    targets: np.ndarray
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class SyntheticTask:
    kind: str
    n_modalities: int
    sigma: float
    seed: int
    train: Split
    test: Split
    info: dict = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256()
        for split in (self.train, self.test):
            for x in split.inputs:
                h.update(np.ascontiguousarray(x).tobytes())
            h.update(np.ascontiguousarray(split.targets).tobytes())
        return h.hexdigest()

    def restrict(self, n_modalities: int) -> "SyntheticTask":
        """View with only the first ``n_modalities`` inputs (labels unchanged)."""
        def cut(s):
            return Split(s.inputs[:n_modalities], s.targets, s.extras)
        return SyntheticTask(self.kind, n_modalities, self.sigma, self.seed,
                             cut(self.train), cut(self.test), self.info)


def _orthonormal(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    """``k`` orthonormal rows in ``R^n``."""
    q, _ = np.linalg.qr(rng.normal(size=(n, k)))
    return q.T


def _bit_tokens(bits: np.ndarray, patterns: list, n: int, sigma: float,
                rng: np.random.Generator) -> list:
    out = []
    for m, pat in enumerate(patterns):
        base = pat[bits[:, m]]                                  # [N, d_in]
        tok = np.repeat(base[:, None, :], n, axis=1)
        if sigma:
            tok = tok + sigma * rng.normal(size=tok.shape)
        out.append(tok)
    return out


def gen_parity_task(M: int, d_in: int, n: int, sigma: float, N_samples: int, seed: int,
                    pattern_seed: int = 1234) -> Split:
    """Per-sample bits b_1..b_M, modality m's tokens show pattern ``b_m`` plus noise;
    the label is the parity of all M bits."""
    if M < 2:
        raise ValueError("parity task needs M >= 2")
    if d_in < 2:
        raise ValueError("parity task needs d_in >= 2 for two orthogonal patterns")
    prng = np.random.default_rng(pattern_seed)
    patterns = [_orthonormal(prng, d_in, 2) for _ in range(M)]
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(N_samples, M))
    labels = bits.sum(axis=1) % 2
    inputs = _bit_tokens(bits, patterns, n, sigma, rng)
    return Split(inputs, labels, {"bits": bits})


def gen_contrastive_task(C: int, d: int, sigma: float, N: int, seed: int, M: int = 2,
                         n: int = 8, d_in: Optional[int] = None, pattern_seed: int = 1234) -> Split:
    """Orthonormal class embeddings; per sample a video and an audio feature equal
    to its class embedding plus noise, and token sequences for ``M`` modalities
    carrying the class through fixed per-modality maps."""
    if C > d:
        raise ValueError(f"cannot draw {C} orthonormal classes in {d} dimensions")
    d_in = d if d_in is None else d_in
    prng = np.random.default_rng(pattern_seed)
    classes = _orthonormal(prng, d, C)
    maps = [prng.normal(0.0, 1.0 / math.sqrt(d), (d, d_in)) for _ in range(M)]
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, C, size=N)
    emb = classes[labels]
    video = emb + sigma * rng.normal(size=emb.shape)
    audio = emb + sigma * rng.normal(size=emb.shape)
    inputs = []
    for mp in maps:
        tok = np.repeat((emb @ mp)[:, None, :], n, axis=1)
        inputs.append(tok + sigma * rng.normal(size=tok.shape))
    return Split(inputs, labels, {"video": video, "audio": audio, "classes": classes})


def gen_injection_task(d: int, target_shape, sigma: float, N: int, seed: int, M: int = 3,
                       n: int = 8, d_in: int = 8, pattern_seed: int = 1234) -> Split:
    """Regression target ``base + s * resize(a)``: ``s = ±1`` is the parity sign of the
    per-modality bits, so it is recoverable only from all modalities together;
    ``a`` is a fixed vector in the shared space, hence MSE 0 is attainable."""
    target = InjectionTarget(tuple(target_shape))
    prng = np.random.default_rng(pattern_seed)
    patterns = [_orthonormal(prng, d_in, 2) for _ in range(M)]
    direction = prng.normal(size=d)
    pattern_out = context_inject(Tensor(direction), target).data
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(N, M))
    sign = 1.0 - 2.0 * (bits.sum(axis=1) % 2)
    inputs = _bit_tokens(bits, patterns, n, sigma, rng)
    base = rng.normal(size=(N,) + target.target_shape)
    targets = base + sign.reshape((N,) + (1,) * len(target.target_shape)) * pattern_out
    return Split(inputs, targets, {"base": base, "bits": bits, "direction": direction})


def make_task(task_cfg, n_modalities: int, d: int, seq_len: int, input_dim: int,
              seed: int) -> SyntheticTask:
    """Train/test splits from a task config; the test split uses an independent seed stream."""
    kind = task_cfg.kind
    seeds = tuple(int(np.random.default_rng([seed, i]).integers(2 ** 31)) for i in range(2))
    sizes = (task_cfg.n_train, task_cfg.n_test)
    splits = []
    for s, N in zip(seeds, sizes):
        if kind == "parity":
            splits.append(gen_parity_task(n_modalities, input_dim, seq_len, task_cfg.sigma, N, s,
                                          task_cfg.pattern_seed))
        elif kind == "contrastive":
            splits.append(gen_contrastive_task(task_cfg.classes, d, task_cfg.sigma, N, s,
                                               M=n_modalities, n=seq_len, d_in=input_dim,
                                               pattern_seed=task_cfg.pattern_seed))
        elif kind == "injection":
            splits.append(gen_injection_task(d, task_cfg.target_shape, task_cfg.sigma, N, s,
                                             M=n_modalities, n=seq_len, d_in=input_dim,
                                             pattern_seed=task_cfg.pattern_seed))
        else:
            raise ValueError(f"unknown task kind {kind!r}")
    info = {}
    if kind == "contrastive":
        info["classes"] = ClassEmbeddings.from_raw(splits[0].extras["classes"])
    if kind == "injection":
        info["target"] = InjectionTarget(tuple(task_cfg.target_shape))
    return SyntheticTask(kind, n_modalities, task_cfg.sigma, seed, splits[0], splits[1], info)


# ---------------------------------------------------------------- task heads


class TaskHead:
    """Trainable readout on top of SEN outputs; trains alongside the RA state in every arm."""

    def __init__(self, kind: str, d: int, rng: np.random.Generator, n_classes: int = 2,
                 target: Optional[InjectionTarget] = None, classes: Optional[ClassEmbeddings] = None,
                 temperature: float = 10.0):
        self.kind = kind
        self.target = target
        self.classes = classes
        self.temperature = temperature
        s = 1.0 / math.sqrt(d)
        if kind == "parity":
            self.params = {"head.w": Tensor(rng.normal(0.0, s, (d, n_classes)), requires_grad=True),
                           "head.b": Tensor(np.zeros(n_classes), requires_grad=True)}
        elif kind == "contrastive":
            self.params = {"head.video.w": Tensor(np.eye(d), requires_grad=True),
                           "head.audio.w": Tensor(np.eye(d), requires_grad=True)}
        elif kind == "injection":
            self.params = {"head.w": Tensor(rng.normal(0.0, s, (d, d)), requires_grad=True),
                           "head.b": Tensor(np.zeros(d), requires_grad=True)}
        else:
            raise ValueError(f"unknown head kind {kind!r}")

    def named_parameters(self) -> list:
        return list(self.params.items())

    def parameters(self) -> list:
        return list(self.params.values())

    def _contrastive_logits(self, finals: list) -> tuple:
        p = self.params
        v = T.l2_normalize(T.linear(finals[0], p["head.video.w"]))
        a = T.l2_normalize(T.linear(finals[-1], p["head.audio.w"]))
        ct = self.classes.matrix.data.T
        scores = T.add(T.const_matmul(v, ct), T.const_matmul(a, ct))
        return T.scale(scores, self.temperature), v, a

    def loss(self, finals: list, context: Tensor, targets: np.ndarray,
             extras: Optional[dict] = None) -> Tensor:
        p = self.params
        if self.kind == "parity":
            return T.cross_entropy(T.linear(context, p["head.w"], p["head.b"]), targets)
        if self.kind == "contrastive":
            return T.cross_entropy(self._contrastive_logits(finals)[0], targets)
        pred = T.add(Tensor(extras["base"]),
                     context_inject(T.linear(context, p["head.w"], p["head.b"]), self.target))
        return T.mse(pred, Tensor(targets))

    def metric(self, finals: list, context: Tensor, targets: np.ndarray,
               extras: Optional[dict] = None) -> tuple:
        """``(name, value)`` of the task's evaluation metric."""
        p = self.params
        if self.kind == "parity":
            logits = T.linear(context, p["head.w"], p["head.b"]).data
            return "test_acc", float(np.mean(np.argmax(logits, axis=-1) == targets))
        if self.kind == "contrastive":
            v = T.linear(finals[0], p["head.video.w"])
            a = T.linear(finals[-1], p["head.audio.w"])
            pred, _ = contrastive_predict(v, a, self.classes)
            return "test_acc", float(np.mean(pred == targets))
        return "test_mse", float(self.loss(finals, context, targets, extras).item())


def make_head(task: SyntheticTask, d: int, seed: int) -> TaskHead:
    rng = np.random.default_rng([seed, 2])
    return TaskHead(task.kind, d, rng, target=task.info.get("target"),
                    classes=task.info.get("classes"))


# ---------------------------------------------------------------- training loop


@dataclass
class Recipe:
    steps: int = 2000
    batch: int = 32
    base_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    schedule: str = "cosine"
    eval_every: int = 500
    eval_chunk: int = 256

    @classmethod
    def from_config(cls, training_cfg) -> "Recipe":
        t = training_cfg
        return cls(t.steps, t.batch, t.base_lr, t.beta1, t.beta2, t.weight_decay, t.schedule,
                   t.eval_every)


@dataclass
class TrainState:
    """Everything needed to resume a run bit-exactly."""

    step: int
    opt: OptimizerState
    loss_sum: float = 0.0
    loss_count: int = 0


class TrainingDiverged(RuntimeError):
    pass


def batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    """Batch for one step; a pure function of ``(seed, step)`` so resumes need no RNG state."""
    return np.sort(np.random.default_rng([seed, 3, step]).choice(n, size=batch, replace=False))


def precompute_first_pass(sen: SEN, split: Split, chunk: int = 256) -> list:
    """Prompt-free features of every sample, one ``[N, d]`` array per modality."""
    out = [[] for _ in range(sen.n_modalities)]
    with T.no_grad():
        for lo in range(0, len(split), chunk):
            xs = [Tensor(x[lo:lo + chunk]) for x in split.inputs]
            for m, f in enumerate(first_pass(sen, xs)):
                out[m].append(f.data)
    return [np.concatenate(parts, axis=0) for parts in out]


def evaluate(sen: SEN, head: TaskHead, split: Split, first: Optional[list] = None,
             chunk: int = 256) -> tuple:
    """Metric over a whole split, computed in fixed-order chunks."""
    if first is None:
        first = precompute_first_pass(sen, split, chunk)
    finals_all, ctx_all = [[] for _ in range(sen.n_modalities)], []
    with T.no_grad():
        for lo in range(0, len(split), chunk):
            sl = slice(lo, lo + chunk)
            xs = [Tensor(x[sl]) for x in split.inputs]
            f1 = [Tensor(f[sl]) for f in first]
            finals, ctx = sen.forward(xs, f1)
            for m, f in enumerate(finals):
                finals_all[m].append(f.data)
            ctx_all.append(ctx.data)
        finals = [Tensor(np.concatenate(p)) for p in finals_all]
        ctx = Tensor(np.concatenate(ctx_all))
        return head.metric(finals, ctx, split.targets, split.extras)


def named_training_params(sen: SEN, head: TaskHead) -> list:
    return sen.named_trainable() + head.named_parameters()


def new_train_state(sen: SEN, head: TaskHead, recipe: Recipe) -> TrainState:
    params = [t for _, t in named_training_params(sen, head)]
    opt = OptimizerState.for_params(params, base_lr=recipe.base_lr, total_steps=max(recipe.steps, 1),
                                    beta1=recipe.beta1, beta2=recipe.beta2,
                                    weight_decay=recipe.weight_decay, schedule=recipe.schedule)
    return TrainState(0, opt)


def train(sen: SEN, task: SyntheticTask, recipe: Recipe, head: Optional[TaskHead] = None,
          seed: int = 0, arm: Optional[str] = None, state: Optional[TrainState] = None,
          until: Optional[int] = None, emit: Optional[Callable[[dict], None]] = None,
          record_losses: bool = False) -> dict:
    """Optimise the SEN's trainable state plus the task head.

    Metrics records ``{step, arm, metric, value, seed}`` are returned and, if
    given, passed to ``emit`` as they are produced. ``until`` stops early
    (the returned state can be checkpointed and resumed).
    """
    head = head if head is not None else make_head(task, sen.d, seed)
    arm = arm or sen.arm
    state = state if state is not None else new_train_state(sen, head, recipe)
    named = named_training_params(sen, head)
    params = [t for _, t in named]
    if len(params) != len(state.opt.m):
        raise ValueError("optimiser state does not match the model's trainable tensors")
    digest_before = sen.encoder_digest()
    first_train = precompute_first_pass(sen, task.train, recipe.eval_chunk)
    first_test = precompute_first_pass(sen, task.test, recipe.eval_chunk)
    records: list = []
    losses: list = []

    def log_metric(step, metric, value):
        rec = {"step": step, "arm": arm, "metric": metric, "value": value, "seed": seed}
        records.append(rec)
        if emit is not None:
            emit(rec)

    def run_eval(step):
        name, value = evaluate(sen, head, task.test, first_test, recipe.eval_chunk)
        log_metric(step, name, value)

    stop = recipe.steps if until is None else min(until, recipe.steps)
    if state.step == 0:
        run_eval(0)
    n = len(task.train)
    while state.step < stop:
        idx = batch_indices(seed, state.step, n, recipe.batch)
        xs = [Tensor(x[idx]) for x in task.train.inputs]
        f1 = [Tensor(f[idx]) for f in first_train]
        extras = {k: v[idx] for k, v in task.train.extras.items()
                  if isinstance(v, np.ndarray) and v.shape[:1] == (n,)}
        finals, ctx = sen.forward(xs, f1)
        loss = head.loss(finals, ctx, task.train.targets[idx], extras)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {state.step} (arm={arm}, seed={seed})")
        for p in params:
            p.grad = None
        T.backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        adamw_step(params, grads, state.opt)
        state.step += 1
        state.loss_sum += value
        state.loss_count += 1
        if record_losses:
            losses.append(value)
        if state.step % recipe.eval_every == 0 or state.step == recipe.steps:
            log_metric(state.step, "train_loss", state.loss_sum / state.loss_count)
            state.loss_sum, state.loss_count = 0.0, 0
            run_eval(state.step)
    for p in params:
        p.grad = None
    if sen.encoder_digest() != digest_before:
        raise AssertionError("encoder parameters changed during training")
    return {"records": records, "state": state, "head": head, "losses": losses,
            "encoder_digest": digest_before}


def final_metric(records: list, metric: str = "test_acc") -> float:
    vals = [r for r in records if r["metric"] == metric]
    return vals[-1]["value"]
