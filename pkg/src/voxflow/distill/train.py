"""Progressive flow distillation on toy 2D data.

Stages: flow-matching teacher -> guidance distillation into a
w-conditioned student -> multi-phase consistency distillation against an
EMA target -> optional adversarial finetune on teacher features.  Time
convention: t=0 is data, t=1 is noise; solvers step t downward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial.distance import cdist

from .autodiff import Tensor
from .data import NULL_CLASS, sample_toy_data
from .models import DiscriminatorHeads, FlowModel


@dataclass
class DistillConfig:
    """Hyperparameters for every distillation stage."""

    dist: str = "gmm8"
    seed: int = 0
    batch: int = 64               # distillation batch; kept small so gradient
                                  # noise stays heavy-tailed, which is where
                                  # the robust loss and EMA target matter
    pretrain_batch: int = 256     # teacher / guidance-distillation batch
    time_grid: int = 100          # discretization of [0,1] for t_n
    k_skip: int = 10              # teacher solver skip, in grid steps
    phases: int = 5
    ema_decay: float = 0.999
    huber_c: float = 1e-3
    w_range: tuple = (2.0, 8.0)
    w_const: float = 5.0
    lambda_adv: float = 0.1
    label_dropout: float = 0.1
    # stage step counts / learning rates (paper ratios at desk scale)
    teacher_steps: int = 20000
    teacher_lr: float = 1e-3
    gd_steps: int = 2000
    gd_lr: float = 5e-4
    cfd_steps: int = 3000
    cfd_lr: float = 1e-3
    finetune_steps: int = 1200
    finetune_lr: float = 5e-5
    adv_steps: int = 1000
    adv_disc_lr: float = 5e-4     # generator lr is one tenth of this
    # ablation toggles
    use_ema: bool = True
    loss: str = "huber"           # or "l2"
    gd_warmup: bool = True

    def __post_init__(self):
        if self.phases < 1:
            raise ValueError("phases must be >= 1")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise ValueError("ema_decay must be in [0, 1]")
        if self.huber_c <= 0:
            raise ValueError("huber_c must be > 0")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")
        if self.loss not in ("huber", "l2"):
            raise ValueError("loss must be 'huber' or 'l2'")


@dataclass
class PhaseSchedule:
    """Equal split of [0,1] into phases; t maps to its phase's low boundary."""

    phases: int
    boundaries: np.ndarray = dc_field(init=False)

    def __post_init__(self):
        if self.phases < 1:
            raise ValueError("phases must be >= 1")
        self.boundaries = np.linspace(1.0, 0.0, self.phases + 1)

    def t_end(self, t):
        """Largest boundary strictly below t (0 for t <= 0)."""
        asc = self.boundaries[::-1]
        pos = np.searchsorted(asc, np.asarray(t, dtype=np.float64), side="left") - 1
        return asc[np.clip(pos, 0, len(asc) - 1)]


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# building blocks


def pseudo_huber(a, b, c: float):
    """sqrt(||a - b||^2 + c^2) - c, per sample; mean over a batch."""
    if c <= 0:
        raise ValueError("c must be > 0")
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a = a if isinstance(a, Tensor) else Tensor(a)
        b = b if isinstance(b, Tensor) else Tensor(b)
        d2 = (a - b).square().sum(axis=1)
        per = (d2 + c * c).sqrt() - c
        return per.mean()
    d2 = np.sum((np.asarray(a) - np.asarray(b)) ** 2, axis=-1)
    return float(np.mean(np.sqrt(d2 + c * c) - c))


def ema_update(target: dict[str, Tensor], online: dict[str, Tensor],
               decay: float) -> None:
    """target <- decay*target + (1-decay)*online, in place."""
    for k, p in target.items():
        o = online[k]
        if o.data.shape != p.data.shape:
            raise ValueError(f"shape mismatch for '{k}'")
        p.data = decay * p.data + (1.0 - decay) * o.data


def cfg_velocity(model: FlowModel, x, t, c, w, **kw) -> np.ndarray:
    """Classifier-free guided velocity: v_u + w*(v_c - v_u)."""
    v_c = model.forward_np(x, t, c, **kw)
    v_u = model.forward_np(x, t, np.full(len(x), NULL_CLASS, np.int64), **kw)
    return v_u + np.asarray(w) * (v_c - v_u)


def ode_solve(velocity_fn, x: np.ndarray, t_from: float, t_to: float,
              steps: int) -> np.ndarray:
    """Explicit Euler from t_from down to t_to in uniform sub-steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not (0.0 <= t_to < t_from <= 1.0):
        raise ValueError("need 0 <= t_to < t_from <= 1")
    ts = np.linspace(t_from, t_to, steps + 1)
    for i in range(steps):
        x = x + (ts[i + 1] - ts[i]) * velocity_fn(x, ts[i])
    return x


def student_predict(model: FlowModel, x_t, t, t_end, c, w=None):
    """One-big-step trajectory map f(x,t;t_end) = x + (t_end - t)*v(x,t).

    Returns x_t exactly when t == t_end.  Works on the tape when x_t is a
    Tensor, otherwise in plain numpy.
    """
    t = np.asarray(t, dtype=np.float64)
    t_end = np.asarray(t_end, dtype=np.float64)
    dt = np.atleast_1d(t_end - t)[:, None] if t.ndim or t_end.ndim else t_end - t
    kw = {"w": w, "t_end": t_end} if model.with_w else {}
    if isinstance(x_t, Tensor):
        v = model.forward(x_t, t, c, **kw)
        return x_t + Tensor(np.broadcast_to(dt, v.shape).copy()) * v
    v = model.forward_np(x_t, t, c, **kw)
    return x_t + dt * v


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """2 E||a-b|| - E||a-a'|| - E||b-b'|| with exact pairwise sums."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples per set")
    return float(2.0 * cdist(a, b).mean() - cdist(a, a).mean()
                 - cdist(b, b).mean())


def grad_check(loss_fn, params: dict[str, Tensor], eps: float = 1e-4,
               entries_per_param: int = 3) -> float:
    """Max relative error of reverse-mode vs central-difference gradients.

    Samples the largest-gradient entries of every parameter; the finite
    difference there is well conditioned so the comparison is sharp.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")
    loss.backward()
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
             for k, p in params.items()}
    worst = 0.0
    for k, p in params.items():
        flat = grads[k].ravel()
        take = np.argsort(-np.abs(flat))[:entries_per_param]
        for idx in take:
            orig = p.data.ravel()[idx]
            p.data.ravel()[idx] = orig + eps
            lp = float(loss_fn().data)
            p.data.ravel()[idx] = orig - eps
            lm = float(loss_fn().data)
            p.data.ravel()[idx] = orig
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(flat[idx] - fd) / (abs(fd) + 1e-8))
    return worst


def _log(sink, record: dict) -> None:
    if sink is not None:
        sink.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# stage 1: flow-matching teacher


def train_teacher(cfg: DistillConfig, log_sink=None) -> FlowModel:
    """Train v(x_t,t,c) toward eps - x_0 with 10% label dropout."""
    model = FlowModel(seed=cfg.seed, with_w=False)
    if cfg.teacher_steps == 0:
        return model
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.params, cfg.teacher_lr)
    B = cfg.pretrain_batch
    init_loss = None
    last = []
    for step in range(cfg.teacher_steps):
        x0, labels = sample_toy_data(cfg.dist, B,
                                     seed=int(rng.integers(2 ** 62)))
        drop = rng.random(B) < cfg.label_dropout
        labels = np.where(drop, NULL_CLASS, labels)
        t = rng.random(B)
        eps = rng.standard_normal((B, 2))
        x_t = (1.0 - t)[:, None] * x0 + t[:, None] * eps
        target = eps - x0

        opt.zero_grad()
        v = model.forward(Tensor(x_t), t, labels)
        loss = (v - Tensor(target)).square().sum(axis=1).mean()
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"teacher diverged at step {step}")
        loss.backward()
        opt.step()
        lv = float(loss.data)
        if init_loss is None:
            init_loss = lv
        if step >= cfg.teacher_steps - 50:
            last.append(lv)
        if step % 200 == 0:
            _log(log_sink, {"stage": "teacher", "step": step, "loss": lv})
    if np.mean(last) > 0.5 * init_loss:
        raise RuntimeError("teacher loss failed to halve from initialization")
    return model


# ---------------------------------------------------------------------------
# stage 2: guidance distillation


def guidance_distill(teacher: FlowModel, cfg: DistillConfig,
                     log_sink=None) -> FlowModel:
    """Bake CFG of random strength w ~ U[2,8] into a w-conditioned student."""
    student = FlowModel(seed=cfg.seed + 2, with_w=True)
    student.init_from(teacher)  # zero w embedding -> starts at v_cond
    rng = np.random.default_rng(cfg.seed + 3)
    opt = Adam(student.params, cfg.gd_lr)
    B = cfg.pretrain_batch
    for step in range(cfg.gd_steps):
        x0, labels = sample_toy_data(cfg.dist, B,
                                     seed=int(rng.integers(2 ** 62)))
        t = rng.random(B)
        eps = rng.standard_normal((B, 2))
        x_t = (1.0 - t)[:, None] * x0 + t[:, None] * eps
        w = rng.uniform(cfg.w_range[0], cfg.w_range[1], B)
        target = cfg_velocity(teacher, x_t, t, labels, w[:, None])

        opt.zero_grad()
        # t_end = t: guidance distillation trains the instantaneous velocity
        v = student.forward(Tensor(x_t), t, labels, w=w, t_end=t)
        loss = (v - Tensor(target)).square().sum(axis=1).mean()
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"guidance distillation diverged at step {step}")
        loss.backward()
        opt.step()
        if step % 200 == 0:
            _log(log_sink, {"stage": "gd", "step": step, "loss": float(loss.data)})
    return student


# ---------------------------------------------------------------------------
# stage 3: consistency flow distillation


def _cfd_batch(teacher: FlowModel, target_model: FlowModel, cfg: DistillConfig,
               schedule: PhaseSchedule, rng: np.random.Generator):
    """Draw one CFD mini-batch and its stop-gradient target."""
    x0, labels = sample_toy_data(cfg.dist, cfg.batch,
                                 seed=int(rng.integers(2 ** 62)))
    N = cfg.time_grid
    n = rng.integers(1, N + 1, size=cfg.batch)       # grid times in (0, 1]
    t = n / N
    t_end = schedule.t_end(t)
    t_next = np.maximum(t - cfg.k_skip / N, t_end)
    eps = rng.standard_normal((cfg.batch, 2))
    x_t = (1.0 - t)[:, None] * x0 + t[:, None] * eps

    v = cfg_velocity(teacher, x_t, t, labels, cfg.w_const)
    x_hat = x_t + (t_next - t)[:, None] * v
    y = student_predict(target_model, x_hat, t_next, t_end, labels, w=cfg.w_const)
    return x_t, t, t_end, labels, y


def cfd_loss(student: FlowModel, cfg: DistillConfig, x_t, t, t_end, labels, y):
    pred = student_predict(student, Tensor(x_t), t, t_end, labels, w=cfg.w_const)
    if cfg.loss == "huber":
        return pseudo_huber(pred, Tensor(y), cfg.huber_c)
    return (pred - Tensor(y)).square().sum(axis=1).mean()


def _val_score(model: FlowModel, cfg: DistillConfig) -> float:
    """Few-step sample quality on a held-out validation draw."""
    data, _ = sample_toy_data(cfg.dist, 1024, seed=cfg.seed + 7)
    s, _ = sample_student(model, 1024, seed=cfg.seed + 8,
                          nfe=cfg.phases, w=cfg.w_const)
    return energy_distance(s, data)


def _snapshot(model: FlowModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.param_arrays().items()}


def cfd_train(student_init: FlowModel, teacher: FlowModel, cfg: DistillConfig,
              schedule: PhaseSchedule, steps: int | None = None,
              lr: float | None = None, log_sink=None, stage_name: str = "cfd",
              rehearse: PhaseSchedule | None = None,
              select_best: bool = False) -> FlowModel:
    """One consistency-distillation stage against an EMA target network.

    With ``rehearse`` set, half the batches keep training that schedule's
    jumps so a later-stage schedule change does not erase them.  With
    ``select_best``, the few-step validation score picks the returned
    checkpoint (the entry checkpoint included).
    """
    steps = cfg.cfd_steps if steps is None else steps
    lr = cfg.cfd_lr if lr is None else lr
    student = student_init.copy()
    target = student.copy()
    rng = np.random.default_rng(cfg.seed + 4)
    opt = Adam(student.params, lr)
    decay = cfg.ema_decay if cfg.use_ema else 0.0

    best = (_val_score(student, cfg), _snapshot(student)) if select_best else None
    for step in range(steps):
        sched = schedule
        if rehearse is not None and rng.random() < 0.5:
            sched = rehearse
        x_t, t, t_end, labels, y = _cfd_batch(teacher, target, cfg, sched, rng)
        opt.zero_grad()
        loss = cfd_loss(student, cfg, x_t, t, t_end, labels, y)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"{stage_name} diverged at step {step}")
        loss.backward()
        opt.step()
        ema_update(target.params, student.params, decay)
        if select_best and (step + 1) % 200 == 0:
            score = _val_score(student, cfg)
            if score < best[0]:
                best = (score, _snapshot(student))
        if step % 200 == 0:
            _log(log_sink, {"stage": stage_name, "step": step,
                            "loss": float(loss.data)})
    if select_best:
        score = _val_score(student, cfg)
        if score >= best[0]:
            student.load_arrays(best[1])
    return student


def distill_pipeline(cfg: DistillConfig, teacher: FlowModel | None = None,
                     log_sink=None, finetune: bool = True) -> dict:
    """Run teacher -> GD -> 5-phase CFD -> single-phase finetune."""
    if teacher is None:
        teacher = train_teacher(cfg, log_sink)
    if cfg.gd_warmup:
        student0 = guidance_distill(teacher, cfg, log_sink)
    else:
        # ablation: consistency distillation from scratch, no distilled init
        student0 = FlowModel(seed=cfg.seed + 2, with_w=True)
    student = cfd_train(student0, teacher, cfg, PhaseSchedule(cfg.phases),
                        log_sink=log_sink)
    if finetune and cfg.finetune_steps > 0:
        student = cfd_train(student, teacher, cfg, PhaseSchedule(1),
                            steps=cfg.finetune_steps, lr=cfg.finetune_lr,
                            log_sink=log_sink, stage_name="cfd_finetune",
                            rehearse=PhaseSchedule(cfg.phases),
                            select_best=True)
    return {"teacher": teacher, "gd": student0, "student": student}


# ---------------------------------------------------------------------------
# stage 4: adversarial finetune


def hinge_discriminator_loss(d_real: list, d_fake: list):
    """Eq-style hinge, summed over heads: ReLU(1+D(real)) + ReLU(1-D(fake))."""
    total = None
    for dr, df in zip(d_real, d_fake):
        term = (1.0 + dr).relu().mean() + (1.0 - df).relu().mean()
        total = term if total is None else total + term
    return total


def adversarial_finetune(generator: FlowModel, teacher: FlowModel,
                         cfg: DistillConfig, log_sink=None) -> FlowModel:
    """Alternate hinge-discriminator and CFD+adversarial generator updates.

    The discriminator reads teacher hidden features of clean samples; under
    the hinge above it drives D(real) negative and D(fake) positive, so the
    generator minimizes +mean D(fake).  The returned generator is the
    best-validation checkpoint, the entry checkpoint included, so the stage
    never ships a regression.
    """
    gen = generator.copy()
    best = (_val_score(gen, cfg), _snapshot(gen))
    target = generator.copy()  # EMA anchor for the consistency term
    target_sched = PhaseSchedule(1)
    disc = DiscriminatorHeads(seed=cfg.seed + 5)
    rng = np.random.default_rng(cfg.seed + 6)
    opt_d = Adam(disc.params, cfg.adv_disc_lr)
    opt_g = Adam(gen.params, cfg.adv_disc_lr / 10.0)

    def fake_batch(on_tape: bool):
        x0, labels = sample_toy_data(cfg.dist, cfg.batch,
                                     seed=int(rng.integers(2 ** 62)))
        n = rng.integers(1, cfg.time_grid + 1, size=cfg.batch)
        t = n / cfg.time_grid
        eps = rng.standard_normal((cfg.batch, 2))
        x_t = (1.0 - t)[:, None] * x0 + t[:, None] * eps
        x = Tensor(x_t) if on_tape else x_t
        fake = student_predict(gen, x, t, np.zeros(cfg.batch), labels,
                               w=cfg.w_const)
        return fake, labels, x_t, t

    for step in range(cfg.adv_steps):
        # discriminator update (generator off-tape)
        real, real_labels = sample_toy_data(cfg.dist, cfg.batch,
                                            seed=int(rng.integers(2 ** 62)))
        fake, labels, _, _ = fake_batch(on_tape=False)
        _, feats_r = teacher.forward_np(real, 0.0, real_labels,
                                        return_features=True)
        _, feats_f = teacher.forward_np(fake, 0.0, labels, return_features=True)
        opt_d.zero_grad()
        d_loss = hinge_discriminator_loss(disc.forward(feats_r),
                                          disc.forward(feats_f))
        if not np.isfinite(d_loss.data):
            raise FloatingPointError(f"discriminator diverged at step {step}")
        d_loss.backward()
        opt_d.step()

        # generator update: consistency loss + adversarial term
        fake, labels, x_t, t = fake_batch(on_tape=True)
        _, feats = teacher.forward(fake, 0.0, labels, return_features=True)
        adv = None
        for d in disc.forward(feats):
            adv = d.mean() if adv is None else adv + d.mean()
        batch = _cfd_batch(teacher, target, cfg, target_sched, rng)
        g_loss = cfd_loss(gen, cfg, *batch) + cfg.lambda_adv * adv
        if not np.isfinite(g_loss.data):
            raise FloatingPointError(f"generator diverged at step {step}")
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        ema_update(target.params, gen.params,
                   cfg.ema_decay if cfg.use_ema else 0.0)
        if (step + 1) % 100 == 0:
            score = _val_score(gen, cfg)
            if score < best[0]:
                best = (score, _snapshot(gen))
        if step % 100 == 0:
            _log(log_sink, {"stage": "adv", "step": step,
                            "d_loss": float(d_loss.data),
                            "g_loss": float(g_loss.data)})
    if _val_score(gen, cfg) >= best[0]:
        gen.load_arrays(best[1])
    return gen


# ---------------------------------------------------------------------------
# sampling and evaluation


def sample_teacher(teacher: FlowModel, n: int, seed: int, nfe: int = 50,
                   w: float = 5.0, class_label: int | None = None):
    """CFG Euler sampling from noise; returns (samples, labels)."""
    rng = np.random.default_rng(seed)
    labels = (rng.integers(0, 2, size=n) if class_label is None
              else np.full(n, class_label, np.int64))
    x = rng.standard_normal((n, 2))
    x = ode_solve(lambda xx, tt: cfg_velocity(teacher, xx, tt, labels, w),
                  x, 1.0, 0.0, nfe)
    return x, labels


def sample_student(student: FlowModel, n: int, seed: int, nfe: int = 5,
                   w: float = 5.0, class_label: int | None = None):
    """Few-step sampling: one trajectory-map jump per phase boundary."""
    rng = np.random.default_rng(seed)
    labels = (rng.integers(0, 2, size=n) if class_label is None
              else np.full(n, class_label, np.int64))
    x = rng.standard_normal((n, 2))
    bounds = np.linspace(1.0, 0.0, nfe + 1)
    for i in range(nfe):
        x = student_predict(student, x, bounds[i], bounds[i + 1], labels, w=w)
    return x, labels
