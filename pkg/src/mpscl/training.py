"""Two-phase training: segmentation + adversarial warm-up, prototype bootstrap,
then the full objective with pseudo-labelled target contrastive learning."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses as L
from . import numerics as nx
from .data import SceneDataset
from .metrics import EvalReport, evaluate_masks
from .models import Discriminator, Generator
from .prototypes import PrototypeSet, cosine_scores, init_prototypes, refine_prototypes
from .pseudo_labels import LabelMap, assign_pseudo_labels

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MPSC"
CHECKPOINT_VERSION = 1
LOSS_COLUMNS = ("iteration", "seg", "c_src", "c_trg", "adv", "d", "val_dice")


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, dump_path: Path | None = None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message}; batch dumped to {dump_path}")


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    data_dir: str = ""
    out_dir: str = "run"
    alpha: float = 0.2
    delta_th: float = 0.25
    m: float = 0.4
    tau: float = 1.0
    gamma: float = 1.0
    beta: float = 0.1
    lam: float = 0.003
    lr_g: float = 2.5e-4
    momentum_g: float = 0.9
    weight_decay_g: float = 1e-4
    lr_d: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    phase1_iters: int = 500
    phase2_iters: int = 1500
    batch_size: int = 4
    seed: int = 0
    eval_every: int = 50
    num_classes: int = 5
    feature_dim: int = 32
    source_domain: str = "A"
    target_domain: str = "B"
    contrast_reduction: str = "image_mean"
    proto_use_target: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr_g", "lr_d", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.phase1_iters < 1 or self.phase2_iters < 0:
            raise ValueError("phase1_iters must be >= 1 and phase2_iters >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.contrast_reduction not in ("sum", "mean", "image_mean"):
            raise ValueError(f"unknown contrast_reduction {self.contrast_reduction!r}")

    @property
    def total_iters(self) -> int:
        return self.phase1_iters + self.phase2_iters

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# config files spell the adversarial weight "lambda"
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_KEYS = {f.name: ("lambda" if f.name == "lam" else f.name) for f in fields(TrainConfig)}


def config_keys() -> list[str]:
    return list(_FIELD_KEYS.values())


def _coerce(name: str, raw: str):
    ftype = {f.name: f.type for f in fields(TrainConfig)}[name]
    ftype = ftype if isinstance(ftype, str) else ftype.__name__
    if ftype == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: not a boolean: {raw!r}")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw.strip()


def parse_config_text(text: str) -> dict:
    """Parse flat ``key=value`` lines (``#`` comments, blank lines allowed)."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        name = _KEY_ALIASES.get(key, key)
        if name not in _FIELD_KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[name] = _coerce(name, raw)
    return values


def config_from_overrides(base: TrainConfig | None = None, **overrides) -> TrainConfig:
    cfg = base or TrainConfig()
    changes = {}
    for key, val in overrides.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in _FIELD_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        changes[name] = _coerce(name, val) if isinstance(val, str) else val
    return dataclasses.replace(cfg, **changes)


def load_config(path) -> TrainConfig:
    return TrainConfig(**parse_config_text(Path(path).read_text(encoding="utf-8")))


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        val = getattr(cfg, f.name)
        text = repr(val) if isinstance(val, float) else str(val).lower() if isinstance(val, bool) else str(val)
        lines.append(f"{_FIELD_KEYS[f.name]}={text}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ optimizers

def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float, weight_decay: float):
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v (in place on arrays)."""
    for i, (p, g) in enumerate(zip(params, grads)):
        v = momentum * velocity[i] + g + weight_decay * p
        velocity[i] = v
        p -= lr * v
    return params


def adam_step(params, grads, m1, m2, t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """Bias-corrected Adam update at step ``t`` (1-based), in place on arrays."""
    for i, (p, g) in enumerate(zip(params, grads)):
        m1[i] = beta1 * m1[i] + (1.0 - beta1) * g
        m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g
        mhat = m1[i] / (1.0 - beta1 ** t)
        vhat = m2[i] / (1.0 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


class SGD:
    def __init__(self, module, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.module = module
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in module.named_parameters()}

    def step(self) -> None:
        names = list(self.module.params)
        ps = [self.module.params[k].data for k in names]
        gs = [_grad_or_zero(self.module.params[k]) for k in names]
        vel = [self.velocity[k] for k in names]
        sgd_momentum_step(ps, gs, vel, self.lr, self.momentum, self.weight_decay)
        for k, v in zip(names, vel):
            self.velocity[k] = v

    def state(self) -> dict[str, np.ndarray]:
        return {f"v/{k}": v for k, v in self.velocity.items()}

    def load(self, state: dict[str, np.ndarray]) -> None:
        for k in self.velocity:
            self.velocity[k] = state[f"v/{k}"].copy()


class Adam:
    def __init__(self, module, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.module = module
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m1 = {k: np.zeros_like(p.data) for k, p in module.named_parameters()}
        self.m2 = {k: np.zeros_like(p.data) for k, p in module.named_parameters()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        names = list(self.module.params)
        ps = [self.module.params[k].data for k in names]
        gs = [_grad_or_zero(self.module.params[k]) for k in names]
        a = [self.m1[k] for k in names]
        b = [self.m2[k] for k in names]
        adam_step(ps, gs, a, b, self.t, self.lr, self.beta1, self.beta2, self.eps)
        for k, x, y in zip(names, a, b):
            self.m1[k], self.m2[k] = x, y

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m1.items()}
        out.update({f"v/{k}": v for k, v in self.m2.items()})
        return out

    def load(self, state: dict[str, np.ndarray], t: int) -> None:
        for k in self.m1:
            self.m1[k] = state[f"m/{k}"].copy()
            self.m2[k] = state[f"v/{k}"].copy()
        self.t = t


def _grad_or_zero(p: nx.Tensor) -> np.ndarray:
    return p.grad if p.grad is not None else np.zeros_like(p.data)


# ----------------------------------------------------------------- train state

@dataclass
class TrainState:
    cfg: TrainConfig
    generator: Generator
    discriminator: Discriminator
    opt_g: SGD
    opt_d: Adam
    prototypes: PrototypeSet | None = None
    iteration: int = 0
    best_val_dice: float = -1.0
    best_iteration: int = -1
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: TrainConfig) -> "TrainState":
        g = Generator(cfg.num_classes, cfg.feature_dim, seed=cfg.seed)
        d = Discriminator(cfg.num_classes, seed=cfg.seed + 7919)
        return cls(cfg, g, d,
                   SGD(g, cfg.lr_g, cfg.momentum_g, cfg.weight_decay_g),
                   Adam(d, cfg.lr_d, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps))


# ------------------------------------------------------------------ iterations

def _check_finite(values: dict, iteration: int | None = None) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NumericalAbort(f"non-finite loss at iteration {iteration}: {bad}")


def _generator_forward(state: TrainState, images: np.ndarray, track: bool):
    if track:
        return state.generator(images)
    with nx.no_grad():
        return state.generator(images)


def _step(batch_src, batch_trg, state: TrainState, cfg: TrainConfig, gamma: float, beta: float,
          contrastive: bool) -> dict:
    x_s, m_s = batch_src
    x_t = batch_trg
    G, D = state.generator, state.discriminator
    lam = cfg.lam

    f_s, pred_s = G(x_s)
    y_s = LabelMap.from_indices(m_s, cfg.num_classes)
    seg = L.segmentation_loss(pred_s, y_s)

    f_t, pred_t = _generator_forward(state, x_t, track=(lam != 0 or (contrastive and beta != 0)))
    info_s = L.self_information_map(pred_s)
    info_t = L.self_information_map(pred_t)
    if lam != 0:
        adv = L.generator_adversarial_loss(info_t, D)
    else:
        with nx.no_grad():
            adv = L.generator_adversarial_loss(info_t.detach(), D)

    c_src = c_trg = 0.0
    labels_t = None
    if contrastive:
        protos = state.prototypes
        with nx.no_grad():
            scores = cosine_scores(f_t.detach(), protos)
        labels_t, _ = assign_pseudo_labels(scores, cfg.delta_th, shape=x_t.shape[:3])
        c_src = _contrastive(f_s, y_s, protos, cfg, track=gamma != 0)
        c_trg = _contrastive(f_t, labels_t, protos, cfg, track=beta != 0)

    total = L.total_generator_loss(seg, c_src, c_trg, adv, gamma=gamma, beta=beta, lam=lam)
    values = {"seg": seg.item(), "c_src": _value(c_src), "c_trg": _value(c_trg), "adv": adv.item()}
    _check_finite({**values, "total": total.item()}, state.iteration)

    G.zero_grad()
    total.backward()
    state.opt_g.step()

    d_loss = L.discriminator_loss(info_s.detach(), info_t.detach(), D)
    values["d"] = d_loss.item()
    _check_finite({"d": values["d"]}, state.iteration)
    D.zero_grad()
    d_loss.backward()
    state.opt_d.step()

    if contrastive:
        feats, labs = [f_s.data], [y_s]
        if cfg.proto_use_target:
            feats.append(f_t.data)
            labs.append(labels_t)
        state.prototypes = refine_prototypes(state.prototypes, feats, labs)
    return values


def _contrastive(features, labels, protos, cfg: TrainConfig, track: bool):
    if track:
        return L.margin_contrastive_loss(features, labels, protos, cfg.m, cfg.tau, cfg.contrast_reduction)
    with nx.no_grad():
        return L.margin_contrastive_loss(features.detach(), labels, protos, cfg.m, cfg.tau,
                                         cfg.contrast_reduction)


def _value(x) -> float:
    return x.item() if isinstance(x, nx.Tensor) else float(x)


def phase1_step(batch_src, batch_trg, state: TrainState, cfg: TrainConfig) -> dict:
    """Generator step on seg + lambda*adv, then discriminator step. Returns loss values."""
    return _step(batch_src, batch_trg, state, cfg, gamma=0.0, beta=0.0, contrastive=False)


def phase2_step(batch_src, batch_trg, state: TrainState, cfg: TrainConfig) -> dict:
    """Pseudo-label the target batch, step the generator on the full objective, step the
    discriminator, then refine the prototypes with the source batch."""
    if state.prototypes is None:
        raise RuntimeError("prototypes are not initialized; run bootstrap_prototypes first")
    return _step(batch_src, batch_trg, state, cfg, gamma=cfg.gamma, beta=cfg.beta, contrastive=True)


def extract_features(generator: Generator, images: np.ndarray, batch: int = 20):
    feats, probs = [], []
    with nx.no_grad():
        for i in range(0, len(images), batch):
            f, p = generator(images[i:i + batch])
            feats.append(f.data)
            probs.append(p.probs.data)
    return np.concatenate(feats), np.concatenate(probs)


def bootstrap_prototypes(generator: Generator, src_images: np.ndarray, src_masks: np.ndarray,
                         cfg: TrainConfig) -> PrototypeSet:
    feats, _ = extract_features(generator, src_images)
    labels = LabelMap.from_indices(src_masks, cfg.num_classes)
    return init_prototypes([feats], [labels], alpha=cfg.alpha)


def predict_masks(generator: Generator, images: np.ndarray) -> np.ndarray:
    _, probs = extract_features(generator, images)
    return probs.argmax(axis=-1)


def evaluate(generator: Generator, images: np.ndarray, masks: np.ndarray, num_classes: int) -> EvalReport:
    return evaluate_masks(predict_masks(generator, images), masks, num_classes)


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(path, state: TrainState) -> None:
    tensors: dict[str, np.ndarray] = {}
    for k, v in state.generator.state_dict().items():
        tensors[f"G/{k}"] = v
    for k, v in state.discriminator.state_dict().items():
        tensors[f"D/{k}"] = v
    for k, v in state.opt_g.state().items():
        tensors[f"opt_g/{k}"] = v
    for k, v in state.opt_d.state().items():
        tensors[f"opt_d/{k}"] = v
    meta = {
        "best_val_dice": repr(float(state.best_val_dice)),
        "best_iteration": str(state.best_iteration),
        "adam_t": str(state.opt_d.t),
        "has_prototypes": "1" if state.prototypes is not None else "0",
    }
    if state.prototypes is not None:
        tensors["prototypes"] = state.prototypes.vectors
        meta["prototype_iteration"] = str(state.prototypes.iteration)
        meta["prototype_alpha"] = repr(float(state.prototypes.alpha))
    meta.update({k: str(v) for k, v in state.extra.items()})
    Path(path).write_bytes(encode_checkpoint(state.iteration, dump_config(state.cfg), meta, tensors))


def encode_checkpoint(iteration: int, config_text: str, meta: dict[str, str], tensors: dict[str, np.ndarray]) -> bytes:
    """Layout (little-endian): magic, u32 version, u64 iteration, u32-length-prefixed config
    text and metadata text (key=value lines), u32 tensor count, then per tensor: u16 name
    length, name, u32 rank, u32 dims, float64 payload."""
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<IQ", CHECKPOINT_VERSION, iteration))
    for text in (config_text, "".join(f"{k}={v}\n" for k, v in meta.items())):
        raw = text.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def decode_checkpoint(buf: bytes) -> tuple[int, str, dict[str, str], dict[str, np.ndarray]]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos} (need {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, iteration = struct.unpack("<IQ", take(12))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    texts = []
    for _ in range(2):
        (n,) = struct.unpack("<I", take(4))
        texts.append(bytes(take(n)).decode("utf-8"))
    meta = dict(line.split("=", 1) for line in texts[1].splitlines() if line)
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after tensor table")
    return iteration, texts[0], meta, tensors


def load_checkpoint(path) -> TrainState:
    iteration, cfg_text, meta, tensors = decode_checkpoint(Path(path).read_bytes())
    cfg = TrainConfig(**parse_config_text(cfg_text))
    state = TrainState.create(cfg)
    state.generator.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("G/")})
    state.discriminator.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("D/")})
    state.opt_g.load({k[6:]: v for k, v in tensors.items() if k.startswith("opt_g/")})
    state.opt_d.load({k[6:]: v for k, v in tensors.items() if k.startswith("opt_d/")}, int(meta["adam_t"]))
    if meta.get("has_prototypes") == "1":
        state.prototypes = PrototypeSet(tensors["prototypes"], int(meta["prototype_iteration"]),
                                        float(meta["prototype_alpha"]))
    state.iteration = iteration
    state.best_val_dice = float(meta["best_val_dice"])
    state.best_iteration = int(meta["best_iteration"])
    known = {"best_val_dice", "best_iteration", "adam_t", "has_prototypes", "prototype_iteration", "prototype_alpha"}
    state.extra = {k: v for k, v in meta.items() if k not in known}
    return state


# ------------------------------------------------------------------- training

@dataclass
class TrainResult:
    state: TrainState
    best_iteration: int
    best_val_dice: float
    best_checkpoint: Path
    last_checkpoint: Path
    loss_curve: Path
    start_angles: np.ndarray | None = None


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _write_loss_curve(path: Path, rows: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow((r[0],) + tuple(_fmt(v) for v in r[1:]))


def _read_loss_curve(path: Path, upto: int) -> list[tuple]:
    if not path.is_file():
        return []
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            it = int(rec["iteration"])
            if it <= upto:
                rows.append((it,) + tuple(None if rec[c] == "" else float(rec[c]) for c in LOSS_COLUMNS[1:]))
    return rows


def _dump_batch(out_dir: Path, iteration: int, batch_src, batch_trg) -> Path:
    path = out_dir / f"nan_dump_iter{iteration}.npz"
    np.savez(path, src_images=batch_src[0], src_masks=batch_src[1], trg_images=batch_trg)
    return path


def train(cfg: TrainConfig, data_dir=None, out_dir=None, resume=None, until: int | None = None,
          hooks=None) -> TrainResult:
    """Run phase 1, the prototype bootstrap and phase 2.

    Validation on the target val split (masks read through the evaluation-only
    loader) runs every ``eval_every`` iterations; the best mean foreground Dice
    is saved as ``checkpoint_best.mpsc``. ``until`` stops early (for resumption
    tests) after that many total iterations. ``hooks`` maps event names
    ("phase2_start", "iteration") to callables receiving the state.
    """
    data_dir = Path(data_dir or cfg.data_dir)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hooks = hooks or {}
    manifest = data_dir / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"missing manifest {manifest}")

    train_ds = SceneDataset(data_dir, role="train", target_domain=cfg.target_domain)
    src_x = train_ds.images("train", cfg.source_domain)
    src_m = train_ds.masks("train", cfg.source_domain)
    trg_x = train_ds.images("train", cfg.target_domain)
    if len(src_x) < cfg.batch_size or len(trg_x) < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} training scenes per domain")
    eval_ds = SceneDataset(data_dir, role="eval", target_domain=cfg.target_domain)
    has_val = eval_ds.count("val", cfg.target_domain) > 0
    if has_val:
        val_x = eval_ds.images("val", cfg.target_domain)
        val_m = eval_ds.masks("val", cfg.target_domain)

    best_path = out / "checkpoint_best.mpsc"
    last_path = out / "checkpoint_last.mpsc"
    curve_path = out / "loss_curve.csv"
    if resume is not None:
        state = load_checkpoint(resume)
        state.cfg = cfg
        rows = _read_loss_curve(curve_path, state.iteration - 1)
    else:
        state = TrainState.create(cfg)
        rows = []

    stop = cfg.total_iters if until is None else min(until, cfg.total_iters)
    for it in range(state.iteration, stop):
        if it == cfg.phase1_iters and state.prototypes is None:
            state.prototypes = bootstrap_prototypes(state.generator, src_x, src_m, cfg)
            if "phase2_start" in hooks:
                hooks["phase2_start"](state)
        rng = np.random.default_rng([cfg.seed, it])
        si = np.sort(rng.choice(len(src_x), cfg.batch_size, replace=False))
        ti = np.sort(rng.choice(len(trg_x), cfg.batch_size, replace=False))
        batch_src = (src_x[si], src_m[si])
        batch_trg = trg_x[ti]
        step = phase1_step if it < cfg.phase1_iters else phase2_step
        try:
            values = step(batch_src, batch_trg, state, cfg)
        except NumericalAbort as err:
            dump = _dump_batch(out, it, batch_src, batch_trg)
            raise NumericalAbort(str(err), dump) from None
        state.iteration = it + 1

        val_dice = None
        if has_val and cfg.eval_every > 0 and state.iteration % cfg.eval_every == 0:
            val_dice = evaluate(state.generator, val_x, val_m, cfg.num_classes).mean_dice
            if val_dice > state.best_val_dice:
                state.best_val_dice = val_dice
                state.best_iteration = state.iteration
                save_checkpoint(best_path, state)
        rows.append((it, values["seg"], values["c_src"], values["c_trg"], values["adv"], values["d"], val_dice))
        if "iteration" in hooks:
            hooks["iteration"](state)
        if it % 100 == 0:
            log.info("iter %d seg=%.4f c_src=%.4f c_trg=%.4f adv=%.4f d=%.4f", it, values["seg"], values["c_src"],
                     values["c_trg"], values["adv"], values["d"])

    if state.iteration >= cfg.total_iters and cfg.phase2_iters > 0 and state.prototypes is None:
        state.prototypes = bootstrap_prototypes(state.generator, src_x, src_m, cfg)
    if state.best_iteration < 0 and state.iteration >= cfg.total_iters:
        state.best_iteration = state.iteration
        save_checkpoint(best_path, state)
    save_checkpoint(last_path, state)
    _write_loss_curve(curve_path, rows)
    return TrainResult(state, state.best_iteration, state.best_val_dice, best_path, last_path, curve_path)
