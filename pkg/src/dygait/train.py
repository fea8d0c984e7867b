"""P x K sampling, parameter initialisation, optimisers, the training loop and checkpoints."""
import json
import logging
import os
import queue
import struct
import threading
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from dygait import core
from dygait.core import Tensor
from dygait.loss import LOG_HEADER, Batch, class_logits, combined_loss
from dygait.model import ModelConfig, ModelParams, as_input, network_forward, param_shapes
from dygait.preprocess import load_sequence, sample_clip

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


class DatasetTooSmallError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    P: int = 4
    K: int = 4
    clip_len: int = 30
    iterations: int = 500
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    adam_betas: tuple = (0.9, 0.999)
    margin: float = 0.2
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.validate()

    def validate(self):
        if self.P < 2 or self.K < 2:
            raise ValueError(f"P and K must both be at least 2, got P={self.P} K={self.K}")
        if self.clip_len < 3:
            raise ValueError("clip_len must be at least 3")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ValueError("adam_betas must be two values in [0, 1)")
        if self.iterations < 0 or self.checkpoint_every < 0:
            raise ValueError("iterations and checkpoint_every must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


# ---------------------------------------------------------------- sampling

def pk_sample(groups, P, K, rng):
    """Pick ``P`` distinct subjects, then ``K`` sequences of each.

    ``groups`` maps subject -> list of sequence keys (a manifest's training
    rows grouped by subject). Subjects are drawn without replacement, sorted
    first so the draw does not depend on dict order; sequences are drawn
    without replacement when a subject has at least ``K`` and with
    replacement otherwise. Returns a list of ``(subject, key)``.
    """
    subjects = sorted(groups)
    if len(subjects) < P:
        raise DatasetTooSmallError(f"need at least P={P} training subjects, have {len(subjects)}")
    picks = []
    for i in rng.choice(len(subjects), size=P, replace=False):
        subject = subjects[i]
        keys = groups[subject]
        if not keys:
            raise DatasetTooSmallError(f"subject {subject!r} has no training sequence")
        idx = rng.choice(len(keys), size=K, replace=len(keys) < K)
        picks.extend((subject, keys[j]) for j in idx)
    return picks


def init_params(config, seed, n_classes=None, dtype=np.float32):
    """Fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); classifier biases start at 0."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in param_shapes(config, n_classes).items():
        if name == "cls.bias":
            data = np.zeros(shape)
        else:
            # conv (out, in, kt, kh, kw); per-strip maps (S, out, in)
            fan_in = int(np.prod(shape[1:])) if len(shape) == 5 else shape[-1]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------- optimisers

class SGD:
    """Heavy-ball momentum: ``v <- momentum * v - lr * g``; ``p <- p + v``."""

    kind = "sgd"

    def __init__(self, lr, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, named):
        for name, t in named.items():
            if t.grad is None:
                continue
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(t.data)
            v = t.data.dtype.type(self.momentum) * v - t.data.dtype.type(self.lr) * t.grad
            self.velocity[name] = v
            t.data = t.data + v

    def state_tensors(self):
        return {f"sgd.v.{k}": v for k, v in self.velocity.items()}

    def load_state(self, tensors, meta):
        self.velocity = {k[len("sgd.v."):]: v for k, v in tensors.items() if k.startswith("sgd.v.")}

    def meta(self):
        return {}


class Adam:
    """Bias-corrected Adam with epsilon 1e-8 added to the root of the second moment."""

    kind = "adam"

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, named):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, t in named.items():
            if t.grad is None:
                continue
            f = t.data.dtype.type
            g = t.grad
            m = self.m.get(name, np.zeros_like(t.data))
            v = self.v.get(name, np.zeros_like(t.data))
            m = f(self.b1) * m + f(1.0 - self.b1) * g
            v = f(self.b2) * v + f(1.0 - self.b2) * (g * g)
            self.m[name], self.v[name] = m, v
            m_hat = m / f(c1)
            v_hat = v / f(c2)
            t.data = t.data - f(self.lr) * m_hat / (np.sqrt(v_hat) + f(self.eps))

    def state_tensors(self):
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors, meta):
        self.t = int(meta.get("t", 0))
        self.m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}

    def meta(self):
        return {"t": self.t}


def make_optimizer(config):
    if config.optimizer == "sgd":
        return SGD(config.lr, config.momentum)
    return Adam(config.lr, config.adam_betas)


# ---------------------------------------------------------------- training

@dataclass
class TrainBatch:
    frames: np.ndarray  # (N, T, H, W) float
    labels: np.ndarray  # (N,) class ids
    rng_state: dict = None  # sampler RNG state right after this batch was drawn


@dataclass
class TrainState:
    params: ModelParams
    optimizer: object
    model_config: ModelConfig
    train_config: TrainConfig
    rng: np.random.Generator
    iteration: int = 0
    classes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)  # JSON-safe run settings echoed into checkpoints


def new_state(model_config, train_config, classes):
    params = init_params(model_config, train_config.seed, n_classes=len(classes))
    # the sampler stream is independent of the initialisation stream
    rng = np.random.default_rng([train_config.seed, 1])
    return TrainState(params, make_optimizer(train_config), model_config, train_config, rng, 0, list(classes))


def forward_loss(params, frames, labels, model_config, margin):
    """Network + combined loss on a batch of clips. Returns ``(loss_tensor, LossReport)``."""
    x = as_input(frames, params["hm"].dtype)
    emb = network_forward(x, params, model_config)
    logits = class_logits(emb, params)
    return combined_loss(Batch(emb, labels, logits), margin)


def train_step(state, batch, step=None):
    """One forward/backward/update on ``batch``. Raises DivergenceError on a non-finite loss
    before touching the parameters."""
    step = state.iteration + 1 if step is None else step
    params = state.params
    for t in params.values():
        t.grad = None
    with core.Tape() as tape:
        loss, report = forward_loss(params, batch.frames, batch.labels, state.model_config, state.train_config.margin)
    if not np.isfinite(report.loss_all):
        raise DivergenceError(step, report.loss_all)
    tape.backward(loss)
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise DivergenceError(step, f"gradient of {name}")
    state.optimizer.step(params)
    state.iteration = step
    return params, report


class ClipSource:
    """Draws P x K batches of random clips from in-memory training sequences.

    ``sequences`` maps subject -> list of SilhouetteSequence. Every random
    draw goes through ``rng``; each batch carries the generator state after
    its draw so a checkpoint can record exactly where sampling stands.
    """

    def __init__(self, sequences, classes, config, rng, dtype=np.float32):
        self.groups = {s: list(range(len(seqs))) for s, seqs in sequences.items()}
        self.sequences = sequences
        self.label_of = {s: i for i, s in enumerate(classes)}
        self.config = config
        self.rng = rng
        self.dtype = dtype

    def draw(self):
        cfg = self.config
        picks = pk_sample(self.groups, cfg.P, cfg.K, self.rng)
        clips = [sample_clip(self.sequences[s][k], cfg.clip_len, self.rng).frames for s, k in picks]
        labels = np.array([self.label_of[s] for s, _ in picks])
        state = self.rng.bit_generator.state
        return TrainBatch(np.stack(clips).astype(self.dtype), labels, state)


def prefetched(draw, count, depth):
    """Yield ``count`` results of ``draw()`` in order, produced up to ``depth`` ahead on a worker thread."""
    if depth <= 0:
        for _ in range(count):
            yield draw()
        return
    q = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def work():
        try:
            for _ in range(count):
                if stop.is_set():
                    return
                q.put(("ok", draw()))
        except BaseException as exc:  # surfaced on the consumer side
            q.put(("err", exc))

    worker = threading.Thread(target=work, daemon=True)
    worker.start()
    try:
        for _ in range(count):
            kind, item = q.get()
            if kind == "err":
                raise item
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                worker.join(0.01)


def load_training_sequences(manifest, model_config, mode="crop"):
    """Subject -> list of normalised sequences for every ``train`` row, in manifest order."""
    out = {}
    for row in manifest.partition("train"):
        seq = load_sequence(manifest.abspath(row), model_config.input_size, mode, row.subject, row.condition, row.view)
        out.setdefault(row.subject, []).append(seq)
    return out


def checkpoint_name(iteration):
    return f"ckpt_{iteration:07d}.dygt"


def train(state, sequences, log_stream=None, out_dir=None, prefetch=0, iterations=None):
    """Run the loop from ``state.iteration`` up to ``iterations`` (default: the config's count).

    Writes one CSV row per step to ``log_stream``, a checkpoint every
    ``checkpoint_every`` steps and a final ``last.dygt`` into ``out_dir``.
    On divergence the exception propagates and the last checkpoint on disk is
    left untouched.
    """
    cfg = state.train_config
    total = cfg.iterations if iterations is None else iterations
    source = ClipSource(sequences, state.classes, cfg, state.rng, state.params["hm"].dtype)
    if log_stream is not None and state.iteration == 0:
        print(LOG_HEADER, file=log_stream)
    reports = []
    for batch in prefetched(source.draw, max(total - state.iteration, 0), prefetch):
        _, report = train_step(state, batch)
        reports.append(report)
        if log_stream is not None:
            print(report.csv_row(state.iteration), file=log_stream)
        if out_dir and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(state, os.path.join(out_dir, checkpoint_name(state.iteration)), batch.rng_state)
    if out_dir:
        save_checkpoint(state, os.path.join(out_dir, "last.dygt"))
    return reports


# ---------------------------------------------------------------- checkpoints

MAGIC = b"DYGT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<u8")}
_TAGS = {v: k for k, v in _DTYPES.items()}


def _config_blob(state, rng_state):
    blob = {
        "model": asdict(state.model_config),
        "train": asdict(state.train_config),
        "classes": list(state.classes),
        "optimizer": {"kind": state.optimizer.kind, **state.optimizer.meta()},
        "rng": rng_state,
        "extra": state.extra,
    }
    return json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(state, rng_state=None):
    """Serialise ``state`` to bytes. ``rng_state`` overrides the live sampler state."""
    rng_state = state.rng.bit_generator.state if rng_state is None else rng_state
    tensors = [(f"param.{k}", t.data) for k, t in state.params.items()]
    tensors += sorted(state.optimizer.state_tensors().items())
    blob = _config_blob(state, rng_state)
    parts = [MAGIC, struct.pack("<IQI", VERSION, state.iteration, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise CheckpointError(f"cannot store tensor {name} of dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAGS[dt], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(state, path, rng_state=None):
    """Write atomically (temp file + rename) so a crash never leaves a half-written checkpoint."""
    data = encode_checkpoint(state, rng_state)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint ends early")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf):
    """Parse bytes into a fresh TrainState. The CRC is verified before anything is decoded."""
    if len(buf) < 4 + 4 + 8 + 4 + 4 + 4 or buf[:4] != MAGIC:
        if buf[:4] != MAGIC and len(buf) >= 4:
            raise CheckpointError("not a checkpoint file (bad magic)")
        raise ChecksumError("checkpoint truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch (file truncated or corrupt)")
    r = _Reader(body)
    r.take(4)
    version, iteration, blob_len = r.unpack("<IQI")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    meta = json.loads(r.take(blob_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for tensor {name}")
        dims = r.unpack(f"<{rank}Q")
        dt = _DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")

    model_config = ModelConfig(**meta["model"])
    train_config = TrainConfig(**meta["train"])
    params = ModelParams()
    for name, arr in tensors.items():
        if name.startswith("param."):
            key = name[len("param."):]
            params[key] = Tensor(arr, requires_grad=True, name=key)
    opt = make_optimizer(train_config)
    opt.load_state({k: v for k, v in tensors.items() if not k.startswith("param.")}, meta["optimizer"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(params, opt, model_config, train_config, rng, iteration, meta["classes"], meta.get("extra", {}))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
