"""Experiment harness: data generators, IDX ingestion, a dense softmax
head, deterministic training loops, and the three reference experiments.

Every run is sequential and fully determined by its seed: data, inits, and
the training trajectory reproduce bitwise.  Wall-clock numbers live only in
the JSON summary, never in the per-epoch rows, so row files from identical
runs compare byte-for-byte.  RKHM_THREADS (default 1) caps how many arms of
one experiment run as parallel threads; each arm stays sequential inside.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import algebra, bounds, kernels, pfnorm, training
from . import model as model_mod
from .algebra import ShapeMismatch, dump_json


class BadMagic(Exception):
    pass


class DimMismatch(Exception):
    pass


class TruncatedFile(Exception):
    pass


EXPERIMENTS = ("autoencoder", "benign", "mnist")

REGRESSION_COLUMNS = ("epoch", "train_loss", "train_op", "test_loss",
                      "gap", "reg_pf", "reg_norm")
MNIST_COLUMNS = ("epoch", "train_loss", "train_accuracy", "test_loss",
                 "test_accuracy", "reg_pf", "reg_norm")


def worker_count():
    raw = os.environ.get("RKHM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# --- data generators --------------------------------------------------------

@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def gen_autoencoder_data(seed, n=10, d=10, test_n=1000,
                         noise_std=0.001 ** 0.5):
    """Squared random projections: x = (a z)^2 + eps reshaped to d x d.

    a is d^2 x d and z is d-dimensional, both with zero-mean normal entries
    of variance 0.1; eps has std noise_std (variance 1e-3 by default), so
    the noise sits about an order of magnitude below the signal; targets
    equal inputs.  The train block is drawn before the test block, so the
    training data does not depend on test_n.
    """
    rng = np.random.default_rng(seed)
    scale = 0.1 ** 0.5
    a = rng.normal(0.0, scale, size=(d * d, d))

    def draw(count):
        z = rng.normal(0.0, scale, size=(count, d))
        x = (z @ a.T) ** 2
        if noise_std:
            x = x + rng.normal(0.0, noise_std, size=x.shape)
        return x.reshape(count, d, d)

    train = draw(n)
    test = draw(test_n)
    return Dataset(train, train.copy(), test, test.copy())


def gen_benign_data(seed, n=1000, d=10, test_n=1000, noise_std=0.001):
    """Diagonal inputs with N(0, 0.1) entries; targets are the elementwise
    squares plus diagonal noise of std noise_std (10% of the signal scale).
    With noise_std = 0 the targets are exact squares."""
    rng = np.random.default_rng(seed)
    eye = np.arange(d)

    def draw(count):
        vals = rng.normal(0.0, 0.1, size=(count, d))
        x = np.zeros((count, d, d))
        x[:, eye, eye] = vals
        yvals = vals ** 2
        if noise_std:
            yvals = yvals + rng.normal(0.0, noise_std, size=yvals.shape)
        y = np.zeros((count, d, d))
        y[:, eye, eye] = yvals
        return x, y

    train_x, train_y = draw(n)
    test_x, test_y = draw(test_n)
    return Dataset(train_x, train_y, test_x, test_y)


# --- IDX ingestion -----------------------------------------------------------

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (count, rows, cols) and labels as big-endian IDX."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ShapeMismatch(f"{images.shape} images, {labels.shape} labels")
    count, rows, cols = images.shape
    header = b"".join(v.to_bytes(4, "big")
                      for v in (IDX_IMAGES_MAGIC, count, rows, cols))
    Path(images_path).write_bytes(header + images.tobytes())
    lhead = IDX_LABELS_MAGIC.to_bytes(4, "big") + count.to_bytes(4, "big")
    Path(labels_path).write_bytes(lhead + labels.tobytes())


def _idx_header(data, path, magic, words):
    need = 4 * (1 + words)
    if len(data) < 4:
        raise TruncatedFile(f"{path}: no magic")
    got = int.from_bytes(data[:4], "big")
    if got != magic:
        raise BadMagic(f"{path}: magic {got}, expected {magic}")
    if len(data) < need:
        raise TruncatedFile(f"{path}: header short")
    dims = [int.from_bytes(data[4 * (i + 1):4 * (i + 2)], "big")
            for i in range(words)]
    return dims, need


def load_mnist_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files; pixels scaled into [0, 1]."""
    data = Path(images_path).read_bytes()
    (count, rows, cols), off = _idx_header(data, images_path,
                                           IDX_IMAGES_MAGIC, 3)
    if len(data) != off + count * rows * cols:
        raise TruncatedFile(
            f"{images_path}: {len(data) - off} payload bytes for "
            f"{count}x{rows}x{cols}")
    images = np.frombuffer(data, np.uint8, offset=off).reshape(
        count, rows, cols).astype(float) / 255.0
    ldata = Path(labels_path).read_bytes()
    (lcount,), loff = _idx_header(ldata, labels_path, IDX_LABELS_MAGIC, 1)
    if len(ldata) != loff + lcount:
        raise TruncatedFile(f"{labels_path}: payload/header mismatch")
    if lcount != count:
        raise DimMismatch(f"{count} images vs {lcount} labels")
    labels = np.frombuffer(ldata, np.uint8, offset=loff).astype(np.int64)
    return images, labels


def digits_fallback_idx(cache_dir):
    """Stand-in corpus when no MNIST files are configured: the bundled
    8x8 digits upscaled 3x and zero-padded to 28x28, materialized as real
    IDX files so the standard loader path is exercised."""
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    ipath = cache / "digits-upscaled-idx3-ubyte"
    lpath = cache / "digits-upscaled-idx1-ubyte"
    if not (ipath.exists() and lpath.exists()):
        from sklearn.datasets import load_digits
        ds = load_digits()
        up = np.kron(ds.images, np.ones((3, 3)))
        padded = np.zeros((up.shape[0], 28, 28))
        padded[:, 2:26, 2:26] = up
        u8 = np.clip(np.round(padded / 16.0 * 255.0), 0, 255)
        write_idx(u8, ds.target, ipath, lpath)
    return str(ipath), str(lpath)


def stratified_subset(labels, count, rng, exclude=None):
    """Indices of a class-stratified subset; class counts differ by <= 1.

    Classes in sorted order receive the remainder one by one, selection
    within a class is a seeded permutation, and the returned order is a
    final permutation of the union.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    take = np.full(len(classes), count // len(classes), dtype=int)
    take[:count % len(classes)] += 1
    banned = set() if exclude is None else set(int(i) for i in exclude)
    picked = []
    for cls, cnt in zip(classes, take):
        pool = np.array([i for i in np.flatnonzero(labels == cls)
                         if i not in banned], dtype=int)
        if cnt > pool.size:
            raise ValueError(f"class {cls}: need {cnt}, have {pool.size}")
        picked.append(rng.permutation(pool)[:cnt])
    return rng.permutation(np.concatenate(picked))


# --- dense classification head ----------------------------------------------

@dataclass
class DenseHead:
    """Two affine layers, sigmoid between them, softmax on the logits."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng, inputs, hidden, classes):
        return cls(w1=rng.normal(0.0, 1.0 / math.sqrt(inputs),
                                 size=(inputs, hidden)),
                   b1=np.zeros(hidden),
                   w2=rng.normal(0.0, 1.0 / math.sqrt(hidden),
                                 size=(hidden, classes)),
                   b2=np.zeros(classes))

    @property
    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def set_params(self, arrays):
        self.w1, self.b1, self.w2, self.b2 = arrays

    def _check(self, flat):
        flat = np.asarray(flat, dtype=float)
        squeeze = flat.ndim == 1
        if squeeze:
            flat = flat[None, :]
        if flat.ndim != 2 or flat.shape[1] != self.w1.shape[0]:
            raise ShapeMismatch(
                f"expected (*, {self.w1.shape[0]}), got {flat.shape}")
        return flat, squeeze

    def logits(self, flat):
        flat, squeeze = self._check(flat)
        z = expit(flat @ self.w1 + self.b1) @ self.w2 + self.b2
        return z[0] if squeeze else z

    def backward(self, flat, dlogits):
        flat, _ = self._check(flat)
        dlogits = np.asarray(dlogits, dtype=float).reshape(flat.shape[0], -1)
        s = expit(flat @ self.w1 + self.b1)
        gw2 = s.T @ dlogits
        gb2 = dlogits.sum(axis=0)
        dz1 = (dlogits @ self.w2.T) * s * (1.0 - s)
        gw1 = flat.T @ dz1
        gb1 = dz1.sum(axis=0)
        return dz1 @ self.w1.T, [gw1, gb1, gw2, gb2]


def dense_head_forward(head, x):
    """Class probabilities (softmax of the head's logits); rows sum to 1."""
    z = head.logits(x)
    z2 = z if z.ndim == 2 else z[None, :]
    e = np.exp(z2 - z2.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return p if z.ndim == 2 else p[0]


# --- metrics log -------------------------------------------------------------

@dataclass
class MetricsLog:
    columns: tuple
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def column(self, name):
        i = self.columns.index(name)
        return np.array([row[i] for row in self.rows])


def emit_metrics(log, path):
    """Write the rows as CSV (17 significant digits) and the summary as
    JSON next to it; returns (csv_path, json_path)."""
    csv_path = Path(path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(log.columns)]
    for row in log.rows:
        if len(row) != len(log.columns):
            raise ShapeMismatch(f"row width {len(row)} vs {len(log.columns)}")
        cells = [str(int(row[0]))]
        cells += [format(float(v), ".17g") for v in row[1:]]
        lines.append(",".join(cells))
    csv_path.write_text("\n".join(lines) + "\n")
    summary = dict(log.summary)
    for name in log.columns:
        if name.endswith("loss") and log.rows:
            summary[f"median_{name}"] = float(np.median(log.column(name)))
    json_path = csv_path.with_suffix(".json")
    json_path.write_text(dump_json(summary) + "\n")
    return str(csv_path), str(json_path)


def read_metrics(csv_path):
    """Inverse of emit_metrics (summary read from the sibling JSON)."""
    text = Path(csv_path).read_text().strip().split("\n")
    columns = tuple(text[0].split(","))
    rows = []
    for line in text[1:]:
        cells = line.split(",")
        rows.append(tuple([int(cells[0])] + [float(c) for c in cells[1:]]))
    summary = {}
    jpath = Path(csv_path).with_suffix(".json")
    if jpath.exists():
        summary = json.loads(jpath.read_text())
    return MetricsLog(columns=columns, rows=rows, summary=summary)


# --- experiment configuration -------------------------------------------------

_DEFAULTS = {
    "autoencoder": dict(n=10, d=10, epochs=50000, lr=1e-4, optimizer="sgd",
                        lambda2=0.0, lambda1_values=(), stop_loss=0.05,
                        eval_every=500, kernel_c=0.1),
    "benign": dict(n=200, d=10, epochs=600, lr=3e-4, optimizer="sgd",
                   lambda2=0.01, lambda1_values=(0.0, 100.0), stop_loss=None,
                   eval_every=10, kernel_c=1.0),
    "mnist": dict(n=20, d=28, epochs=300, lr=1e-3, optimizer="adam",
                  lambda2=0.001, lambda1_values=(0.0, 1.0), stop_loss=None,
                  eval_every=10, kernel_c=0.001),
}


@dataclass
class ExperimentConfig:
    which: str
    seed: int
    n: int = None
    d: int = None
    epochs: int = None
    test_set_size: int = 1000
    eval_every: int = None
    lr: float = None
    optimizer: str = None
    kernel_c: float = None
    kernel_c2: float = None
    eta: float = 0.01
    lambda2: float = None
    lambda1_values: tuple = None
    stop_loss: float = None
    head_hidden: int = 128
    output_dir: str = None
    mnist_images: str = None
    mnist_labels: str = None

    def __post_init__(self):
        if self.which not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.which!r}")
        for key, val in _DEFAULTS[self.which].items():
            if getattr(self, key) is None:
                setattr(self, key, val)
        if self.lambda1_values is not None:
            self.lambda1_values = tuple(float(v) for v in self.lambda1_values)
        if self.kernel_c2 is None:
            self.kernel_c2 = self.kernel_c
        if self.which == "mnist" and self.d != 28:
            raise ValueError("the image experiment runs at d = 28")
        for key in ("n", "d", "epochs", "test_set_size", "eval_every",
                    "head_hidden"):
            if int(getattr(self, key)) < 1:
                raise ValueError(f"{key} must be positive")
        if self.lr <= 0 or self.kernel_c <= 0 or self.kernel_c2 <= 0:
            raise ValueError("lr and kernel bandwidths must be positive")

    def to_json(self):
        out = dataclasses.asdict(self)
        out["lambda1_values"] = list(self.lambda1_values)
        return out


def config_from_json(obj, **overrides):
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    merged = {k: v for k, v in obj.items() if k in known}
    bad = set(obj) - known
    if bad:
        raise ValueError(f"unknown config keys: {sorted(bad)}")
    for k, v in overrides.items():
        if v is not None:
            merged[k] = v
    return ExperimentConfig(**merged)


# --- model builders -----------------------------------------------------------

def _sep_kernel(d, c):
    return kernels.MatrixKernel(
        "separable", kernels.ScalarKernel("laplacian", c),
        algebra.identity(algebra.full(d)))


def _ones_block_factor(d, size):
    desc = algebra.block_diag([size] * (d // size))
    return algebra.make_element(desc, desc.mask().astype(float))


def _init_from_raw(raw, descs):
    return [training.project_stack(raw[j].copy(), desc)
            for j, desc in enumerate(descs)]


def _autoencoder_descs(d):
    return [algebra.block_diag([1] * d), algebra.block_diag([2] * (d // 2)),
            algebra.full(d)]


def build_model(cfg, arm, data):
    """Deterministic model (and head) for one arm of an experiment."""
    rng = np.random.default_rng([cfg.seed, 7])
    n, d = cfg.n, cfg.d
    if cfg.which == "autoencoder":
        raw = 0.1 + rng.normal(0.0, 0.05, size=(3, n, d, d))
        descs = _autoencoder_descs(d) if arm == "rkhm" \
            else [algebra.full(d)] * 3
        ks = [_sep_kernel(d, cfg.kernel_c) for _ in range(3)]
        stacks = _init_from_raw(raw, descs)
        layers = [model_mod.Layer(k, desc, s)
                  for k, desc, s in zip(ks, descs, stacks)]
        return model_mod.DeepModel(layers, data.train_x), None
    if cfg.which == "benign":
        # near-zero init keeps the layer-1 anchor images clustered at the
        # start, so the lambda1 term (not the data fit) decides whether the
        # last-layer Gram becomes well conditioned
        raw = rng.normal(0.0, 0.001, size=(2, n, d, d))
        descs = [algebra.full(d), algebra.block_diag([1] * d)]
        ks = [_sep_kernel(d, cfg.kernel_c), _sep_kernel(d, cfg.kernel_c2)]
        stacks = _init_from_raw(raw, descs)
        layers = [model_mod.Layer(k, desc, s)
                  for k, desc, s in zip(ks, descs, stacks)]
        return model_mod.DeepModel(layers, data.train_x), None
    raw = rng.normal(0.0, 0.1, size=(2, n, d, d))
    descs = [algebra.block_diag([7] * 4), algebra.block_diag([4] * 7)]
    factors = [_ones_block_factor(d, 2), _ones_block_factor(d, 4)]
    cs = [cfg.kernel_c, cfg.kernel_c2]
    layers = []
    for j in range(2):
        kern = kernels.MatrixKernel(
            "product_conv", kernels.ScalarKernel("laplacian", cs[j]),
            factors[j])
        layers.append(model_mod.Layer(kern, descs[j],
                                      training.project_stack(raw[j].copy(),
                                                             descs[j])))
    head = DenseHead.init(np.random.default_rng([cfg.seed, 11]),
                          d * d, cfg.head_hidden, 10)
    return model_mod.DeepModel(layers, data.train_x), head


# --- training loops -----------------------------------------------------------

def _regression_metrics(mdl, data):
    train_preds = model_mod.anchor_images(mdl)[-1]
    train_op = training.loss_opnorm(train_preds, data.train_y)
    test_preds = model_mod.model_forward(mdl, data.test_x)
    test_op = training.loss_opnorm(test_preds, data.test_y)
    return train_op, test_op, test_op - train_op


def _plugin_bound(mdl, targets):
    try:
        inp = bounds.estimate_bound_inputs(mdl, targets, delta=0.05)
        return bounds.deep_bound(inp).to_json()
    except (pfnorm.SingularGram, bounds.InvalidInput) as err:
        return {"error": str(err)}


def _run_regression_arm(cfg, arm, data, loss_cfg):
    mdl, _ = build_model(cfg, arm, data)
    state = training.init_optimizer(cfg.optimizer, cfg.lr, mdl)
    log = MetricsLog(columns=REGRESSION_COLUMNS)
    t0 = time.perf_counter()
    epoch = 0
    stopped = False
    aborted = None

    def record(ep, parts):
        train_op, test_op, gap = _regression_metrics(mdl, data)
        log.rows.append((ep, parts["loss"], train_op, test_op, gap,
                         parts["reg_pf"], parts["reg_norm"]))

    try:
        while True:
            grads, parts = training.grad_and_value(
                mdl, None, data.train_y, loss_cfg)
            if epoch % cfg.eval_every == 0:
                record(epoch, parts)
            if cfg.stop_loss is not None and parts["loss"] <= cfg.stop_loss:
                stopped = True
                break
            if epoch >= cfg.epochs:
                break
            training.optimizer_step(state, mdl, grads)
            epoch += 1
    except training.NonFinite as err:
        aborted = str(err)
    if aborted is None:
        if not log.rows or log.rows[-1][0] != epoch:
            record(epoch, parts)
        final = log.rows[-1]
        log.summary = {
            "which": cfg.which, "arm": arm, "seed": cfg.seed,
            "epochs_run": epoch, "stopped_early": stopped,
            "final_train_loss": final[1], "final_train_op": final[2],
            "final_test_loss": final[3], "final_gap": final[4],
            "bound": _plugin_bound(mdl, data.train_y),
        }
    else:
        log.summary = {"which": cfg.which, "arm": arm, "seed": cfg.seed,
                       "epochs_run": epoch, "stopped_early": False,
                       "aborted": aborted}
    log.summary["runtime_s"] = time.perf_counter() - t0
    return log


def _accuracy(head, flat, labels):
    probs = dense_head_forward(head, flat)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def _run_mnist_arm(cfg, arm, data, loss_cfg, source):
    mdl, head = build_model(cfg, arm, data)
    state = training.init_optimizer(cfg.optimizer, cfg.lr, mdl)
    head_state = training.init_optimizer(cfg.optimizer, cfg.lr, head.params)
    log = MetricsLog(columns=MNIST_COLUMNS)
    t0 = time.perf_counter()
    epoch = 0
    aborted = None

    def record(ep, parts):
        train_flat = model_mod.anchor_images(mdl)[-1].reshape(cfg.n, -1)
        train_acc = _accuracy(head, train_flat, data.train_y)
        test_preds = model_mod.model_forward(mdl, data.test_x)
        test_flat = test_preds.reshape(test_preds.shape[0], -1)
        test_loss = training.loss_cross_entropy(head.logits(test_flat),
                                                data.test_y)
        test_acc = _accuracy(head, test_flat, data.test_y)
        log.rows.append((ep, parts["loss"], train_acc, test_loss, test_acc,
                         parts["reg_pf"], parts["reg_norm"]))

    try:
        while True:
            grads, parts = training.grad_and_value(
                mdl, None, data.train_y, loss_cfg, head=head)
            if epoch % cfg.eval_every == 0:
                record(epoch, parts)
            if epoch >= cfg.epochs:
                break
            training.optimizer_step(state, mdl, grads)
            head.set_params(training.update_arrays(head_state, head.params,
                                                   grads.head))
            epoch += 1
    except training.NonFinite as err:
        aborted = str(err)
    if aborted is None:
        if not log.rows or log.rows[-1][0] != epoch:
            record(epoch, parts)
        final = log.rows[-1]
        log.summary = {
            "which": cfg.which, "arm": arm, "seed": cfg.seed,
            "epochs_run": epoch, "stopped_early": False,
            "final_train_loss": final[1], "final_train_accuracy": final[2],
            "final_test_loss": final[3], "final_test_accuracy": final[4],
            "data_source": source,
        }
    else:
        log.summary = {"which": cfg.which, "arm": arm, "seed": cfg.seed,
                       "epochs_run": epoch, "aborted": aborted,
                       "data_source": source}
    log.summary["runtime_s"] = time.perf_counter() - t0
    return log


def _mnist_dataset(cfg):
    if cfg.mnist_images and cfg.mnist_labels:
        images, labels = load_mnist_idx(cfg.mnist_images, cfg.mnist_labels)
        source = "idx"
    else:
        cache = Path(cfg.output_dir or Path.home() / ".cache") / "deep-rkhm"
        ipath, lpath = digits_fallback_idx(cache)
        images, labels = load_mnist_idx(ipath, lpath)
        source = "digits-fallback"
    rng = np.random.default_rng([cfg.seed, 3])
    train_idx = stratified_subset(labels, cfg.n, rng)
    test_n = min(cfg.test_set_size, len(labels) - cfg.n)
    test_idx = stratified_subset(labels, test_n, rng, exclude=train_idx)
    return Dataset(images[train_idx], labels[train_idx],
                   images[test_idx], labels[test_idx]), source


def experiment_arms(cfg):
    if cfg.which == "autoencoder":
        return ["rkhm", "vvrkhs"]
    return [f"lambda1_{v:g}" for v in cfg.lambda1_values]


def dataset_for(cfg):
    """Materialize the experiment's dataset; returns (Dataset, source)."""
    if cfg.which == "autoencoder":
        return gen_autoencoder_data(cfg.seed, cfg.n, cfg.d,
                                    test_n=cfg.test_set_size), None
    if cfg.which == "benign":
        return gen_benign_data(cfg.seed, cfg.n, cfg.d,
                               test_n=cfg.test_set_size), None
    return _mnist_dataset(cfg)


def arm_loss_config(cfg, arm):
    """The objective one arm trains under."""
    if arm not in experiment_arms(cfg):
        raise ValueError(
            f"unknown arm {arm!r}; choose from {experiment_arms(cfg)}")
    if cfg.which == "autoencoder":
        kind = "opnorm" if arm == "rkhm" else "hs_mean"
        return training.LossConfig(kind=kind)
    lam1 = float(arm.split("_", 1)[1])
    kind = "opnorm" if cfg.which == "benign" else "cross_entropy"
    return training.LossConfig(kind=kind, lambda1=lam1, eta=cfg.eta,
                               lambda2=cfg.lambda2)


def _arm_runner(cfg, arm, data, source):
    loss_cfg = arm_loss_config(cfg, arm)
    if cfg.which == "mnist":
        return _run_mnist_arm(cfg, arm, data, loss_cfg, source)
    return _run_regression_arm(cfg, arm, data, loss_cfg)


def run_experiment(cfg):
    """Run every arm of one experiment at one seed; returns {arm: MetricsLog}.

    Data and initial parameters are materialized up front so arms share
    them; arms then run independently (in RKHM_THREADS parallel threads
    when configured, sequential inside each arm either way).  Files go to
    cfg.output_dir when set.
    """
    data, source = dataset_for(cfg)
    arms = experiment_arms(cfg)
    results = {}
    workers = min(worker_count(), len(arms))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = {arm: pool.submit(_arm_runner, cfg, arm, data, source)
                    for arm in arms}
            results = {arm: fut.result() for arm, fut in futs.items()}
    else:
        for arm in arms:
            results[arm] = _arm_runner(cfg, arm, data, source)
    if cfg.output_dir:
        for arm, log in results.items():
            emit_metrics(log, Path(cfg.output_dir) /
                         f"{cfg.which}_seed{cfg.seed}_{arm}.csv")
    return results


def run_many(cfg, seeds):
    """run_experiment across seeds plus a cross-seed summary JSON."""
    by_seed = {}
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=int(seed))
        by_seed[int(seed)] = run_experiment(run_cfg)
    summary = {"which": cfg.which, "seeds": [int(s) for s in seeds],
               "arms": {}}
    for arm in experiment_arms(cfg):
        entry = {}
        if cfg.which == "mnist":
            accs = [by_seed[s][arm].summary.get("final_test_accuracy")
                    for s in by_seed]
            entry["test_accuracies"] = accs
            vals = [a for a in accs if a is not None]
            if vals:
                entry["median_test_accuracy"] = float(np.median(vals))
        else:
            gaps = [by_seed[s][arm].summary.get("final_gap")
                    for s in by_seed]
            entry["gaps"] = gaps
            vals = [g for g in gaps if g is not None]
            if vals:
                entry["median_gap"] = float(np.median(vals))
        summary["arms"][arm] = entry
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{cfg.which}_summary.json").write_text(
            dump_json(summary) + "\n")
    return by_seed, summary
