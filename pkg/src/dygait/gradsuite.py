"""Finite-difference gradient suite over every differentiable op and the full network + loss.

Each case builds a scalar ``sum(op(inputs) * R)`` with a fixed random ``R``
so that every output coordinate contributes, then compares tape gradients
with central differences in float64.
"""
from dataclasses import dataclass

import numpy as np

from dygait import core
from dygait.core import ConvKernel3, Tensor
from dygait.loss import Batch, class_logits, combined_loss, cross_entropy_strips, triplet_ba
from dygait.model import ModelConfig, network_forward

OP_TOL = 1e-5
END_TO_END_TOL = 1e-4


@dataclass
class SuiteResult:
    op: str
    max_rel_error: float
    tol: float
    checked: int

    @property
    def passed(self):
        return self.checked > 0 and self.max_rel_error < self.tol


def _t(rng, *shape, name=None):
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


def _projected(op, out_shape, rng):
    r = rng.standard_normal(out_shape)

    def fn(*inputs):
        y = op(*inputs)
        return float((y.data * r).sum()) if core.current_tape() is None else _dot(y, r)

    return fn


def _dot(y, r):
    def backward(g):
        return (g * r,)

    return core._record("project", np.asarray((y.data * r).sum()), (y,), backward)


def _case(name, op, inputs, rng, eps=1e-4, sample=None):
    with core.Tape():
        out_shape = op(*inputs).shape
    fn = _projected(op, out_shape, rng)
    res = core.check_gradients(fn, inputs, eps=eps, sample=sample, rng=rng)
    return SuiteResult(name, res.max_rel_error, OP_TOL, res.checked)


def op_cases(rng):
    """(name, op, inputs) for every primitive, including every conv stride/padding the model uses."""
    cases = []
    for label, ksize, stride, pad in (
        ("conv3d[3x3x3 same]", (3, 3, 3), 1, (1, 1, 1)),
        ("conv3d[1x3x3 same]", (1, 3, 3), 1, (0, 1, 1)),
        ("conv3d[3x1x1 stride 3]", (3, 1, 1), 3, (0, 0, 0)),
    ):
        x = _t(rng, 2, 2, 6, 5, 4, name="x")
        w = _t(rng, 3, 2, *ksize, name="w")
        cases.append((label, lambda x, w, s=stride, p=pad: core.conv3d(x, ConvKernel3(w, s, p)), [x, w]))
    cases += [
        ("leaky_relu", lambda x: core.leaky_relu(x, 0.01), [_t(rng, 2, 3, 4, 5, 4)]),
        ("add", core.add, [_t(rng, 2, 3, 4), _t(rng, 2, 3, 4)]),
        ("scale", lambda x: core.scale(x, 0.37), [_t(rng, 3, 4)]),
        ("mean_over_time", core.mean_over_time, [_t(rng, 2, 3, 5, 4, 3)]),
        ("subtract_broadcast", core.subtract_broadcast, [_t(rng, 2, 3, 5, 4, 3), _t(rng, 2, 3, 1, 4, 3)]),
        ("max_over_time", core.max_over_time, [_t(rng, 2, 3, 5, 4, 3)]),
        ("maxpool_spatial", lambda x: core.maxpool_spatial(x, (2, 2)), [_t(rng, 2, 2, 3, 4, 6)]),
        ("strip_pool", lambda x: core.strip_pool(x, 4), [_t(rng, 2, 3, 1, 8, 3)]),
        ("strip_linear", core.strip_linear, [_t(rng, 3, 4, 5), _t(rng, 4, 6, 5)]),
        ("add_bias", core.add_bias, [_t(rng, 3, 4, 5), _t(rng, 4, 5)]),
    ]
    return cases


def loss_cases(rng):
    labels = np.array([0, 0, 1, 1, 2, 2])
    # well-separated random embeddings keep every hinge away from its kink
    emb = Tensor(rng.standard_normal((6, 3, 4)), requires_grad=True, name="embeddings")
    logits = Tensor(rng.standard_normal((6, 3, 5)), requires_grad=True, name="logits")
    return [
        ("triplet_ba", lambda e: triplet_ba(e, labels, 0.2)[0], [emb]),
        ("cross_entropy", lambda z: cross_entropy_strips(z, labels), [logits]),
    ]


def end_to_end(rng, eps=1e-4, sample=0.2):
    """Tiny network + combined loss, every parameter sampled."""
    from dygait.train import init_params

    config = ModelConfig(stage_channels=(3, 4), pool_after=(0,), strips=2, embed_dim=4, input_size=(8, 6))
    params = init_params(config, seed=int(rng.integers(2**31)), n_classes=3, dtype=np.float64)
    for t in params.values():
        t.data = t.data * 3.0  # larger weights keep gradients well above round-off
    labels = np.array([0, 0, 1, 1, 2, 2])
    x = (rng.random((6, 1, 6, 8, 6)) < 0.4).astype(np.float64)
    names = list(params)

    def fn(*ts):
        for name, t in zip(names, ts):
            params[name] = t
        emb = network_forward(x, params, config)
        loss, _ = combined_loss(Batch(emb, labels, class_logits(emb, params)), 0.2)
        return loss

    res = core.check_gradients(fn, [params[n] for n in names], eps=eps, sample=sample, rng=rng)
    return SuiteResult("network+loss", res.max_rel_error, END_TO_END_TOL, res.checked)


def run_suite(perturb=(), seed=0, include_end_to_end=True):
    """Run every case; ``perturb`` names ops whose backward is deliberately scaled (test hook)."""
    rng = np.random.default_rng(seed)
    saved = set(core.PERTURBED_OPS)
    core.PERTURBED_OPS.clear()
    core.PERTURBED_OPS.update(perturb)
    try:
        results = [_case(name, op, inputs, rng) for name, op, inputs in op_cases(rng) + loss_cases(rng)]
        if include_end_to_end:
            results.append(end_to_end(rng))
    finally:
        core.PERTURBED_OPS.clear()
        core.PERTURBED_OPS.update(saved)
    return results


def format_report(results):
    lines = [f"{'operation':<26} {'max rel error':>14} {'tolerance':>10}  result"]
    for r in results:
        lines.append(f"{r.op:<26} {r.max_rel_error:>14.3e} {r.tol:>10.0e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
