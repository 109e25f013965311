"""The full gradient-check suite: every primitive, the PA block, and the
tiny end-to-end network, all at float64 with central differences."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attention import PaBlockParams, pa_block
from .backbone import FUSIONS, NetworkConfig, build_network, forward
from .substrate import functional as F
from .substrate.gradcheck import check_gradients, check_probes
from .substrate.tensor import Tensor

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class GradReport:
    errors: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    tolerance: float = TOLERANCE
    # network probes whose +/-eps points fell on another relu/maxpool branch
    kink_probes: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        # an unresolved probe (NaN) counts as a failure
        return max((np.inf if np.isnan(v) else v for v in self.errors.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}


def _leaf(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def primitive_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    """Named zero-argument callables, each returning a max relative error."""
    def chk(build, tensors):
        r = np.random.default_rng(rng.integers(1 << 31))
        probe = build()
        w = Tensor(r.standard_normal(probe.shape))
        return lambda: check_gradients(lambda: F.sum(F.mul(build(), w)), tensors, eps=EPS)

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    x = _leaf(rng, 2, 3, 6, 6)
    w, bias = _leaf(rng, 4, 3, 3, 3, scale=0.5), _leaf(rng, 4)
    xd = _leaf(rng, 1, 3, 3, 3)
    wd, bd = _leaf(rng, 3, 2, 4, 4, scale=0.5), _leaf(rng, 2)
    xp = Tensor(rng.permutation(64).reshape(1, 1, 8, 8).astype(np.float64) / 7.0, requires_grad=True)
    xb = _leaf(rng, 4, 2, 3, 3)
    gamma, beta = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True), _leaf(rng, 2)
    # keep relu inputs away from the kink
    xr = Tensor(np.sign(rng.standard_normal((3, 4))) * rng.uniform(0.1, 1.0, (3, 4)), requires_grad=True)
    xs, xl = _leaf(rng, 3, 5), Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    u, v = _leaf(rng, 2, 3), _leaf(rng, 3)

    def bn_build():
        return F.batchnorm2d(xb, gamma, beta, F.RunningStats.fresh(2, np.float64))

    return {
        "matmul": chk(lambda: F.matmul(a, b), [a, b]),
        "conv2d": chk(lambda: F.conv2d(x, w, bias, stride=1, pad=1), [x, w, bias]),
        "conv2d_strided": chk(lambda: F.conv2d(x, w, bias, stride=3, pad=0), [x, w, bias]),
        "transposed_conv2d": chk(lambda: F.transposed_conv2d(xd, wd, bd), [xd, wd, bd]),
        "maxpool2d": chk(lambda: F.maxpool2d(xp), [xp]),
        "batchnorm2d": chk(bn_build, [xb, gamma, beta]),
        "relu": chk(lambda: F.relu(xr), [xr]),
        "sigmoid": chk(lambda: F.sigmoid(xs), [xs]),
        "exp": chk(lambda: F.exp(xs), [xs]),
        "log": chk(lambda: F.log(xl), [xl]),
        "softmax": chk(lambda: F.softmax(xs, axis=-1), [xs]),
        "softmax_axis0": chk(lambda: F.softmax(xs, axis=0), [xs]),
        "broadcast_add_mul": chk(lambda: F.mul(F.add(u, v), v), [u, v]),
        "div": chk(lambda: F.div(u, xl[:2, :3]), [u, xl]),
        "reshape_transpose": chk(lambda: F.transpose(F.reshape(a, (2, 6)), (1, 0)), [a]),
        "concat_getitem": chk(lambda: F.concat([a, a[:, 1:3]], axis=1), [a]),
        "mean": chk(lambda: F.mean(x, axis=(2, 3)), [x]),
    }


def pa_block_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    out = {}
    for as_printed in (False, True):
        params = PaBlockParams.init(3, rng)
        for t in params.tensors().values():
            t.data += 0.1 * rng.standard_normal(t.shape)
        pv, art = _leaf(rng, 1, 3, 4, 4, scale=0.3), _leaf(rng, 1, 3, 4, 4, scale=0.3)
        r = Tensor(rng.standard_normal((1, 6, 4, 4)))

        def fn(pv=pv, art=art, params=params, r=r, flag=as_printed):
            return F.sum(F.mul(pa_block(pv, art, params, eq3_as_printed=flag), r))

        tensors = [pv, art, *params.tensors().values()]
        out["pa_block" + ("_as_printed" if as_printed else "")] = (
            lambda fn=fn, tensors=tensors: check_gradients(fn, tensors, eps=EPS))
    return out


def network_probe_errors(fusion: str = "pa_msf", seed: int = 0, batch: int = 4, size: int = 32,
                         rng: np.random.Generator | None = None,
                         kinks: list[str] | None = None) -> dict[str, float]:
    """One random coordinate per named parameter group of a float64 tiny model.

    Parameter shapes do not depend on the spatial extent, so the network is
    probed on ``size``-pixel inputs. Perturbations replay the base point's
    relu masks and maxpool winners; labels of probes whose free evaluation
    would have crossed a kink are appended to ``kinks``.
    """
    rng = rng or np.random.default_rng(seed)
    model = build_network(NetworkConfig.tiny(fusion, dtype="float64"), seed)
    pv = rng.standard_normal((batch, 3, size, size))
    art = rng.standard_normal((batch, 3, size, size))
    r = Tensor(rng.standard_normal((batch, 2, size, size)))

    def fn():
        return F.sum(F.mul(forward(model, pv, art), r))

    probes = []
    for group, names in model.groups().items():
        t = model.params[names[rng.integers(len(names))]]
        probes.append((f"{fusion}:{group}", t, int(rng.integers(t.size))))
    results = check_probes(fn, probes, eps=EPS, frozen=True)
    if kinks is not None:
        kinks.extend(label for label, (_, k) in results.items() if k)
    return {label: err for label, (err, _) in results.items()}


def run_suite(seed: int = 0, fusions: tuple[str, ...] = FUSIONS, verbose: bool = False) -> GradReport:
    rng = np.random.default_rng(seed)
    report = GradReport()
    start = time.perf_counter()
    checks = {**primitive_checks(rng), **pa_block_checks(rng)}
    for name, fn in checks.items():
        report.errors[name] = fn()
        if verbose:
            print(f"{name:32s} {report.errors[name]:.2e}")
    for fusion in fusions:
        errs = network_probe_errors(fusion, seed=seed, rng=rng, kinks=report.kink_probes)
        report.errors.update(errs)
        if verbose:
            print(f"{'network:' + fusion:32s} {max(errs.values()):.2e} over {len(errs)} groups")
    report.seconds = time.perf_counter() - start
    return report
