"""Reverse-mode backward pass and a central-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, record_kinks


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) through the recorded graph.

    Every reachable leaf with ``requires_grad`` gets its ``.grad`` set (replacing
    any previous value). Returns a map from those leaves to their gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached: no input requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64).reshape(parent.shape)
    for leaf, g in leaves.items():
        leaf.grad = g
    return leaves


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    skipped: int
    worst: tuple = field(default=())


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6,
               tol: float = 1e-4, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``params`` are leaf tensors that ``f`` closes over; they are perturbed in
    place one coordinate at a time and restored. The relative error of a
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``. Coordinates
    whose perturbation changes a relu/max/clamp branch are skipped.
    ``max_coords`` samples that many coordinates (using ``rng``) instead of
    sweeping all of them.
    """
    if not 0 < step <= 1e-3:
        raise ValueError(f"step must lie in (0, 1e-3], got {step}")
    for p in params:
        p.requires_grad = True
        p.grad = None
    with record_kinks() as base_kinks:
        loss = f()
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst_err, worst, checked, skipped = 0.0, (), 0, 0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        hi = flat[j]
        with record_kinks() as kp:
            fp = f().item()
        flat[j] = orig - step
        lo = flat[j]
        with record_kinks() as km:
            fm = f().item()
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"f is not finite near parameter {i}, coordinate {j}")
        if not (_same(kp, base_kinks) and _same(km, base_kinks)):
            skipped += 1
            continue
        # divide by the step actually taken; orig +- step is rounded
        numeric = (fp - fm) / (hi - lo)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / max(1.0, abs(a))
        checked += 1
        if err > worst_err:
            worst_err, worst = err, (i, j, a, numeric)
    return GradCheckReport(float(worst_err), bool(worst_err < tol), checked, skipped, worst)


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))
