"""Central-difference check of the hand-written backward passes."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, ReLU
from .repvgg import FusedBlock
from .train import loss


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_kind: dict[str, float]
    checked: dict[str, int]
    skipped: int
    worst: tuple[str, tuple, float, float] | None = field(default=None)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _kink_state(model: Layer, out: np.ndarray, target: np.ndarray) -> list[np.ndarray]:
    masks = [layer.mask.copy() for _, layer in model.named_layers() if isinstance(layer, (ReLU, FusedBlock))]
    masks.append(np.sign(out[:, 2] - target[:, 2]))
    return masks


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(
    model,
    stacks,
    raws,
    targets,
    alpha: float = 10.0,
    n_per_kind: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-7,
    train: bool = True,
    include_inputs: bool = True,
) -> GradCheckReport:
    """Compares analytic gradients of the training loss with central differences.

    Runs on a float64 copy of ``model``.  ``n_per_kind`` parameters are drawn per
    layer kind (all of them when a kind has fewer).  Perturbations that flip a
    ReLU mask or the sign of an SPL error are skipped and counted.  The relative
    error is ``|g - n| / max(|g|, |n|, floor)``.
    """
    net = copy.deepcopy(model).astype(np.float64)
    net.dtype = np.dtype(np.float64)
    stacks = np.asarray(stacks, dtype=np.float64)
    raws = np.asarray(raws, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    buffers = {k: v.copy() for k, v in net.named_buffers()}

    def restore():
        net.load_state_dict({**dict(net.named_params()), **{k: v.copy() for k, v in buffers.items()}})

    def evaluate(s, r):
        restore()
        out = net.forward(s, r, train=train)
        return loss(out, targets, alpha)[0], _kink_state(net, out, targets)

    restore()
    net.zero_grad()
    out = net.forward(stacks, raws, train=train)
    _, g_out = loss(out, targets, alpha)
    base_kinks = _kink_state(net, out, targets)
    d_stack, d_raw = net.backward(g_out)
    grads = {k: v.copy() for k, v in net.named_grads()}
    params = dict(net.named_params())

    rng = np.random.default_rng(seed)
    by_kind: dict[str, list[tuple[str, tuple]]] = {}
    for name, kind in net.param_kinds().items():
        by_kind.setdefault(kind, []).extend((name, idx) for idx in np.ndindex(params[name].shape))
    targets_list = {}
    for kind, entries in by_kind.items():
        pick = rng.choice(len(entries), min(n_per_kind, len(entries)), replace=False)
        targets_list[kind] = [("param",) + entries[i] for i in sorted(pick)]
    if include_inputs:
        for label, arr in (("stack", stacks), ("raw", raws)):
            flat = rng.choice(arr.size, min(n_per_kind // 2, arr.size), replace=False)
            targets_list.setdefault("input", []).extend(
                (label, label, np.unravel_index(i, arr.shape)) for i in sorted(flat)
            )

    per_kind: dict[str, float] = {}
    checked: dict[str, int] = {}
    skipped = 0
    worst = None
    for kind, items in targets_list.items():
        for source, name, idx in items:
            if source == "param":
                arr, analytic = params[name], grads[name][idx]
            else:
                arr = stacks if name == "stack" else raws
                analytic = (d_stack if name == "stack" else d_raw)[idx]
            orig = arr[idx]
            arr[idx] = orig + h
            f_plus, k_plus = evaluate(stacks, raws)
            arr[idx] = orig - h
            f_minus, k_minus = evaluate(stacks, raws)
            arr[idx] = orig
            if not (_same(k_plus, base_kinks) and _same(k_minus, base_kinks)):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            checked[kind] = checked.get(kind, 0) + 1
            if rel >= per_kind.get(kind, -1.0):
                per_kind[kind] = float(rel)
            if worst is None or rel > worst[3]:
                worst = (name, tuple(int(i) for i in idx), float(analytic), float(rel))
    restore()
    return GradCheckReport(max(per_kind.values(), default=0.0), per_kind, checked, skipped, worst)
