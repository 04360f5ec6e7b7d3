"""Compression pipeline: projection training, kernel folding, relaxation.

The pipeline compresses a conv's output channels with an orthonormal-column
matrix P learned through the proxy parameterization, then folds P into the
producer's kernels and P^T into the consumer's, leaving no extra layer at
inference. Optional kernel relaxation and fine-tuning repair what folding
cannot express.

Reconstruction losses are normalized by the teacher target's squared norm in
every mode, so one learning-rate default behaves consistently across layers
and widths; per batch this scaling leaves the minimizer unchanged.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .costs import count_costs
from .errors import DegenerateSpectrumError, NumericError, ShapeError
from .optim import SgdOptimizer
from .proxy import init_proxy, phi, phi_matrix, reperturb
from .svd import grad_context, thin_svd

__all__ = [
    "reconstruction_loss",
    "mixture_loss",
    "student_block_forward",
    "fold_kernels",
    "fold_site",
    "TeacherSnapshot",
    "optimize_projection",
    "kernel_relaxation",
    "finetune",
    "compress_network",
    "evaluate_accuracy",
    "evaluate_recon",
]

DIVERGENCE_LIMIT = 1e6
RELAX_MOMENTUM = 0.9


# ---------------------------------------------------------------------------
# losses


def reconstruction_loss(student_out, teacher_out, normalize=False):
    """||teacher - student||_F^2, optionally divided by max(||teacher||^2, 1e-12)."""
    if student_out.data.shape != teacher_out.data.shape:
        raise ShapeError(
            f"reconstruction_loss: student {student_out.data.shape} vs "
            f"teacher {teacher_out.data.shape}"
        )
    loss = ad.frobenius_sq(ad.sub(teacher_out, student_out))
    if normalize:
        denom = max(float(np.sum(teacher_out.data * teacher_out.data)), 1e-12)
        loss = ad.scalar_mul(loss, 1.0 / denom)
    return loss


def mixture_loss(recon_terms, class_loss, gamma):
    """Sum of reconstruction terms plus gamma times the classification loss."""
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    total = None
    for term in recon_terms:
        total = term if total is None else ad.add(total, term)
    if class_loss is not None and gamma > 0:
        scaled = ad.scalar_mul(class_loss, gamma)
        total = scaled if total is None else ad.add(total, scaled)
    if total is None:
        total = Tensor(0.0)
    return total


# ---------------------------------------------------------------------------
# the projected two-layer composition and its folded equivalent


def student_block_forward(
    i_in,
    w_i,
    b_i,
    p,
    w_next,
    b_next,
    stride=1,
    padding=None,
    next_stride=1,
    next_padding=None,
    activation="relu",
):
    """G(G(I * W_i * P + b_i * P) * P^T * W_next + b_next).

    The projection squeezes the producer's output channels to r before the
    activation; the transpose restores the consumer's expected width. With
    ``activation="identity"`` the nonlinearities are skipped.
    """
    if activation not in ("relu", "identity"):
        raise ValueError(f"unknown activation {activation!r}")
    act = ad.relu if activation == "relu" else (lambda t: t)
    w_i = w_i if isinstance(w_i, Tensor) else Tensor(w_i)
    w_next = w_next if isinstance(w_next, Tensor) else Tensor(w_next)
    b_i = b_i if isinstance(b_i, Tensor) else Tensor(b_i)
    b_next = b_next if isinstance(b_next, Tensor) else Tensor(b_next)
    p = p if isinstance(p, Tensor) else Tensor(p)
    if padding is None:
        padding = w_i.data.shape[2] // 2
    if next_padding is None:
        next_padding = w_next.data.shape[2] // 2
    z = ad.conv2d(i_in, w_i, b_i, stride=stride, padding=padding)
    zp = ad.channel_project(z, p)
    a = act(zp)
    ar = ad.channel_project(a, ad.transpose2d(p))
    z2 = ad.conv2d(ar, w_next, b_next, stride=next_stride, padding=next_padding)
    return act(z2)


# ---------------------------------------------------------------------------
# folding


def fold_kernels(w_i, b_i, p, w_next):
    """Absorb P into the producer and P^T into the consumer.

    W_i^O[j] = sum_m P[m, j] W_i[m]         -> [r, c_in, k, k]
    b_i^O    = P^T b_i                      -> [r]
    W_next^I[o, j] = sum_m P[m, j] W_next[o, m] -> [c_next_out, r, k, k]
    """
    w_i = np.asarray(w_i, dtype=np.float64)
    b_i = np.asarray(b_i, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    w_next = np.asarray(w_next, dtype=np.float64)
    if w_i.ndim != 4 or w_next.ndim != 4 or p.ndim != 2:
        raise ShapeError(
            f"fold_kernels: bad ranks w_i={w_i.shape} p={p.shape} "
            f"w_next={w_next.shape}"
        )
    c_out = w_i.shape[0]
    if p.shape[0] != c_out:
        raise ShapeError(f"P rows {p.shape[0]} != producer channels {c_out}")
    if b_i.shape != (c_out,):
        raise ShapeError(f"bias shape {b_i.shape} != ({c_out},)")
    if w_next.shape[1] != c_out:
        raise ShapeError(
            f"consumer input channels {w_next.shape[1]} != producer {c_out}"
        )
    w_o = np.einsum("mikl,mj->jikl", w_i, p)
    b_o = p.T @ b_i
    w_next_in = np.einsum("omkl,mj->ojkl", w_next, p)
    return w_o, b_o, w_next_in


def _fold_linear_input(w_lin, p):
    """Fold P^T into a linear layer reading flattened channel-major features."""
    out_f, in_f = w_lin.shape
    c = p.shape[0]
    if in_f % c != 0:
        raise ShapeError(
            f"linear input width {in_f} is not a multiple of channels {c}"
        )
    hw = in_f // c
    w3 = w_lin.reshape(out_f, c, hw)
    folded = np.einsum("ocs,cr->ors", w3, p)
    return folded.reshape(out_f, p.shape[1] * hw)


def fold_site(net, site, p):
    """Fold P into the graph at a site, shrinking producer and consumer."""
    p = np.asarray(p, dtype=np.float64)
    producer = net.conv_by_name(site)
    kind, consumer = net.consumer_of(site)
    if kind == "conv":
        w_o, b_o, w_next_in = fold_kernels(
            producer.w.data, producer.b.data, p, consumer.w.data
        )
        producer.w.data = w_o
        producer.b.data = b_o
        consumer.w.data = w_next_in
    else:
        if p.shape[0] != producer.c_out:
            raise ShapeError(
                f"P rows {p.shape[0]} != producer channels {producer.c_out}"
            )
        producer.w.data = np.einsum("mikl,mj->jikl", producer.w.data, p)
        producer.b.data = p.T @ producer.b.data
        consumer.w.data = _fold_linear_input(consumer.w.data, p)


# ---------------------------------------------------------------------------
# teacher


class TeacherSnapshot:
    """Frozen copy of the uncompressed network plus target extraction."""

    def __init__(self, net):
        self.net = net.clone()
        for t in self.net.parameters():
            t.requires_grad = False
        self.param_hash = self.net.param_hash()

    def targets(self, x, tap_names):
        out, taps = self.net.forward(x, record_taps=True)
        wanted = {}
        for name in tap_names:
            if name not in taps:
                raise KeyError(f"teacher has no tap {name!r}")
            wanted[name] = taps[name].data
        return wanted

    def logits(self, x):
        out, _ = self.net.forward(x)
        return out.data

    def check_unchanged(self):
        if self.net.param_hash() != self.param_hash:
            raise AssertionError("teacher parameters were mutated")


# ---------------------------------------------------------------------------
# helpers


@contextmanager
def _frozen_params(net):
    tensors = net.parameters()
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag


def _site_seed(base_seed, site):
    return (base_seed * 1_000_003 + sum(ord(ch) for ch in site)) % (2**31)


def _warm_start(producer, r):
    """Top-r left singular vectors of the unfolded kernel; None if ill-posed."""
    c_out = producer.c_out
    if r == c_out:
        return np.eye(c_out)
    wmat = producer.w.data.reshape(c_out, -1)
    if wmat.shape[1] < c_out or not np.all(np.isfinite(wmat)):
        return None
    factors = thin_svd(wmat.T)
    return factors.v[:, :r].copy()


def _spectrum_ok(x):
    try:
        grad_context(thin_svd(x))
    except DegenerateSpectrumError:
        return False
    return True


def _rescue_degenerate(proxies, base_seed, attempt):
    for site, proxy in proxies.items():
        if not _spectrum_ok(proxy.x.data):
            reperturb(proxy, seed=_site_seed(base_seed, site) + 7919 * (attempt + 1))


def _max_ortho_err(p):
    r = p.shape[1]
    return float(np.max(np.abs(p.T @ p - np.eye(r))))


def _cycle_batches(train_batches):
    epoch = 0
    while True:
        produced = False
        for batch in train_batches(epoch):
            produced = True
            yield batch
        if not produced:
            raise ValueError("empty batch stream")
        epoch += 1


# ---------------------------------------------------------------------------
# projection optimization


def optimize_projection(
    net,
    sites,
    plan,
    teacher,
    batch_fn,
    ranks=None,
    fixed_projections=None,
    normalize=True,
):
    """SGD on the proxy matrices of ``sites`` through the student forward.

    ``batch_fn(step)`` supplies (images, labels). Teacher targets are taken
    at each site's target tap from the frozen snapshot; the class term uses
    the plan's gamma. Only proxies receive updates; network kernels are
    frozen for the duration. Returns (projections, stats) where projections
    maps site -> orthonormal P array.
    """
    sites = list(sites)
    if not sites:
        return {}, {"losses": [], "ortho_errors": [], "max_ortho_err": 0.0,
                    "reperturb_events": 0}
    if ranks is None:
        ranks = plan.resolved_ranks(net)
    proxies = {}
    for site in sites:
        producer = net.conv_by_name(site)
        r = ranks[site]
        warm = _warm_start(producer, r)
        proxies[site] = init_proxy(
            producer.c_out, r, seed=_site_seed(plan.seed, site), warm_start=warm
        )
    fixed = {
        site: Tensor(np.asarray(p, dtype=np.float64))
        for site, p in (fixed_projections or {}).items()
    }
    tap_of = {site: net.target_tap(site) for site in sites}
    opt = SgdOptimizer(
        [proxies[s].x for s in sites],
        lr=plan.projection_lr,
        momentum=plan.projection_momentum,
    )
    losses = []
    ortho_errors = []
    reperturb_events = 0

    with _frozen_params(net):
        for step in range(plan.projection_steps):
            x, y = batch_fn(step)
            teacher_taps = teacher.targets(x, set(tap_of.values()))
            for attempt in range(10):
                try:
                    opt.zero_grad()
                    with ad.Tape() as tape:
                        overlay = dict(fixed)
                        for site in sites:
                            overlay[site] = phi(proxies[site])
                        out, taps = net.forward(
                            x, projections=overlay, record_taps=True
                        )
                        recon_terms = [
                            reconstruction_loss(
                                taps[tap_of[s]],
                                Tensor(teacher_taps[tap_of[s]]),
                                normalize=normalize,
                            )
                            for s in sites
                        ]
                        class_loss = (
                            ad.softmax_cross_entropy(out, y)
                            if plan.gamma > 0
                            else None
                        )
                        loss = mixture_loss(recon_terms, class_loss, plan.gamma)
                    break
                except DegenerateSpectrumError:
                    reperturb_events += 1
                    _rescue_degenerate(proxies, plan.seed, attempt)
            else:
                raise NumericError(
                    f"projection step {step}: spectrum still degenerate after "
                    f"repeated reperturbation"
                )
            value = loss.item()
            if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise NumericError(
                    f"projection optimization diverged at step {step}: "
                    f"loss = {value:.6e} (sites {sites})"
                )
            tape.backward(loss)
            opt.step()
            losses.append(value)
            step_err = max(
                _max_ortho_err(phi_matrix(proxies[s].x.data)) for s in sites
            )
            ortho_errors.append(step_err)

    projections = {s: phi_matrix(proxies[s].x.data) for s in sites}
    stats = {
        "losses": losses,
        "ortho_errors": ortho_errors,
        "max_ortho_err": max(ortho_errors) if ortho_errors else 0.0,
        "reperturb_events": reperturb_events,
    }
    return projections, stats


# ---------------------------------------------------------------------------
# relaxation and fine-tuning


def _folded_tensors(net, sites):
    tensors = []
    seen = set()

    def push(t):
        if id(t) not in seen:
            seen.add(id(t))
            tensors.append(t)

    for site in sites:
        producer = net.conv_by_name(site)
        push(producer.w)
        push(producer.b)
        _, consumer = net.consumer_of(site)
        push(consumer.w)
    return tensors


def _effective_taps(net, sites):
    """Reconstruction taps that keep their shape after folding.

    A chain site's target tap sits on its consumer's output; when that
    consumer was itself compressed the tap narrows, so the target moves
    downstream until it lands on an untouched boundary. Block-output and
    logits taps never narrow. Duplicates collapse so no tap is counted twice.
    """
    site_set = set(sites)
    taps = []
    for site in sites:
        cur = site
        while net.block_of(cur) is None:
            kind, consumer = net.consumer_of(cur)
            if kind == "conv" and consumer.name in site_set:
                cur = consumer.name
            else:
                break
        tap = net.target_tap(cur)
        if tap not in taps:
            taps.append(tap)
    return taps


def _mixture_on_taps(net, tap_names, teacher, x, y, gamma):
    teacher_taps = teacher.targets(x, tap_names)
    out, taps = net.forward(x, record_taps=True)
    recon_terms = [
        reconstruction_loss(taps[t], Tensor(teacher_taps[t]), normalize=True)
        for t in tap_names
    ]
    class_loss = ad.softmax_cross_entropy(out, y) if gamma > 0 else None
    return mixture_loss(recon_terms, class_loss, gamma)


def kernel_relaxation(net, plan, teacher, train_batches, sites):
    """SGD on the folded kernels and biases only; proxies are gone by now."""
    sites = list(sites)
    if plan.relaxation_epochs == 0 or not sites:
        return {"losses": []}
    trainable = _folded_tensors(net, sites)
    tap_names = _effective_taps(net, sites)
    opt = SgdOptimizer(trainable, lr=plan.relaxation_lr, momentum=RELAX_MOMENTUM)
    trainable_ids = {id(t) for t in trainable}
    others = [t for t in net.parameters() if id(t) not in trainable_ids]
    saved = [t.requires_grad for t in others]
    for t in others:
        t.requires_grad = False
    losses = []
    try:
        for epoch in range(plan.relaxation_epochs):
            for x, y in train_batches(epoch):
                opt.zero_grad()
                with ad.Tape() as tape:
                    loss = _mixture_on_taps(
                        net, tap_names, teacher, x, y, plan.gamma
                    )
                value = loss.item()
                if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                    raise NumericError(
                        f"kernel relaxation diverged (epoch {epoch}): {value:.6e}"
                    )
                tape.backward(loss)
                opt.step()
                losses.append(value)
    finally:
        for t, flag in zip(others, saved):
            t.requires_grad = flag
    return {"losses": losses}


def finetune(net, plan, teacher, train_batches, sites):
    """Mixture-loss training of all parameters with cosine-decayed lr."""
    sites = list(sites)
    if plan.finetune_epochs == 0:
        return {"losses": []}
    tap_names = _effective_taps(net, sites)
    opt = SgdOptimizer(net.parameters(), lr=plan.finetune_lr, momentum=RELAX_MOMENTUM)
    schedule = []
    for epoch in range(plan.finetune_epochs):
        schedule.extend((epoch, batch) for batch in train_batches(epoch))
    total = len(schedule)
    losses = []
    for t, (epoch, (x, y)) in enumerate(schedule):
        opt.lr = plan.finetune_lr * 0.5 * (1.0 + math.cos(math.pi * t / max(total, 1)))
        opt.zero_grad()
        with ad.Tape() as tape:
            if tap_names:
                loss = _mixture_on_taps(net, tap_names, teacher, x, y, plan.gamma)
            else:
                out, _ = net.forward(x)
                loss = ad.softmax_cross_entropy(out, y)
        value = loss.item()
        if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise NumericError(f"fine-tuning diverged at step {t}: {value:.6e}")
        tape.backward(loss)
        opt.step()
        losses.append(value)
    return {"losses": losses}


# ---------------------------------------------------------------------------
# evaluation


def evaluate_accuracy(net, batches):
    """Fraction of correct argmax predictions over a batch list."""
    correct = 0
    total = 0
    for x, y in batches:
        out, _ = net.forward(x)
        pred = np.argmax(out.data, axis=1)
        correct += int(np.sum(pred == np.asarray(y)))
        total += len(y)
    if total == 0:
        raise ValueError("no evaluation data")
    return correct / total


def evaluate_recon(net, teacher, sites, batches):
    """Total normalized reconstruction error at the sites' surviving taps.

    Returns sum ||t - s||^2 / sum ||t||^2 accumulated over all batches and
    taps, with taps remapped past compressed consumers.
    """
    tap_names = _effective_taps(net, list(sites))
    num = 0.0
    den = 0.0
    for x, _ in batches:
        teacher_taps = teacher.targets(x, tap_names)
        _, taps = net.forward(x, record_taps=True)
        for tap in tap_names:
            t = teacher_taps[tap]
            s = taps[tap].data
            num += float(np.sum((t - s) ** 2))
            den += float(np.sum(t * t))
    return num / max(den, 1e-12)


# ---------------------------------------------------------------------------
# orchestration


def _two_round_partition(net, active_sites):
    """Split block-internal sites into alternating rounds, per block.

    Within each residual block, its compressible convs are numbered 1, 2,
    ... in order; round one takes the odd positions, round two the even.
    Chain sites always train in round one.
    """
    round1, round2 = [], []
    by_block = {}
    for site in active_sites:
        block = net.block_of(site)
        if block is None:
            round1.append(site)
        else:
            by_block.setdefault(block.name, []).append(site)
    for _, block_sites in sorted(by_block.items()):
        for idx, site in enumerate(block_sites):
            (round1 if idx % 2 == 0 else round2).append(site)
    order = {s: i for i, s in enumerate(active_sites)}
    round1.sort(key=order.get)
    round2.sort(key=order.get)
    return round1, round2


def compress_network(net, plan, train_batches, eval_batches=None):
    """Run the full pipeline; returns (compressed net, report, stats).

    ``train_batches(epoch)`` must yield (images, labels) deterministically;
    ``eval_batches`` is a reusable list for the accuracy fields. The input
    network is left untouched.
    """
    plan.validate(net)
    ranks = plan.resolved_ranks(net)
    teacher = TeacherSnapshot(net)
    original_costs = count_costs(net, batch=1)
    net_c = net.clone()
    active = {
        site: r
        for site, r in ranks.items()
        if r < net.conv_by_name(site).c_out
    }
    stream = _cycle_batches(train_batches)

    def batch_fn(step):
        return next(stream)

    stats = {
        "ortho_errors": [],
        "max_ortho_err": 0.0,
        "reperturb_events": 0,
        "projection_losses": {},
    }

    def merge(site_key, st):
        stats["ortho_errors"].extend(st["ortho_errors"])
        stats["max_ortho_err"] = max(stats["max_ortho_err"], st["max_ortho_err"])
        stats["reperturb_events"] += st["reperturb_events"]
        stats["projection_losses"][site_key] = st["losses"]

    sites_order = list(active)
    if plan.mode == "single_layer":
        found = {}
        for site in sites_order:
            projections, st = optimize_projection(
                net_c, [site], plan, teacher, batch_fn, ranks=ranks
            )
            merge(site, st)
            found[site] = projections[site]
        for site in sites_order:
            fold_site(net_c, site, found[site])
    elif plan.mode == "cascaded_greedy":
        for site in sites_order:
            projections, st = optimize_projection(
                net_c, [site], plan, teacher, batch_fn, ranks=ranks
            )
            merge(site, st)
            fold_site(net_c, site, projections[site])
    else:  # simultaneous
        round1, round2 = (
            _two_round_partition(net_c, sites_order)
            if plan.two_round
            else (sites_order, [])
        )
        found = {}
        if round1:
            projections, st = optimize_projection(
                net_c, round1, plan, teacher, batch_fn, ranks=ranks
            )
            merge("+".join(round1), st)
            found.update(projections)
        if round2:
            projections, st = optimize_projection(
                net_c,
                round2,
                plan,
                teacher,
                batch_fn,
                ranks=ranks,
                fixed_projections={s: found[s] for s in round1},
            )
            merge("+".join(round2), st)
            found.update(projections)
        for site in sites_order:
            fold_site(net_c, site, found[site])

    relax_stats = kernel_relaxation(net_c, plan, teacher, train_batches, sites_order)
    stats["relaxation_losses"] = relax_stats["losses"]

    acc_no_ft = (
        evaluate_accuracy(net_c, eval_batches) if eval_batches is not None else None
    )
    ft_stats = finetune(net_c, plan, teacher, train_batches, sites_order)
    stats["finetune_losses"] = ft_stats["losses"]
    acc_ft = (
        evaluate_accuracy(net_c, eval_batches)
        if (eval_batches is not None and plan.finetune_epochs > 0)
        else acc_no_ft
    )
    base_acc = (
        evaluate_accuracy(teacher.net, eval_batches)
        if eval_batches is not None
        else None
    )
    teacher.check_unchanged()

    compressed_costs = count_costs(net_c, batch=1)

    def pct(num, den):
        return 100.0 * num / den if den else 100.0

    report = {
        "schema_version": 1,
        "mode": plan.mode,
        "gamma": plan.gamma,
        "seed": plan.seed,
        "projection_steps": plan.projection_steps,
        "relaxation_epochs": plan.relaxation_epochs,
        "finetune_epochs": plan.finetune_epochs,
        "flops_pct": pct(compressed_costs.flops, original_costs.flops),
        "param_pct": pct(compressed_costs.param_count, original_costs.param_count),
        "peak_mem_pct": pct(
            compressed_costs.peak_activation_bytes,
            original_costs.peak_activation_bytes,
        ),
        "acc_no_ft": acc_no_ft,
        "acc_ft": acc_ft,
        "base_acc": base_acc,
        "costs": {
            "original": original_costs.to_dict(),
            "compressed": compressed_costs.to_dict(),
        },
    }
    return net_c, report, stats
