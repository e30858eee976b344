"""Per-block gradient audits: every hand-written backward pass against a
central finite-difference oracle on a tiny configuration.

Blocks are named module.op ("encoder.kernel", "attention.layer", ...). A
sabotage prefix corrupts the analytic gradient of every matching block so
the harness can prove the audit actually detects wrong gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    DistanceBiasParams,
    LayerParams,
    PairBias,
    attend_bwd,
    attend_fwd,
    init_distance_bias,
    init_layer,
    init_pair_bias,
    pair_bias_bwd,
    pair_bias_fwd,
)
from .data import SyntheticSpec, gen_rs
from .encoder import (
    KernelBank,
    init_kernel_bank,
    kernel_bwd,
    kernel_fwd,
    kernel_forward,
    regularization_grad,
    regularization_loss,
)
from .model import (
    FROZEN_PARAMS,
    ModelConfig,
    batch_step_classify,
    dataset_to_pairs,
    init_model,
    named_parameters,
)
from .numerics import (
    compare_grads,
    det3,
    finite_diff_grad,
    layer_norm_rows,
    layer_norm_rows_backward,
)

TINY_CONFIG = ModelConfig(h=8, d_p=4, n_layers=2, n_heads=2, n_gkpt=8, seed=1)

BLOCKS = (
    "encoder.kernel",
    "encoder.reg_loss",
    "numerics.layer_norm",
    "attention.distance_bias",
    "attention.layer",
    "model.predictor",
    "model.full_loss",
)


@dataclass
class BlockReport:
    name: str
    max_rel_error: float
    passed: bool


def _nonsingular_mc(rng, n, floor=0.3):
    out = []
    while len(out) < n:
        m = rng.standard_normal((3, 3))
        if abs(det3(m)) >= floor:
            out.append(m)
    return np.stack(out)


def _check_kernel(rng):
    bank = init_kernel_bank(rng, 2, 4)
    bank.gamma[:] = rng.uniform(0.8, 1.2, 4)
    mc = _nonsingular_mc(rng, 2)
    weights = rng.standard_normal((2, 2))

    def f(theta):
        i = bank.w.size
        b = KernelBank(w=theta[:i].reshape(bank.w.shape), gamma=theta[i : i + 4], beta=bank.beta)
        return float((weights * kernel_forward(b, theta[i + 4 :].reshape(2, 3, 3))).sum())

    theta0 = np.concatenate([bank.w.ravel(), bank.gamma, mc.ravel()])
    numeric = finite_diff_grad(f, theta0)
    _, cache = kernel_fwd(bank, mc)
    d_w, d_gamma, d_mc = kernel_bwd(cache, weights)
    return np.concatenate([d_w.ravel(), d_gamma, d_mc.ravel()]), numeric


def _check_reg_loss(rng):
    bank = KernelBank(w=rng.standard_normal((2, 4, 3)), gamma=np.ones(4), beta=np.zeros(4))

    def f(theta):
        return regularization_loss(
            KernelBank(w=theta.reshape(bank.w.shape), gamma=bank.gamma, beta=bank.beta)
        )

    numeric = finite_diff_grad(f, bank.w.ravel())
    return regularization_grad(bank).ravel(), numeric


def _check_layer_norm(rng):
    x = rng.standard_normal((3, 8))
    gamma = rng.uniform(0.5, 1.5, 8)
    beta = rng.standard_normal(8)
    weights = rng.standard_normal((3, 8))

    def f(theta):
        xs = theta[:24].reshape(3, 8)
        out, _ = layer_norm_rows(xs, theta[24:32], theta[32:])
        return float((weights * out).sum())

    numeric = finite_diff_grad(f, np.concatenate([x.ravel(), gamma, beta]))
    _, cache = layer_norm_rows(x, gamma, beta)
    d_x, d_gamma, d_beta = layer_norm_rows_backward(weights, cache, gamma)
    return np.concatenate([d_x.ravel(), d_gamma, d_beta]), numeric


def _encoded_instance(rng, h=8):
    from .encoder import EncodedMolecule

    return EncodedMolecule(
        h_c=rng.standard_normal((3, h)),
        h_r=rng.standard_normal((3, h)),
        h_n=rng.standard_normal((2, h)),
        chiral_positions=rng.uniform(-2, 2, (2, 3)),
        related_positions=rng.uniform(-2, 2, (3, 3)),
        nonchiral_positions=rng.uniform(-2, 2, (2, 3)),
        related_indices=(0, 1, 2),
        nonchiral_indices=(3, 4),
    )


_BIAS_FIELDS = ("e1", "e2", "mu", "sigma", "w_p")


def _check_distance_bias(rng):
    params = init_distance_bias(rng, 4, 2)
    params.e1 += rng.normal(0, 0.3, params.e1.shape)
    params.sigma = rng.uniform(0.5, 1.5, 4)
    enc = _encoded_instance(rng)
    weights = rng.standard_normal((3, 5, 2))

    def f(theta):
        parts, i = {}, 0
        for name in _BIAS_FIELDS:
            arr = getattr(params, name)
            parts[name] = theta[i : i + arr.size].reshape(arr.shape)
            i += arr.size
        return float((weights * init_pair_bias(DistanceBiasParams(**parts), enc).p).sum())

    theta0 = np.concatenate([getattr(params, n).ravel() for n in _BIAS_FIELDS])
    numeric = finite_diff_grad(f, theta0)
    _, cache = pair_bias_fwd(params, enc)
    grads = pair_bias_bwd(params, cache, weights)
    return np.concatenate([grads[n].ravel() for n in _BIAS_FIELDS]), numeric


_LAYER_FIELDS = (
    "wq", "wk_r", "wv_r", "wk_n", "wv_n", "wo", "ff_w1", "ff_b1", "ff_w2",
    "ff_b2", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
)


def _check_attention_layer(rng):
    layer = init_layer(rng, 8, 2)
    h_c = rng.standard_normal((2, 8))
    h_r = rng.standard_normal((2, 8))
    h_n = rng.standard_normal((1, 8))
    p0 = rng.standard_normal((2, 3, 2))
    w_out = rng.standard_normal((2, 8))
    w_bias = rng.standard_normal((2, 3, 2))

    def f(theta):
        parts, i = {}, 0
        for name in _LAYER_FIELDS:
            arr = getattr(layer, name)
            parts[name] = theta[i : i + arr.size].reshape(arr.shape)
            i += arr.size
        hc = theta[i : i + 16].reshape(2, 8)
        hr = theta[i + 16 : i + 32].reshape(2, 8)
        hn = theta[i + 32 : i + 40].reshape(1, 8)
        pp = theta[i + 40 :].reshape(2, 3, 2)
        out, bias_out, _, _ = attend_fwd(
            LayerParams(**parts, n_heads=2), hc, hr, hn, PairBias(p=pp)
        )
        return float((w_out * out).sum() + (w_bias * bias_out.p).sum())

    theta0 = np.concatenate(
        [getattr(layer, n).ravel() for n in _LAYER_FIELDS]
        + [h_c.ravel(), h_r.ravel(), h_n.ravel(), p0.ravel()]
    )
    numeric = finite_diff_grad(f, theta0)
    _, _, _, cache = attend_fwd(layer, h_c, h_r, h_n, PairBias(p=p0))
    grads, d_hc, d_hr, d_hn, d_bias = attend_bwd(layer, cache, w_out, w_bias)
    analytic = np.concatenate(
        [grads[n].ravel() for n in _LAYER_FIELDS]
        + [d_hc.ravel(), d_hr.ravel(), d_hn.ravel(), d_bias.ravel()]
    )
    return analytic, numeric


def _check_predictor(rng):
    from .encoder import init_mlp2, mlp2_bwd, mlp2_fwd, Mlp2

    mlp = init_mlp2(rng, 8, 8, 2)
    x = rng.standard_normal((3, 8))
    weights = rng.standard_normal((3, 2))
    names = ("w1", "b1", "w2", "b2")

    def f(theta):
        parts, i = {}, 0
        for name in names:
            arr = getattr(mlp, name)
            parts[name] = theta[i : i + arr.size].reshape(arr.shape)
            i += arr.size
        out, _ = mlp2_fwd(Mlp2(**parts), theta[i:].reshape(3, 8))
        return float((weights * out).sum())

    theta0 = np.concatenate([getattr(mlp, n).ravel() for n in names] + [x.ravel()])
    numeric = finite_diff_grad(f, theta0)
    out, cache = mlp2_fwd(mlp, x)
    grads, d_x = mlp2_bwd(mlp, cache, weights)
    analytic = np.concatenate([grads[n].ravel() for n in names] + [d_x.ravel()])
    return analytic, numeric


def _check_full_loss(rng, config: ModelConfig):
    model = init_model(config)
    batch = dataset_to_pairs(gen_rs(SyntheticSpec(count=1, seed=int(rng.integers(1 << 16)),
                                                  spectator_range=(1, 2))))
    live = [(n, a) for n, a in named_parameters(model) if n not in FROZEN_PARAMS]

    def get_theta():
        return np.concatenate([a.ravel() for _, a in live])

    def set_theta(theta):
        i = 0
        for _, a in live:
            a[...] = theta[i : i + a.size].reshape(a.shape)
            i += a.size

    def f(theta):
        saved = get_theta()
        set_theta(theta)
        try:
            loss, _, _ = batch_step_classify(model, batch, reg_weight=0.1)
        finally:
            set_theta(saved)
        return loss

    theta0 = get_theta()
    numeric = finite_diff_grad(f, theta0)
    _, _, grads = batch_step_classify(model, batch, reg_weight=0.1)
    analytic = np.concatenate([grads[n].ravel() for n, _ in live])
    return analytic, numeric


_CHECKS = {
    "encoder.kernel": _check_kernel,
    "encoder.reg_loss": _check_reg_loss,
    "numerics.layer_norm": _check_layer_norm,
    "attention.distance_bias": _check_distance_bias,
    "attention.layer": _check_attention_layer,
    "model.predictor": _check_predictor,
}


def run_gradcheck(config: ModelConfig = TINY_CONFIG, seed: int = 1, tol: float = 1e-4,
                  sabotage: str | None = None, blocks=BLOCKS) -> list[BlockReport]:
    """Run every block audit; `sabotage` corrupts matching blocks' analytic
    gradients (negative control for the audit itself)."""
    reports = []
    for name in blocks:
        rng = np.random.default_rng(seed + hash(name) % 1000)
        if name == "model.full_loss":
            analytic, numeric = _check_full_loss(rng, config)
        else:
            analytic, numeric = _CHECKS[name](rng)
        if sabotage and name.startswith(sabotage):
            analytic = analytic * 1.02 + 0.01
        rep = compare_grads(analytic, numeric, tol=tol)
        reports.append(BlockReport(name=name, max_rel_error=rep.max_rel_error, passed=rep.passed))
    return reports
