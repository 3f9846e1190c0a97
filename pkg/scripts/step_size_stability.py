"""Largest eigenvalue of the step-scaled Hessian at an exact solution.

Heavy-ball descent with momentum b is stable on a quadratic only while
lr * lambda_max(H) < 2 (1 + b).  This measures lambda_max of
diag(lr)^1/2 H diag(lr)^1/2 per parameter block (power iteration on
Hessian-vector products), i.e. how much headroom a set of rates leaves.

    python3 scripts/step_size_stability.py --lr-extrinsic 5e-5 --lr-intrinsic 1e-2
"""
import argparse

import jax
import jax.numpy as jnp
import numpy as np

from rigrefine.optimizer import (
    Problem,
    RefineConfig,
    _step_sizes,
    compute_preconditioner,
    triangulated_samples,
)
from rigrefine.synthetic import SceneConfig, generate_scene, synthesize_matches

BLOCKS = {
    "device (phi)": ("phi_rot", "phi_trans"),
    "rig (rho)": ("rho_rot", "rho_trans"),
    "intrinsics": ("fx", "fy", "cx", "cy"),
    "all": None,
}


def top_eigenvalue(problem, lr, temp, iters):
    d = jnp.asarray(np.sqrt(lr))
    x0 = jnp.asarray(problem.x0)
    grad = jax.grad(lambda x: problem._evaluate(x, temp)[0])
    hvp = jax.jit(lambda v: d * jax.jvp(grad, (x0,), (d * v,))[1])
    v = np.random.default_rng(0).standard_normal(lr.size) * (lr > 0)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = np.asarray(hvp(jnp.asarray(v)))
        lam = float(v @ w)
        v = w / np.linalg.norm(w)
    return lam


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    defaults = RefineConfig()
    p.add_argument("--lr-extrinsic", type=float, default=defaults.lr_extrinsic, help="peak pose rate")
    p.add_argument("--lr-intrinsic", type=float, default=defaults.lr_intrinsic, help="peak relative intrinsic rate")
    p.add_argument("--no-precondition", action="store_true", help="leave preconditioning out of the rates")
    p.add_argument("--temperature", type=float, default=1.0, help="barrier temperature")
    p.add_argument("--iters", type=int, default=200, help="power iterations")
    args = p.parse_args()

    cfg = RefineConfig(lr_extrinsic=args.lr_extrinsic, lr_intrinsic=args.lr_intrinsic,
                       precondition_enabled=not args.no_precondition)
    scene = generate_scene(SceneConfig())
    matches = synthesize_matches(scene)
    problem = Problem(scene.trajectory, scene.rig, matches, cfg.weights, cfg.bounds)
    rates = None
    if cfg.precondition_enabled:
        pts, views = triangulated_samples(scene.trajectory, scene.rig, matches, cfg.precondition_samples, cfg.seed)
        rates = compute_preconditioner(scene.trajectory, scene.rig, pts, views)
    lr = _step_sizes(problem, cfg, rates)
    groups = np.array([str(g) for g in problem.layout.groups])
    limit = 2 * (1 + cfg.momentum)
    for name, members in BLOCKS.items():
        block = lr if members is None else lr * np.isin(groups, members)
        lam = top_eigenvalue(problem, block, args.temperature, args.iters)
        print(f"{name:<14} lr*lambda_max {lam:9.4f}  (stable below {limit:.1f})", flush=True)


if __name__ == "__main__":
    main()
