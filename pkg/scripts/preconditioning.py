"""Preconditioning on vs off across noise seeds, plus multipliers at two depths.

    python3 scripts/preconditioning.py --seeds 1 2 3
"""
import argparse

import numpy as np

from rigrefine.optimizer import RefineConfig, compute_preconditioner, iterations_to_fraction, run_refinement
from rigrefine.rig import effective_pose
from rigrefine.synthetic import NoiseSpec, SceneConfig, generate_scene, perturb, synthesize_matches


def multipliers_at_depth(depth, n=200, seed=0):
    rng = np.random.default_rng(seed)
    scene = generate_scene(SceneConfig(num_frames=4, num_landmarks=40, seed=seed))
    pts, views = [], []
    for _ in range(n):
        f = int(rng.integers(0, len(scene.trajectory)))
        c = scene.rig.camera_ids[int(rng.integers(0, len(scene.rig.cameras)))]
        pose = effective_pose(scene.trajectory, scene.rig, f, c)
        pts.append(pose.apply(depth * np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4), 1.0])))
        views.append((f, c))
    return compute_preconditioner(scene.trajectory, scene.rig, np.array(pts), views).multipliers


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3], help="noise seeds")
    p.add_argument("--level", type=float, default=0.5, help="rotation noise level (deg)")
    p.add_argument("--max-iter", type=int, default=5000, help="iterations per run")
    args = p.parse_args()

    for depth in (2.0, 50.0):
        m = multipliers_at_depth(depth)
        print(f"depth {depth:4.0f} m: " + ", ".join(f"{g} {v:.3f}" for g, v in m.items()))

    scene = generate_scene(SceneConfig())
    matches = synthesize_matches(scene)
    print(f"{'seed':>4} {'it95 on':>8} {'it95 off':>8} {'Ep-e on':>9} {'Ep-e off':>9}")
    for seed in args.seeds:
        noisy = perturb(scene, NoiseSpec.rotation_level(args.level, seed=seed))
        out = {}
        for on in (True, False):
            h = run_refinement(
                noisy.trajectory, noisy.rig, matches, RefineConfig(max_iter=args.max_iter, precondition_enabled=on)
            ).history
            out[on] = (iterations_to_fraction(h.epe), h.epe[-1])
        print(f"{seed:4d} {out[True][0]:8d} {out[False][0]:8d} {out[True][1]:9.5f} {out[False][1]:9.5f}", flush=True)


if __name__ == "__main__":
    main()
