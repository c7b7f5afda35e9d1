"""Experiment runner: seeded method comparisons, figure data products, and
the barycenter sample-complexity sweep.

Config is a flat `key = value` text file; every key can also be overridden
on the command line with `--set key=value`. Outputs are CSV (plus SVG for
policy maps) and are byte-identical across reruns with the same spec/seed.
"""

from __future__ import annotations

import argparse
import difflib
import os
import sys
import traceback
from dataclasses import dataclass, field, fields

import numpy as np

from . import baselines
from . import env as nav
from . import ot
from . import policy as pol
from . import trainer

ACTION_COLORS = {
    "stay": "#9e9e9e",  # gray
    "right": "#d62728",  # red
    "left": "#1f77b4",  # blue
    "up": "#2ca02c",  # green
    "down": "#ff7f0e",  # orange
}


class ConfigError(ValueError):
    pass


@dataclass
class SweepSpec:
    m_values: tuple = (50, 100, 200, 400, 800)
    replicates: int = 10
    n_measures: int = 3
    p: int = 2
    lattice_size: int = 64
    ref_multiplier: int = 20
    seed: int = 0
    diameter: float = 1.0  # compact domain [0, 1]


@dataclass
class ExperimentSpec:
    methods: tuple = ("wbc", "independent", "kl_reg", "param_share")
    seeds: tuple = (0, 1, 2, 3, 4)
    env: nav.WorldConfig = field(default_factory=nav.WorldConfig)
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    outputs: str = "outputs"
    sweep: SweepSpec = field(default_factory=SweepSpec)
    policy_map_resolution: int = 24


# config key -> (section, attribute, parser)
def _int_list(s):
    return tuple(int(v) for v in s.replace(",", " ").split())


def _str_list(s):
    return tuple(v for v in s.replace(",", " ").split() if v)


_CONFIG_KEYS = {
    "methods": ("spec", "methods", _str_list),
    "seeds": ("spec", "seeds", _int_list),
    "outputs": ("spec", "outputs", str),
    "policy_map_resolution": ("spec", "policy_map_resolution", int),
    "n_agents": ("env", "n_agents", int),
    "step_size": ("env", "step_size", float),
    "collision_radius": ("env", "collision_radius", float),
    "collision_penalty": ("env", "collision_penalty", float),
    "episode_length": ("env", "episode_length", int),
    "target_mode": ("env", "target_mode", str),
    "alpha": ("train", "alpha", float),
    "lambda0": ("train", "lambda0", float),
    "epsilon0": ("train", "epsilon0", float),
    "beta": ("train", "beta", float),
    "p": ("train", "p", int),
    "batch_episodes": ("train", "batch_episodes", int),
    "atoms_per_agent": ("train", "atoms_per_agent", int),
    "iterations": ("train", "iterations", int),
    "schedule": ("train", "schedule", str),
    "lambda_min": ("train", "lambda_min", float),
    "epsilon_min": ("train", "epsilon_min", float),
    "anneal_fraction": ("train", "anneal_fraction", float),
    "seed": ("train", "seed", int),
    "use_sliced_for_diagnostics": ("train", "use_sliced_for_diagnostics",
                                   lambda s: s.lower() in ("1", "true", "yes")),
    "grad_clip": ("train", "grad_clip", float),
    "consensus_scale": ("train", "consensus_scale", float),
    "use_clipped_surrogate": ("train", "use_clipped_surrogate",
                              lambda s: s.lower() in ("1", "true", "yes")),
    "clip_ratio": ("train", "clip_ratio", float),
    "grid_resolution": ("train", "grid_resolution", int),
    "sinkhorn_max_iters": ("train", "sinkhorn_max_iters", int),
    "sinkhorn_tol": ("train", "sinkhorn_tol", float),
    "sweep_m": ("sweep", "m_values", _int_list),
    "sweep_replicates": ("sweep", "replicates", int),
    "sweep_n_measures": ("sweep", "n_measures", int),
    "sweep_p": ("sweep", "p", int),
    "sweep_lattice_size": ("sweep", "lattice_size", int),
    "sweep_ref_multiplier": ("sweep", "ref_multiplier", int),
    "sweep_seed": ("sweep", "seed", int),
}


def parse_config(path=None, overrides=()):
    """Build a validated ExperimentSpec from a config file plus overrides."""
    pairs = []
    if path is not None:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, value = (part.strip() for part in line.split("=", 1))
                pairs.append((key, value, f"{path}:{lineno}"))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        pairs.append((key, value, f"--set {item}"))

    raw_env, raw_train, raw_spec, raw_sweep = {}, {}, {}, {}
    buckets = {"env": raw_env, "train": raw_train, "spec": raw_spec,
               "sweep": raw_sweep}
    for key, value, where in pairs:
        if key not in _CONFIG_KEYS:
            close = difflib.get_close_matches(key, _CONFIG_KEYS, n=1)
            hint = f" (did you mean {close[0]!r}?)" if close else ""
            raise ConfigError(f"{where}: unknown key {key!r}{hint}")
        section, attr, conv = _CONFIG_KEYS[key]
        try:
            buckets[section][attr] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from exc

    try:
        env_cfg = nav.WorldConfig(**raw_env)
        train_cfg = trainer.TrainConfig(**raw_train)
        sweep = SweepSpec(**raw_sweep)
        spec = ExperimentSpec(env=env_cfg, train=train_cfg, sweep=sweep,
                              **raw_spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for m in spec.methods:
        if m not in baselines.METHODS:
            raise ConfigError(
                f"unknown method {m!r}; valid: {', '.join(baselines.METHODS)}")
    if not spec.methods or not spec.seeds:
        raise ConfigError("need at least one method and one seed")
    return spec


# ---------------------------------------------------------------------------
# probe states

def probe_states(env_cfg):
    """Five canonical joint states: target right/left/up/down of each agent,
    plus a target-reached state. Agents sit on a line, 0.3 arena units apart.
    """
    n = env_cfg.n_agents
    lo, hi = env_cfg.lo, env_cfg.hi

    def line(y, x0=0.1, dx=0.3):
        xs = x0 + dx * np.arange(n)
        return np.clip(np.stack([xs, np.full(n, y)], axis=1), lo, hi)

    states = {}
    p = line(0.5)
    states["right"] = nav.JointState(p, np.clip(p + [0.3, 0.0], lo, hi))
    p = line(0.5, x0=0.4)
    states["left"] = nav.JointState(p, np.clip(p - [0.3, 0.0], lo, hi))
    p = line(0.2)
    states["up"] = nav.JointState(p, np.clip(p + [0.0, 0.3], lo, hi))
    p = line(0.8)
    states["down"] = nav.JointState(p, np.clip(p - [0.0, 0.3], lo, hi))
    p = line(0.5)
    states["near"] = nav.JointState(p, p.copy())
    return states


# ---------------------------------------------------------------------------
# figure data products

def emit_policy_map(policy, env_cfg, resolution, target, others, disc):
    """Argmax-action grid for one agent with target/other positions fixed.

    Returns (csv text, svg text). Ties in the argmax break toward the lowest
    action id (stay < right < left < up < down).
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    lo, hi = env_cfg.lo, env_cfg.hi
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    rows = ["x,y,action"]
    cells = []
    for y in ys:
        for x in xs:
            obs = np.concatenate([[x, y], target, np.ravel(others)])
            cell = disc.cell_of(obs)
            action = int(np.argmax(pol.action_probs(policy, cell)))
            name = ot.ACTION_NAMES[action]
            rows.append(f"{float(x)!r},{float(y)!r},{name}")
            cells.append((x, y, name))
    csv_text = "\n".join(rows) + "\n"
    svg_text = _policy_map_svg(cells, target, resolution, lo, hi)
    return csv_text, svg_text


def _policy_map_svg(cells, target, resolution, lo, hi, size=480):
    px = size / resolution
    span = hi - lo
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
        f'height="{size}" viewBox="0 0 {size} {size}">'
    ]
    for x, y, name in cells:
        cx = (x - lo[0]) / span[0] * (size - px)
        cy = (1.0 - (y - lo[1]) / span[1]) * (size - px)
        parts.append(
            f'<rect x="{cx:.2f}" y="{cy:.2f}" width="{px:.2f}" '
            f'height="{px:.2f}" fill="{ACTION_COLORS[name]}"/>'
        )
    tx = (target[0] - lo[0]) / span[0] * (size - px) + px / 2
    ty = (1.0 - (target[1] - lo[1]) / span[1]) * (size - px) + px / 2
    r_out, r_in = px * 0.9, px * 0.35
    pts = []
    for k in range(10):
        r = r_out if k % 2 == 0 else r_in
        ang = -np.pi / 2 + k * np.pi / 5
        pts.append(f"{tx + r * np.cos(ang):.2f},{ty + r * np.sin(ang):.2f}")
    parts.append(f'<polygon points="{" ".join(pts)}" fill="#ffd700" '
                 f'stroke="#333" stroke-width="1"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_prob_table(policies, states, env_cfg, disc):
    """CSV of per-agent action probabilities at each probe state."""
    rows = ["state,agent,action,probability"]
    for name, state in states.items():
        for i, policy in enumerate(policies):
            cell = disc.cell_of(nav.observe(state, i, env_cfg))
            probs = pol.action_probs(policy, cell)
            for a, prob in enumerate(probs):
                rows.append(f"{name},{i},{ot.ACTION_NAMES[a]},{float(prob)!r}")
    return "\n".join(rows) + "\n"


def probe_alignment(policies, states, env_cfg, disc):
    """Max over probe states and agent pairs of the total-variation distance
    between action distributions."""
    worst = 0.0
    for state in states.values():
        dists = []
        for i, policy in enumerate(policies):
            cell = disc.cell_of(nav.observe(state, i, env_cfg))
            dists.append(pol.action_probs(policy, cell))
        n = len(dists)
        for i in range(n):
            for j in range(i + 1, n):
                tv = 0.5 * np.abs(dists[i] - dists[j]).sum()
                worst = max(worst, float(tv))
    return worst


def modal_action_agreement(policies, states, env_cfg, disc):
    """Number of probe states at which all agents share the argmax action."""
    agree = 0
    for state in states.values():
        modes = set()
        for i, policy in enumerate(policies):
            cell = disc.cell_of(nav.observe(state, i, env_cfg))
            modes.add(int(np.argmax(pol.action_probs(policy, cell))))
        agree += len(modes) == 1
    return agree


# ---------------------------------------------------------------------------
# comparison runs

def run_comparison(spec, include_timing=False, progress=None):
    """Train every (method, seed) pair; returns (metrics rows, summary rows,
    trained policies dict, failures)."""
    os.makedirs(spec.outputs, exist_ok=True)
    disc = pol.ObsDiscretizer(grid_resolution=spec.train.grid_resolution)
    states = probe_states(spec.env)
    metrics_lines = []
    header_written = False
    results = {}
    failures = []
    for method in spec.methods:
        for seed in spec.seeds:
            tcfg = trainer.TrainConfig(**{
                **{f.name: getattr(spec.train, f.name)
                   for f in fields(trainer.TrainConfig)},
                "seed": seed,
            })
            try:
                diags, policies = trainer.run_training(spec.env, tcfg,
                                                       method=method)
            except Exception as exc:  # run failures recorded, runs proceed
                failures.append((method, seed, f"{type(exc).__name__}: {exc}"))
                continue
            csv_text = trainer.diagnostics_csv(diags, seed, method,
                                               spec.env.n_agents,
                                               include_timing)
            lines = csv_text.splitlines()
            if not header_written:
                metrics_lines.append(lines[0])
                header_written = True
            metrics_lines.extend(lines[1:])
            results[(method, seed)] = (diags, policies)
            pm_csv, pm_svg = emit_policy_map(
                policies[0], spec.env, spec.policy_map_resolution,
                target=np.array([0.5, 0.5]),
                others=np.array([[0.1, 0.1], [0.9, 0.9]])[: spec.env.n_agents - 1],
                disc=disc,
            )
            base = os.path.join(spec.outputs, f"policy_map_{method}_{seed}")
            with open(base + ".csv", "w") as fh:
                fh.write(pm_csv)
            with open(base + ".svg", "w") as fh:
                fh.write(pm_svg)
            with open(os.path.join(
                    spec.outputs, f"probe_probs_{method}_{seed}.csv"), "w") as fh:
                fh.write(emit_prob_table(policies, states, spec.env, disc))
            if progress:
                progress(method, seed, diags)

    summary = summarize(spec, results)
    with open(os.path.join(spec.outputs, "metrics.csv"), "w") as fh:
        fh.write("\n".join(metrics_lines) + "\n")
    with open(os.path.join(spec.outputs, "summary.csv"), "w") as fh:
        fh.write(summary_csv(summary))
    return metrics_lines, summary, results, failures


def final_window_reward(diags, fraction=0.1):
    w = max(1, int(round(len(diags) * fraction)))
    return float(np.mean([d.mean_team_reward for d in diags[-w:]]))


def summarize(spec, results):
    summary = []
    for method in spec.methods:
        finals, d_finals = [], []
        for seed in spec.seeds:
            if (method, seed) not in results:
                continue
            diags, _ = results[(method, seed)]
            finals.append(final_window_reward(diags))
            d_finals.append(diags[-1].d_t)
        if not finals:
            continue
        q1, med, q3 = np.percentile(finals, [25, 50, 75])
        summary.append({
            "method": method,
            "median_final_reward": float(med),
            "iqr": float(q3 - q1),
            "D_final_median": float(np.median(d_finals)),
        })
    return summary


def summary_csv(summary):
    lines = ["method,median_final_reward,iqr,D_final_median"]
    for row in summary:
        lines.append(
            f"{row['method']},{row['median_final_reward']!r},"
            f"{row['iqr']!r},{row['D_final_median']!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# fast-rate sweep

def _mixture_params(i):
    """Per-measure truncated-Gaussian mixture parameters on [0, 1]."""
    return ((0.25 + 0.06 * i, 0.12), (0.72 - 0.05 * i, 0.10))


def sample_mixture(i, m, rng):
    """m IID draws from a two-component truncated-Gaussian mixture."""
    (m1, s1), (m2, s2) = _mixture_params(i)
    out = np.empty(m)
    k = 0
    while k < m:
        comp = rng.random(m - k) < 0.5
        x = np.where(comp, rng.normal(m1, s1, m - k), rng.normal(m2, s2, m - k))
        x = x[(x >= 0.0) & (x <= 1.0)]
        out[k : k + len(x)] = x
        k += len(x)
    return out


def _binned_measure(samples, bins=512):
    """Empirical measure compressed onto a fine 1D grid (keeps IBP small)."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(samples, bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    keep = counts > 0
    w = counts[keep].astype(float)
    w /= w.sum()
    return ot.DiscreteMeasure(centers[keep][:, None], w)


def run_fast_rate_sweep(sweep):
    """Empirical barycenter error vs per-measure sample count m.

    Regularization is tied to m (eps_m = diameter**p / m); the reference
    barycenter uses ref_multiplier * max(m) samples. Returns (rows, slope)
    where rows have keys m, epsilon_m, mean_error, stderr, replicates.
    """
    lattice = np.linspace(0.0, 1.0, sweep.lattice_size)[:, None]
    max_m = max(sweep.m_values)
    rng = np.random.default_rng(sweep.seed)

    def barycenter_for(measures, eps):
        cfg = ot.SinkhornConfig(epsilon=eps, max_iters=20000, tol=1e-6,
                                p=sweep.p)
        return ot.sinkhorn_barycenter(measures, lattice, cfg, beta=1.0,
                                      state_dim=1).measure

    ref_samples = [
        sample_mixture(i, sweep.ref_multiplier * max_m, rng)
        for i in range(sweep.n_measures)
    ]

    rows = []
    for m in sweep.m_values:
        eps_m = sweep.diameter ** sweep.p / m
        ref = barycenter_for([_binned_measure(s) for s in ref_samples], eps_m)
        cfg = ot.SinkhornConfig(epsilon=eps_m, max_iters=20000, tol=1e-6,
                                p=sweep.p)
        errors = []
        for _ in range(sweep.replicates):
            measures = [
                _binned_measure(sample_mixture(i, m, rng))
                for i in range(sweep.n_measures)
            ]
            est = barycenter_for(measures, eps_m)
            err = ot.sinkhorn_divergence(est, ref, cfg, beta=1.0, state_dim=1)
            errors.append(max(err, 0.0))
        errors = np.asarray(errors)
        rows.append({
            "m": m,
            "epsilon_m": eps_m,
            "mean_error": float(errors.mean()),
            "stderr": float(errors.std(ddof=1) / np.sqrt(len(errors))),
            "replicates": len(errors),
        })
    logs = np.log([r["mean_error"] for r in rows])
    slope = float(np.polyfit(np.log([r["m"] for r in rows]), logs, 1)[0])
    return rows, slope


def fastrate_csv(rows):
    lines = ["m,epsilon_m,mean_error,stderr,replicates"]
    for r in rows:
        lines.append(f"{r['m']},{r['epsilon_m']!r},{r['mean_error']!r},"
                     f"{r['stderr']!r},{r['replicates']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# summary checks (--check)

def comparison_checks(spec, results):
    """Headline comparative claims at desk-scale tolerances.

    Returns list of (name, passed, detail).
    """
    checks = []
    disc = pol.ObsDiscretizer(grid_resolution=spec.train.grid_resolution)
    states = probe_states(spec.env)

    def med_improvement(method):
        vals = []
        for seed in spec.seeds:
            if (method, seed) not in results:
                continue
            diags, _ = results[(method, seed)]
            first = np.mean([d.mean_team_reward
                             for d in diags[: max(1, len(diags) // 10)]])
            vals.append(final_window_reward(diags) - first)
        return float(np.median(vals)) if vals else float("nan")

    if "wbc" in spec.methods and "independent" in spec.methods:
        iw, ii = med_improvement("wbc"), med_improvement("independent")
        checks.append(("reward_ratio_wbc_vs_independent", iw >= 1.3 * ii,
                       f"wbc={iw:.4f} independent={ii:.4f}"))
    if "wbc" in spec.methods and "kl_reg" in spec.methods:
        fw = np.median([final_window_reward(results[("wbc", s)][0])
                        for s in spec.seeds if ("wbc", s) in results])
        fk = np.median([final_window_reward(results[("kl_reg", s)][0])
                        for s in spec.seeds if ("kl_reg", s) in results])
        checks.append(("final_reward_wbc_vs_kl", fw > fk,
                       f"wbc={fw:.4f} kl_reg={fk:.4f}"))
    if "wbc" in spec.methods:
        ratios = []
        for seed in spec.seeds:
            if ("wbc", seed) not in results:
                continue
            diags, _ = results[("wbc", seed)]
            ratios.append(diags[-1].d_t / max(diags[0].d_t, 1e-12))
        checks.append(("consensus_contraction", np.median(ratios) < 0.5,
                       f"median D_T/D_0 = {np.median(ratios):.3f}"))
        tvs = [probe_alignment(results[("wbc", s)][1], states, spec.env, disc)
               for s in spec.seeds if ("wbc", s) in results]
        checks.append(("probe_alignment_wbc", np.median(tvs) <= 0.15,
                       f"median max TV = {np.median(tvs):.3f}"))
    return checks


# ---------------------------------------------------------------------------
# entry point

def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="wbc-exp",
        description="Consensus-training experiment runner")
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config key")
    parser.add_argument("--timing", action="store_true",
                        help="include wall_ms in metrics.csv (breaks "
                             "byte-identical reruns)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("compare", help="run the seeded method comparison") \
        .add_argument("--check", action="store_true",
                      help="verify headline claims; exit 3 on failure")
    sub.add_parser("sweep", help="run the barycenter sample-complexity sweep")
    pm = sub.add_parser("policy-map", help="emit a policy action map for an "
                                           "untrained (uniform) policy")
    pm.add_argument("--resolution", type=int, default=24)
    sub.add_parser("probe", help="emit probe-state probabilities for "
                                 "untrained policies")
    args = parser.parse_args(argv)

    try:
        spec = parse_config(args.config, args.set)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    os.makedirs(spec.outputs, exist_ok=True)
    try:
        if args.command == "compare":
            def progress(method, seed, diags):
                print(f"[{method} seed={seed}] final-window reward "
                      f"{final_window_reward(diags):.4f}")

            _, summary, results, failures = run_comparison(
                spec, include_timing=args.timing, progress=progress)
            print(summary_csv(summary), end="")
            for method, seed, msg in failures:
                print(f"run failed: {method} seed={seed}: {msg}",
                      file=sys.stderr)
            if failures:
                return 2
            if args.check:
                ok = True
                for name, passed, detail in comparison_checks(spec, results):
                    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
                    ok = ok and passed
                if not ok:
                    return 3
        elif args.command == "sweep":
            rows, slope = run_fast_rate_sweep(spec.sweep)
            text = fastrate_csv(rows)
            with open(os.path.join(spec.outputs, "fastrate.csv"), "w") as fh:
                fh.write(text)
            print(text, end="")
            print(f"log-log slope: {slope:.3f}")
        elif args.command == "policy-map":
            disc = pol.ObsDiscretizer(grid_resolution=spec.train.grid_resolution)
            policy = pol.SoftmaxPolicy.zeros(disc.n_cells)
            csv_text, svg_text = emit_policy_map(
                policy, spec.env, args.resolution,
                target=np.array([0.5, 0.5]),
                others=np.array([[0.1, 0.1], [0.9, 0.9]])[: spec.env.n_agents - 1],
                disc=disc)
            base = os.path.join(spec.outputs, "policy_map_uniform")
            with open(base + ".csv", "w") as fh:
                fh.write(csv_text)
            with open(base + ".svg", "w") as fh:
                fh.write(svg_text)
            print(f"wrote {base}.csv / .svg")
        elif args.command == "probe":
            disc = pol.ObsDiscretizer(grid_resolution=spec.train.grid_resolution)
            policies = [pol.SoftmaxPolicy.zeros(disc.n_cells, agent_id=i)
                        for i in range(spec.env.n_agents)]
            text = emit_prob_table(policies, probe_states(spec.env),
                                   spec.env, disc)
            path = os.path.join(spec.outputs, "probe_probs_uniform.csv")
            with open(path, "w") as fh:
                fh.write(text)
            print(f"wrote {path}")
    except Exception:
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
