"""Batch command-line front door.

Every subcommand is a pure function of its flags: it writes a delimited
artifact (CSV, or JSON mirroring the same fields), a sidecar manifest with
the config digest, seed and library versions, and optionally a rendered
figure.  Exit codes: 0 pass, 1 usage error, 2 numerical non-convergence,
3 failed check.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import sys

import click
import numpy as np

from . import __version__
from .errors import DomainError, GuardError, OverflowGuardError

STREAM_NAMES = ("disorder", "sampling", "gmc", "flow")


class CheckFailed(Exception):
    """A verification subcommand produced a failing verdict (exit 3)."""


class NotConverged(Exception):
    """A quadrature or series failed to converge (exit 2)."""


def stream_seed(master: int, name: str) -> int:
    """Derive a named sub-stream seed from the master seed."""
    if name not in STREAM_NAMES:
        raise DomainError(f"unknown stream {name!r}")
    h = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


def _threads(option_value):
    n = option_value if option_value else os.environ.get("CPLAB_THREADS")
    if not n:
        return None
    n = int(n)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    return n


def _manifest(command: str, config: dict, seed, threads) -> dict:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return {
        "command": command,
        "config": config,
        "digest": hashlib.sha256(blob).hexdigest()[:16],
        "seed": seed,
        "threads": threads,
        "versions": {
            "cplab": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }


def _write_artifact(output, header, rows, manifest, fmt="csv"):
    """Write the table plus its sidecar manifest; JSON mirrors CSV 1:1."""
    if fmt == "json":
        payload = [dict(zip(header, r)) for r in rows]
        with open(output, "w", encoding="utf-8") as fh:
            json.dump({"rows": payload, "manifest": manifest}, fh,
                      sort_keys=True, default=str)
            fh.write("\n")
    else:
        with open(output, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    with open(output + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, default=str, indent=1)
        fh.write("\n")


def _plot(path, draw):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _echo_pass(name, ok, detail):
    click.echo(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    if not ok:
        raise CheckFailed(name)


_COMMON = [
    click.option("--output", "-o", default=None, help="artifact path"),
    click.option("--format", "fmt", type=click.Choice(["csv", "json"]),
                 default="csv", show_default=True),
    click.option("--seed", type=int, default=0, show_default=True,
                 help="master seed, expanded into named sub-streams"),
    click.option("--threads", type=int, default=None,
                 help="worker thread cap (env CPLAB_THREADS as fallback)"),
    click.option("--plot", is_flag=True, help="render a figure beside the table"),
]


def common_options(fn):
    for opt in reversed(_COMMON):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(__version__)
def cli():
    """Numerical laboratory for critical 2D polymer chaos measures."""


def _out(output, command, ext="csv"):
    return output or f"{command}.{ext}"


# ---------------------------------------------------------------------------
# scalar special functions
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--theta", type=float, required=True)
@click.option("--t", "ts", type=float, multiple=True, required=True)
@click.option("--tol", type=float, default=1e-10, show_default=True)
@common_options
def jtheta(theta, ts, tol, output, fmt, seed, threads, plot):
    """Evaluate the pair-interaction special function at one or more times."""
    from .deltabose import j_theta_result

    threads = _threads(threads)
    rows = []
    for t in ts:
        res = j_theta_result(theta, t, tol)
        if not res.converged:
            raise NotConverged(f"jtheta at t={t}")
        rows.append([theta, t, repr(res.value), repr(res.abs_error_estimate),
                     res.converged])
    header = ["theta", "t", "value", "abs_error", "converged"]
    config = {"theta": theta, "t": list(ts), "tol": tol}
    out = _out(output, "jtheta", fmt)
    _write_artifact(out, header, rows, _manifest("jtheta", config, seed, threads), fmt)
    if plot and len(ts) > 1:
        xs = [r[1] for r in rows]
        ys = [float(r[2]) for r in rows]
        _plot(os.path.splitext(out)[0] + ".png",
              lambda ax: (ax.loglog(xs, ys, "o-"), ax.set_xlabel("t"),
                          ax.set_ylabel("j(t)")))
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--theta", type=float, required=True)
@click.option("--j", "order", type=int, required=True)
@click.option("--t", type=float, required=True)
@click.option("--tol", type=float, default=1e-8, show_default=True)
@common_options
def jconv(theta, order, t, tol, output, fmt, seed, threads, plot):
    """j-fold simplex convolution of the special function, dual routes."""
    from .deltabose import j_convolution_power
    from .quad import simplex_convolve
    from .deltabose import JKernel

    threads = _threads(threads)
    closed = j_convolution_power(theta, t, order, tol)
    kern = JKernel(theta, max(t, 1.0))
    direct = simplex_convolve([kern] * order, t, tol)
    if not direct.converged:
        raise NotConverged("simplex convolution")
    rel = abs(closed - direct.value) / max(abs(closed), 1e-300)
    header = ["theta", "j", "t", "closed_form", "simplex", "rel_difference"]
    rows = [[theta, order, t, repr(closed), repr(direct.value), repr(rel)]]
    config = {"theta": theta, "j": order, "t": t, "tol": tol}
    out = _out(output, "jconv", fmt)
    _write_artifact(out, header, rows, _manifest("jconv", config, seed, threads), fmt)
    click.echo(f"wrote {out}")


@cli.command(name="resum-check")
@click.option("--theta", type=float, required=True)
@click.option("--a", type=float, required=True)
@click.option("--t", type=float, required=True)
@click.option("--j-max", "--J", "j_max", type=int, default=40, show_default=True)
@click.option("--rtol", type=float, default=1e-4, show_default=True)
@common_options
def resum_check(theta, a, t, j_max, rtol, output, fmt, seed, threads, plot):
    """Resummation of weighted convolution powers against the shifted function."""
    from .deltabose import j_resummed, j_theta

    threads = _threads(threads)
    res = j_resummed(theta, a, t, j_max)
    if res.overflowed:
        raise NotConverged("resummation overflowed")
    target = j_theta(theta + a, t)
    rel = abs(res.value - target) / abs(target)
    header = ["theta", "a", "t", "j_max", "resummed", "shifted", "rel_error",
              "terms_used", "stopped_by"]
    rows = [[theta, a, t, j_max, repr(res.value), repr(target), repr(rel),
             res.terms_used, res.stopped_by]]
    config = {"theta": theta, "a": a, "t": t, "j_max": j_max, "rtol": rtol}
    out = _out(output, "resum-check", fmt)
    _write_artifact(out, header, rows,
                    _manifest("resum-check", config, seed, threads), fmt)
    _echo_pass("resum-check", rel < rtol, f"relative error {rel:.3e}")


@cli.command()
@click.option("--theta", type=float, required=True)
@click.option("--t", type=float, required=True)
@click.option("--x", nargs=4, type=float, required=True,
              help="x1 y1 x2 y2 of the initial pair")
@click.option("--xp", nargs=4, type=float, required=True,
              help="x1 y1 x2 y2 of the final pair")
@common_options
def semigroup2(theta, t, x, xp, output, fmt, seed, threads, plot):
    """Two-particle semigroup kernel: heat part plus pair correction."""
    from . import deltabose

    threads = _threads(threads)
    xa = np.asarray(x).reshape(2, 2)
    xb = np.asarray(xp).reshape(2, 2)
    heat, corr, rel = deltabose.semigroup2(theta, t, xa, xb, parts=True)
    header = ["theta", "t", "heat_part", "correction", "value"]
    rows = [[theta, t, repr(heat), repr(corr), repr(heat + corr)]]
    config = {"theta": theta, "t": t, "x": list(x), "xp": list(xp)}
    out = _out(output, "semigroup2", fmt)
    _write_artifact(out, header, rows,
                    _manifest("semigroup2", config, seed, threads), fmt)
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--theta", type=float, required=True)
@click.option("--t", type=float, required=True)
@click.option("--x", nargs=4, type=float, required=True)
@click.option("--xp", nargs=4, type=float, required=True)
@common_options
def centered2(theta, t, x, xp, output, fmt, seed, threads, plot):
    """Centered two-particle moment kernel (heat product subtracted)."""
    from .deltabose import centered_moment2

    threads = _threads(threads)
    xa = np.asarray(x).reshape(2, 2)
    xb = np.asarray(xp).reshape(2, 2)
    val = centered_moment2(theta, t, xa, xb)
    header = ["theta", "t", "centered_value"]
    rows = [[theta, t, repr(val)]]
    config = {"theta": theta, "t": t, "x": list(x), "xp": list(xp)}
    out = _out(output, "centered2", fmt)
    _write_artifact(out, header, rows,
                    _manifest("centered2", config, seed, threads), fmt)
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--n", type=int, required=True, help="particle count")
@click.option("--max-len", type=int, required=True)
@click.option("--cover-only", is_flag=True)
@common_options
def diagrams(n, max_len, cover_only, output, fmt, seed, threads, plot):
    """Enumerate interaction diagrams (pair sequences without immediate repeats)."""
    from .deltabose import enumerate_diagrams

    threads = _threads(threads)
    dgs = enumerate_diagrams(n, max_len, cover_only=cover_only)
    header = ["index", "length", "pairs"]
    rows = [[i, len(d.pairs),
             ";".join("-".join(map(str, sorted(p))) for p in d.pairs)]
            for i, d in enumerate(dgs)]
    config = {"n": n, "max_len": max_len, "cover_only": cover_only}
    out = _out(output, "diagrams", fmt)
    _write_artifact(out, header, rows,
                    _manifest("diagrams", config, seed, threads), fmt)
    click.echo(f"wrote {out} ({len(rows)} diagrams)")


@cli.command(name="variance-id")
@click.option("--t", type=float, default=1.0, show_default=True)
@click.option("--width", "widths", type=float, multiple=True, default=(1.0, 0.7))
@click.option("--rtol", type=float, default=1e-3, show_default=True)
@common_options
def variance_id(t, widths, rtol, output, fmt, seed, threads, plot):
    """Limiting variance functionals and the V = U^2 identity."""
    from .deltabose import GaussianProfile, variance_functionals

    threads = _threads(threads)
    if len(widths) != 2:
        raise DomainError("exactly two widths required")
    g = GaussianProfile(1.0, widths[0])
    gp = GaussianProfile(1.0, widths[1])
    U, V = variance_functionals(t, g, gp)
    rel = abs(V - U * U) / (U * U)
    header = ["t", "width_g", "width_gp", "U", "V", "rel_deviation"]
    rows = [[t, widths[0], widths[1], repr(U), repr(V), repr(rel)]]
    config = {"t": t, "widths": list(widths), "rtol": rtol}
    out = _out(output, "variance-id", fmt)
    _write_artifact(out, header, rows,
                    _manifest("variance-id", config, seed, threads), fmt)
    _echo_pass("variance-id", rel < rtol, f"V vs U^2 deviation {rel:.3e}")


# ---------------------------------------------------------------------------
# path ensembles
# ---------------------------------------------------------------------------


def _load_ensemble(path):
    from .ensemble import ensemble_from_binary, ensemble_from_csv

    if path.endswith(".bin"):
        with open(path, "rb") as fh:
            return ensemble_from_binary(fh)
    with open(path, newline="") as fh:
        ens = ensemble_from_csv(fh)
    # the CSV columns carry no metadata; recover the horizon from the sidecar
    # manifest when one sits next to the file
    sidecar = path + ".manifest.json"
    if os.path.exists(sidecar):
        with open(sidecar, encoding="utf-8") as fh:
            cfg = json.load(fh).get("config", {})
        if "N" in cfg:
            ens.meta.setdefault("N", cfg["N"])
    return ens


def _save_ensemble(ens, path):
    from .ensemble import ensemble_to_binary, ensemble_to_csv

    if path.endswith(".bin"):
        with open(path, "wb") as fh:
            ensemble_to_binary(ens, fh)
    else:
        with open(path, "w", newline="") as fh:
            ensemble_to_csv(ens, fh)


@cli.command(name="sample-walks")
@click.option("--count", type=int, required=True)
@click.option("--window", nargs=2, type=int, required=True)
@click.option("--horizon", "-N", type=int, required=True)
@click.option("--box", nargs=4, type=int, default=(0, 0, 0, 0), show_default=True)
@common_options
def sample_walks(count, window, horizon, box, output, fmt, seed, threads, plot):
    """Sample reference lazy walks with flat start-box importance weights."""
    from .ensemble import sample_reference_walks

    threads = _threads(threads)
    ens = sample_reference_walks(count, tuple(window), horizon, tuple(box),
                                 stream_seed(seed, "sampling"))
    config = {"count": count, "window": list(window), "N": horizon,
              "box": list(box)}
    out = _out(output, "walks", "csv" if fmt == "csv" else "csv")
    _save_ensemble(ens, out)
    with open(out + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(_manifest("sample-walks", config, seed, threads), fh,
                  sort_keys=True, indent=1, default=str)
        fh.write("\n")
    if plot:
        pos = ens.position_array()

        def draw(ax):
            for p in pos[:50]:
                ax.plot(p[:, 0], p[:, 1], lw=0.6, alpha=0.7)
            ax.set_aspect("equal")
            ax.set_title("reference walks")

        _plot(os.path.splitext(out)[0] + ".png", draw)
    click.echo(f"wrote {out}")


@cli.command(name="polymer-sim")
@click.option("--count", type=int, required=True)
@click.option("--window", nargs=2, type=int, required=True)
@click.option("--horizon", "-N", type=int, required=True)
@click.option("--theta", type=float, default=0.0, show_default=True)
@click.option("--box", nargs=4, type=int, default=(0, 0, 0, 0), show_default=True)
@common_options
def polymer_sim(count, window, horizon, theta, box, output, fmt, seed, threads, plot):
    """Sample walks and reweight with the critical-window quenched disorder."""
    from .ensemble import polymer_gibbs_reweight, sample_reference_walks

    threads = _threads(threads)
    ens = sample_reference_walks(count, tuple(window), horizon, tuple(box),
                                 stream_seed(seed, "sampling"))
    ens = polymer_gibbs_reweight(ens, stream_seed(seed, "disorder"), theta, horizon)
    config = {"count": count, "window": list(window), "N": horizon,
              "theta": theta, "box": list(box)}
    out = _out(output, "polymer", "csv")
    _save_ensemble(ens, out)
    with open(out + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(_manifest("polymer-sim", config, seed, threads), fh,
                  sort_keys=True, indent=1, default=str)
        fh.write("\n")
    if plot:
        _plot(os.path.splitext(out)[0] + ".png",
              lambda ax: (ax.hist(np.log(np.maximum(ens.weights, 1e-300)), bins=40),
                          ax.set_xlabel("log weight")))
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--input", "inp", required=True, help="ensemble CSV or .bin")
@click.option("--window", nargs=2, type=int, required=True)
@click.option("--mode", type=click.Choice(["lattice", "epsilon"]), default="lattice",
              show_default=True)
@click.option("--eps", type=float, default=0.5, show_default=True)
@click.option("--horizon", "-N", type=int, default=None,
              help="override horizon when absent from metadata")
@common_options
def intersections(inp, window, mode, eps, horizon, output, fmt, seed, threads, plot):
    """Pairwise intersection local-time matrix of an ensemble."""
    from .ensemble import intersection_matrix

    threads = _threads(threads)
    ens = _load_ensemble(inp)
    if horizon:
        ens.meta["N"] = horizon
    mat = intersection_matrix(ens, tuple(window), mode=mode, eps=eps)
    header = ["i", "j", "value"]
    rows = [[i, j, repr(float(mat.entries[i, j]))]
            for i in range(len(ens)) for j in range(i, len(ens))]
    config = {"input": inp, "window": list(window), "mode": mode, "eps": eps}
    out = _out(output, "intersections", fmt)
    _write_artifact(out, header, rows,
                    _manifest("intersections", config, seed, threads), fmt)
    click.echo(f"wrote {out}")


# ---------------------------------------------------------------------------
# chaos measures
# ---------------------------------------------------------------------------


def _ensemble_kernel(ens):
    from .ensemble import intersection_matrix

    mat = intersection_matrix(ens, ens.window)
    return mat.entries


@cli.command(name="gmc-sim")
@click.option("--input", "inp", required=True)
@click.option("--a", type=float, required=True)
@click.option("--moment-order", type=int, default=None,
              help="also report the exact chaos moment of this order")
@common_options
def gmc_sim(inp, a, moment_order, output, fmt, seed, threads, plot):
    """One chaos draw over an ensemble's intersection kernel."""
    from .gmc import (GaussianDraw, WeightedInnerProduct, gmc_moment_oracle,
                      kahane_gmc, spectral_factorize)

    threads = _threads(threads)
    ens = _load_ensemble(inp)
    K = _ensemble_kernel(ens)
    mu = WeightedInnerProduct(np.maximum(ens.weights, 1e-300))
    factor = spectral_factorize(K, mu)
    rng = np.random.default_rng(stream_seed(seed, "gmc"))
    xi = rng.normal(0.0, math.sqrt(a) if a > 0 else 0.0,
                    size=len(factor.eigenvalues))
    real = kahane_gmc(ens.weights, factor, GaussianDraw(a, xi))
    header = ["path_id", "base_weight", "new_weight"]
    rows = [[i, repr(float(b)), repr(float(w))]
            for i, (b, w) in enumerate(zip(real.base_weights, real.new_weights))]
    config = {"input": inp, "a": a, "moment_order": moment_order}
    manifest = _manifest("gmc-sim", config, seed, threads)
    if moment_order:
        manifest["moment"] = gmc_moment_oracle(ens.weights, K, a, moment_order)
    out = _out(output, "gmc-sim", fmt)
    _write_artifact(out, header, rows, manifest, fmt)
    if moment_order:
        click.echo(f"moment[{moment_order}] = {manifest['moment']!r}")
    click.echo(f"wrote {out}")


@cli.command(name="gmc-flow")
@click.option("--input", "inp", required=True)
@click.option("--a-grid", required=True, help="comma-separated increasing grid from 0")
@common_options
def gmc_flow_cmd(inp, a_grid, output, fmt, seed, threads, plot):
    """Chaos mass along an increasing strength grid (one Brownian driving path)."""
    from .gmc import WeightedInnerProduct, gmc_flow

    threads = _threads(threads)
    ens = _load_ensemble(inp)
    grid = [float(v) for v in a_grid.split(",")]
    K = _ensemble_kernel(ens)
    mu = WeightedInnerProduct(np.maximum(ens.weights, 1e-300))
    reals = gmc_flow(ens.weights, K, mu, grid, stream_seed(seed, "flow"))
    header = ["a", "total_mass"]
    rows = [[a, repr(float(r.new_weights.sum()))] for a, r in zip(grid, reals)]
    config = {"input": inp, "a_grid": grid}
    out = _out(output, "gmc-flow", fmt)
    _write_artifact(out, header, rows,
                    _manifest("gmc-flow", config, seed, threads), fmt)
    if plot:
        ys = [float(r[1]) for r in rows]
        _plot(os.path.splitext(out)[0] + ".png",
              lambda ax: (ax.semilogy(grid, ys, "o-"), ax.set_xlabel("a"),
                          ax.set_ylabel("total mass")))
    click.echo(f"wrote {out}")


@cli.command(name="isometry-check")
@click.option("--instances", type=int, default=20, show_default=True)
@click.option("--size", type=int, default=4, show_default=True)
@common_options
def isometry_check(instances, size, output, fmt, seed, threads, plot):
    """Partial isometries between random factorizations of one Gram operator."""
    from .gmc import WeightedInnerProduct, partial_isometry, spectral_factorize

    threads = _threads(threads)
    rng = np.random.default_rng(stream_seed(seed, "gmc"))
    rows = []
    worst = 0.0
    for i in range(instances):
        W = rng.normal(size=(size, size))
        K = W @ W.T / size
        mu = WeightedInnerProduct(rng.uniform(0.5, 2.0, size=size))
        f = spectral_factorize(K, mu)
        Y1 = f.coefficient_map
        # a second factor: pad with a zero mode and rotate coefficients
        k = Y1.shape[1]
        q, _ = np.linalg.qr(rng.normal(size=(k + 1, k + 1)))
        Y2 = np.hstack([Y1, np.zeros((size, 1))]) @ q.T
        iota = partial_isometry(Y1, Y2, mu)
        resid = float(np.abs(Y2 @ iota - Y1).max())
        worst = max(worst, resid)
        rows.append([i, repr(resid)])
    header = ["instance", "residual"]
    config = {"instances": instances, "size": size}
    out = _out(output, "isometry-check", fmt)
    _write_artifact(out, header, rows,
                    _manifest("isometry-check", config, seed, threads), fmt)
    _echo_pass("isometry-check", worst < 1e-8, f"max residual {worst:.3e}")


@cli.command(name="coupling-check")
@click.option("--pieces", type=int, default=3, show_default=True)
@click.option("--size", type=int, default=3, show_default=True)
@click.option("--a", type=float, default=0.5, show_default=True)
@common_options
def coupling_check(pieces, size, a, output, fmt, seed, threads, plot):
    """Direct-sum additivity, isometry factorization and concatenation identity."""
    from .coupling import concatenation_check, coupling_isometry, direct_sum_factor
    from .gmc import GaussianDraw, WeightedInnerProduct, spectral_factorize

    threads = _threads(threads)
    rng = np.random.default_rng(stream_seed(seed, "gmc"))
    mu = WeightedInnerProduct(rng.uniform(0.5, 2.0, size=size))
    Ks = [(lambda W: W @ W.T / size)(rng.normal(size=(size, size)))
          for _ in range(pieces)]
    Kb = np.sum(Ks, axis=0)
    factors = [spectral_factorize(K, mu) for K in Ks]
    big = spectral_factorize(Kb, mu)
    summed = direct_sum_factor(factors, Kb)
    additivity = float(np.abs(summed.matrix @ summed.matrix.T - Kb).max())
    iota = coupling_isometry(big, summed)
    fact_resid = float(np.abs(summed.matrix @ iota.matrix - big.coefficient_map).max())
    draws = [GaussianDraw(a, rng.normal(0.0, math.sqrt(a),
                                        size=f.coefficient_map.shape[1]))
             for f in factors]
    battery = [np.ones(size), rng.uniform(0.1, 1.0, size=size)]
    w = rng.uniform(0.2, 1.0, size=size)
    disc = concatenation_check(w, factors, big, iota, pieces // 2, draws, battery)
    header = ["check", "value"]
    rows = [["gram_additivity", repr(additivity)],
            ["isometry_factorization", repr(fact_resid)],
            ["concatenation", repr(disc)]]
    config = {"pieces": pieces, "size": size, "a": a}
    out = _out(output, "coupling-check", fmt)
    _write_artifact(out, header, rows,
                    _manifest("coupling-check", config, seed, threads), fmt)
    ok = additivity < 1e-10 and fact_resid < 1e-8 and disc < 1e-6
    _echo_pass("coupling-check", ok,
               f"additivity {additivity:.1e}, factorization {fact_resid:.1e}, "
               f"concatenation {disc:.1e}")


@cli.command(name="naimark-check")
@click.option("--pieces", type=int, default=2, show_default=True)
@click.option("--size", type=int, default=4, show_default=True)
@common_options
def naimark_check(pieces, size, output, fmt, seed, threads, plot):
    """Projection identity: piece kernels recovered through the coupling isometry."""
    from .coupling import coupling_isometry, direct_sum_factor, naimark_projection_check
    from .gmc import WeightedInnerProduct, spectral_factorize

    threads = _threads(threads)
    rng = np.random.default_rng(stream_seed(seed, "gmc"))
    mu = WeightedInnerProduct(rng.uniform(0.5, 2.0, size=size))
    Ks = [(lambda W: W @ W.T / size)(rng.normal(size=(size, size)))
          for _ in range(pieces)]
    Kb = np.sum(Ks, axis=0)
    factors = [spectral_factorize(K, mu) for K in Ks]
    big = spectral_factorize(Kb, mu)
    summed = direct_sum_factor(factors, Kb)
    iota = coupling_isometry(big, summed)
    rows = []
    worst = 0.0
    for p in range(pieces):
        dev = naimark_projection_check(big, iota, Ks, p)
        worst = max(worst, dev)
        rows.append([p, repr(dev)])
    header = ["piece", "deviation"]
    config = {"pieces": pieces, "size": size}
    out = _out(output, "naimark-check", fmt)
    _write_artifact(out, header, rows,
                    _manifest("naimark-check", config, seed, threads), fmt)
    _echo_pass("naimark-check", worst < 1e-8, f"max deviation {worst:.3e}")


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------


def _trial_outputs(report, output, fmt, command, seed, threads, plot_fn=None):
    from .trials import TRIAL_CSV_HEADER

    out = _out(output, command, fmt)
    manifest = _manifest(command, report.inputs, seed, threads)
    _write_artifact(out, TRIAL_CSV_HEADER, [report.csv_row()], manifest, fmt)
    with open(os.path.splitext(out)[0] + ".report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    if plot_fn is not None:
        _plot(os.path.splitext(out)[0] + ".png", plot_fn)
    _echo_pass(report.name, report.verdict in ("pass", "trend-pass"),
               f"verdict {report.verdict}, statistic {report.statistic!r}")


@cli.command(name="trial-positivity")
@click.option("--paths", type=int, default=8, show_default=True)
@click.option("--steps", type=int, default=32, show_default=True)
@click.option("--horizon", "-N", type=int, default=1024, show_default=True)
@click.option("--a", type=float, default=1.0, show_default=True)
@click.option("--draws", type=int, default=10_000, show_default=True)
@common_options
def trial_positivity(paths, steps, horizon, a, draws, output, fmt, seed,
                     threads, plot):
    """Chaos positivity over the endpoint test battery."""
    from .ensemble import sample_reference_walks
    from .trials import positivity_trial, test_battery

    threads = _threads(threads)
    ens = sample_reference_walks(paths, (0, steps), horizon, (-2, 2, -2, 2),
                                 stream_seed(seed, "sampling"))
    K = _ensemble_kernel(ens)
    scale = 2.0 / math.sqrt(horizon)
    ends = ens.position_array()[:, -1, :] * scale
    report = None
    for name, fn in test_battery().items():
        f = np.asarray(fn(ends), dtype=float)
        if float(ens.weights @ f) <= 0:
            continue
        report = positivity_trial(ens.weights, K, a, f, draws,
                                  stream_seed(seed, "gmc"))
        if report.verdict != "pass":
            break
    _trial_outputs(report, output, fmt, "trial-positivity", seed, threads)


@cli.command(name="trial-strong-disorder")
@click.option("--paths", type=int, default=4, show_default=True)
@click.option("--steps", type=int, default=32, show_default=True)
@click.option("--horizon", "-N", type=int, default=1024, show_default=True)
@click.option("--a-grid", default="0,1,2,3,4,5,6,7,8,9", show_default=True)
@click.option("--flows", type=int, default=3000, show_default=True)
@common_options
def trial_strong_disorder(paths, steps, horizon, a_grid, flows, output, fmt,
                          seed, threads, plot):
    """Median chaos mass decay along the strength flow."""
    from .ensemble import sample_reference_walks
    from .trials import strong_disorder_trial

    threads = _threads(threads)
    ens = sample_reference_walks(paths, (0, steps), horizon, (0, 0, 0, 0),
                                 stream_seed(seed, "sampling"))
    K = _ensemble_kernel(ens)
    grid = [float(v) for v in a_grid.split(",")]
    report = strong_disorder_trial(ens.weights, K, grid, np.ones(paths),
                                   flows, stream_seed(seed, "flow"))

    def draw(ax):
        ax.semilogy(report.details["a_grid"], report.details["medians"], "o-")
        ax.set_xlabel("a")
        ax.set_ylabel("median mass")

    _trial_outputs(report, output, fmt, "trial-strong-disorder", seed, threads,
                   draw if plot else None)


@cli.command(name="trial-moment-match")
@click.option("--horizon", "-N", type=int, default=4096, show_default=True)
@click.option("--theta", type=float, default=0.0, show_default=True)
@click.option("--a", type=float, default=0.0, show_default=True)
@click.option("--t", type=float, default=1.0, show_default=True)
@click.option("--replicas", type=int, default=40, show_default=True)
@click.option("--paths-per-family", type=int, default=128, show_default=True)
@click.option("--method", type=click.Choice(["skeleton", "direct"]),
              default="skeleton", show_default=True,
              help="skeleton: exact-renewal importance sampler (stable at "
                   "critical coupling); direct: naive pair average.")
@click.option("--draws", type=int, default=8000, show_default=True,
              help="Skeleton draws (skeleton method only).")
@common_options
def trial_moment_match(horizon, theta, a, t, replicas, paths_per_family,
                       method, draws, output, fmt, seed, threads, plot):
    """Polymer chaos second moment versus the shifted analytic pairing."""
    from .deltabose import GaussianProfile
    from .trials import moment_match_trial

    threads = _threads(threads)
    g = GaussianProfile(1.0, 1.0)
    report = moment_match_trial(horizon, theta, t, a, g, g, replicas,
                                stream_seed(seed, "sampling"), paths_per_family,
                                method=method, draws=draws)
    _trial_outputs(report, output, fmt, "trial-moment-match", seed, threads)


@cli.command(name="trial-variance-ratio")
@click.option("--horizon", "-N", type=int, default=1024, show_default=True)
@click.option("--theta-grid", default="0,-2,-4", show_default=True)
@click.option("--t", type=float, default=1.0, show_default=True)
@click.option("--replicas", type=int, default=16, show_default=True)
@common_options
def trial_variance_ratio(horizon, theta_grid, t, replicas, output, fmt, seed,
                         threads, plot):
    """Relative variance of the polymer pairing along a decreasing theta grid."""
    from .deltabose import GaussianProfile
    from .trials import variance_ratio_trial

    threads = _threads(threads)
    grid = [float(v) for v in theta_grid.split(",")]
    g = GaussianProfile(1.0, 1.0)
    report = variance_ratio_trial(horizon, grid, t, g, g, replicas,
                                  stream_seed(seed, "sampling"))

    def draw(ax):
        ax.plot(grid, report.details["ratios"], "o-")
        ax.set_xlabel("theta")
        ax.set_ylabel("Var / mean^2")

    _trial_outputs(report, output, fmt, "trial-variance-ratio", seed, threads,
                   draw if plot else None)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except (click.UsageError, DomainError, GuardError) as exc:
        click.echo(f"usage error: {exc}", err=True)
        return 1
    except (NotConverged, OverflowGuardError) as exc:
        click.echo(f"not converged: {exc}", err=True)
        return 2
    except CheckFailed as exc:
        click.echo(f"check failed: {exc}", err=True)
        return 3
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
