"""Path engines for the system, its coupling, and comparison processes.

All engines share one stepping scheme: Euler drift, branching diffusion
``sqrt(2 sigma * state * h) * G``, thinned jumps above ``jump_cutoff`` (at
most one per channel per substep, probability ``rate * h``), the compensator
of the thinned jumps subtracted as drift, and the sub-cutoff jumps either
dropped (their compensated integral has mean zero) or replaced by a Gaussian
with the matching variance ``state * int_0^eps xi^2 n(dxi)``.  States clamp
at 0 after each substep.  Steps subdivide automatically whenever the jump
rate or the drift stiffness at the current batch maximum would make a single
step too coarse.

Shared noise across coupled components is realized as a white-noise sheet in
the mass coordinate: components at levels ``u`` and ``v`` receive common
Gaussian mass below ``min(u, v)`` and independent mass on the difference,
reproducing the overlap coupling of the generator.  The same sheet carries
the jump marks: a mark at height ``pos`` hits every consumer whose level
reaches it.  The one-dimensional comparison processes consume the sheet in
the difference frame (levels measured above the smaller component), which is
the pairing that keeps the pathwise dominations testable.

A coupled pair glues when its difference either falls below ``meet_tol`` or
changes sign within one substep (a sign change means the continuous paths
met in between); after gluing the pair is driven identically and stays
bitwise equal.  The second pair may glue only once the first has.

Randomness: every path batch owns a counter-based stream keyed by (master
seed, engine tag + batch index), so Monte Carlo results are bitwise
independent of the worker count.  A fixed number of variates is drawn per
substep whatever the events, so paths inside a batch never desynchronize.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np

from .errors import InvalidParams
from .levy import LevyMeasure, ZeroMeasure, suggest_cutoff
from .model import ModelParams

BATCH = 4096
_MAX_SUBSTEPS = 20_000
_JUMP_P_BUDGET = 0.1
_STIFF_BUDGET = 0.2

_TAG_SYSTEM = 1_000_000
_TAG_COUPLED = 2_000_000
_TAG_ZBAR = 3_000_000
_TAG_CIR = 4_000_000
_TAG_ZDRIVER = 5_000_000


def stream(seed: int, tag: int = 0) -> np.random.Generator:
    """Counter-based stream for (seed, tag); independent across tags."""
    if seed < 0 or tag < 0:
        raise InvalidParams("stream seed and tag must be nonnegative")
    key = np.array([seed & (2**64 - 1), tag & (2**64 - 1)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(int(rng), 0)


@dataclass(frozen=True)
class SimScheme:
    """Discretization controls shared by every engine."""

    dt: float
    horizon: float
    jump_cutoff: float = 1.0
    small_jump_mode: str = "gaussian"  # "gaussian" or "compensator"
    meet_tol: float = 1e-4
    state_cap: float = 1e6

    def __post_init__(self):
        if not (self.dt > 0 and self.horizon > 0):
            raise InvalidParams("dt and horizon must be > 0")
        if self.small_jump_mode not in ("gaussian", "compensator"):
            raise InvalidParams("small_jump_mode must be 'gaussian' or 'compensator'")
        if not (self.meet_tol > 0 and self.state_cap > 0 and self.jump_cutoff > 0):
            raise InvalidParams("meet_tol, state_cap, jump_cutoff must be > 0")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.horizon / self.dt)))

    @staticmethod
    def auto(
        p: ModelParams,
        dt: float,
        horizon: float,
        scale: float,
        meet_tol: float | None = None,
        state_cap: float = 1e6,
        small_jump_mode: str | None = None,
        jump_cutoff: float | None = None,
    ) -> "SimScheme":
        """Scheme with the jump cutoff sized to the experiment's state scale."""
        if jump_cutoff is None:
            jump_cutoff = max(
                suggest_cutoff(p.n1, dt, scale), suggest_cutoff(p.n2, dt, scale)
            )
        if small_jump_mode is None:
            infinite_activity = any(
                not m.is_zero and not hasattr(m, "size") for m in (p.n1, p.n2)
            )
            small_jump_mode = "gaussian" if infinite_activity else "compensator"
        if meet_tol is None:
            meet_tol = 1e-4 * (1.0 + scale)
        return SimScheme(
            dt=dt,
            horizon=horizon,
            jump_cutoff=jump_cutoff,
            small_jump_mode=small_jump_mode,
            meet_tol=meet_tol,
            state_cap=state_cap,
        )

    def to_config(self) -> dict:
        return {
            "dt": self.dt,
            "horizon": self.horizon,
            "jump_cutoff": self.jump_cutoff,
            "small_jump_mode": self.small_jump_mode,
            "meet_tol": self.meet_tol,
            "state_cap": self.state_cap,
        }


def scheme_from_config(cfg: dict) -> SimScheme:
    try:
        return SimScheme(
            dt=float(cfg["dt"]),
            horizon=float(cfg["horizon"]),
            jump_cutoff=float(cfg.get("jump_cutoff", 1.0)),
            small_jump_mode=cfg.get("small_jump_mode", "gaussian"),
            meet_tol=float(cfg.get("meet_tol", 1e-4)),
            state_cap=float(cfg.get("state_cap", 1e6)),
        )
    except KeyError as exc:
        raise InvalidParams("scheme config needs 'dt' and 'horizon'") from exc


@dataclass(frozen=True)
class _Channel:
    """Per-component noise constants at a fixed cutoff."""

    sigma: float
    measure: LevyMeasure
    lam: float  # thinned-jump intensity per unit state
    tlm: float  # compensator of the thinned jumps per unit state
    ar_var: float  # variance of the sub-cutoff Gaussian per unit state
    eps: float

    @staticmethod
    def build(sigma: float, measure: LevyMeasure, scheme: SimScheme) -> "_Channel":
        eps = scheme.jump_cutoff
        lam = float(measure.tail_mass(eps))
        tlm = float(measure.tail_linear_moment(eps))
        ar = (
            float(measure.truncated_second_moment(eps))
            if scheme.small_jump_mode == "gaussian"
            else 0.0
        )
        return _Channel(
            sigma=float(sigma), measure=measure, lam=lam, tlm=tlm, ar_var=ar, eps=eps
        )

    def sizes(self, u: np.ndarray) -> np.ndarray:
        """Vector of tail jump sizes from uniforms in [0, 1)."""
        return np.asarray(self.measure.tail_quantile(self.eps, 1.0 - u), dtype=float)


@dataclass
class PathEvent:
    time: float
    kind: str  # "large_jump" | "glue" | "cap_abort"
    info: dict = field(default_factory=dict)


@dataclass
class StoppingRecord:
    """Stopping times of one path; ``inf`` means censored at the horizon."""

    horizon: float
    tau_minus: float | None = None
    tau_minus_level: float | None = None
    tau_plus: float | None = None
    tau_plus_level: float | None = None
    t_x: float | None = None
    t_full: float | None = None
    zeta0: float | None = None
    zetabar0: float | None = None
    cap_abort: float | None = None

    def to_dict(self) -> dict:
        def enc(v):
            if v is None:
                return None
            return "censored" if math.isinf(v) else v

        return {
            "horizon": self.horizon,
            "tau_minus": enc(self.tau_minus),
            "tau_minus_level": self.tau_minus_level,
            "tau_plus": enc(self.tau_plus),
            "tau_plus_level": self.tau_plus_level,
            "t_x": enc(self.t_x),
            "t_full": enc(self.t_full),
            "zeta0": enc(self.zeta0),
            "zetabar0": enc(self.zetabar0),
            "cap_abort": enc(self.cap_abort),
        }


@dataclass
class PathGrid:
    times: np.ndarray
    states: dict[str, np.ndarray]
    events: list[PathEvent]
    stopping: StoppingRecord


_TRACE_COLUMNS = ("X", "Xt", "Y", "Yt", "Z", "Zbar")


def trace_rows(grid: PathGrid):
    """Rows for the trace CSV: t, the six state columns, event marker."""
    marks = {}
    for ev in grid.events:
        idx = int(np.searchsorted(grid.times, ev.time, side="left"))
        idx = min(idx, len(grid.times) - 1)
        marks.setdefault(idx, []).append(ev.kind)
    for i, t in enumerate(grid.times):
        row = {"t": float(t)}
        for col in _TRACE_COLUMNS:
            arr = grid.states.get(col)
            row[col] = float(arr[i]) if arr is not None else ""
        row["event"] = ";".join(marks.get(i, []))
        yield row


# ---------------------------------------------------------------------------
# batched engine cores


def _substeps(dt: float, jump_rate: float, stiff_rate: float) -> int:
    need = max(
        1.0,
        dt * jump_rate / _JUMP_P_BUDGET,
        dt * stiff_rate / _STIFF_BUDGET,
    )
    n = int(math.ceil(need))
    if n > _MAX_SUBSTEPS:
        raise RuntimeError(
            "step subdivision exploded (n=%d); increase jump_cutoff or reduce "
            "dt / state_cap" % n
        )
    return n


def _jump_arrays(ch: _Channel, level: np.ndarray, h: float, rng) -> np.ndarray:
    """Thinned jump increments for single consumers at the given levels.

    Draws a fixed pair of uniform arrays whether or not anything fires.
    """
    n = level.shape[0]
    uf = rng.random(n)
    us = rng.random(n)
    if ch.lam <= 0.0:
        return np.zeros(n)
    fire = uf < level * ch.lam * h
    if not np.any(fire):
        return np.zeros(n)
    sizes = ch.sizes(us)
    return np.where(fire, sizes, 0.0)


def _gauss(ch: _Channel, level: np.ndarray, h: float, rng) -> np.ndarray:
    """Diffusion plus (optionally) small-jump Gaussian for single consumers."""
    n = level.shape[0]
    g = rng.standard_normal(n)
    out = np.sqrt(2.0 * ch.sigma * level * h) * g
    if ch.ar_var > 0.0:
        gar = rng.standard_normal(n)
        out = out + np.sqrt(ch.ar_var * level * h) * gar
    return out


def _system_task(
    p: ModelParams,
    scheme: SimScheme,
    truncation: float | None,
    x_only: bool,
    low: float | None,
    high: float | None,
    retire: str | None,
    record: bool,
    dynkin: tuple | None,
    x0: np.ndarray,
    y0: np.ndarray,
    rng: np.random.Generator,
) -> dict:
    """One batch of independent (X, Y) paths.

    ``truncation`` replaces the predation driver by ``min(X, N)``.
    ``low``/``high`` are crossing levels for X; ``retire`` ("low", "high",
    "both") stops a path once the matching levels are recorded.  ``dynkin``
    is ``(x_nodes, a_vals, y_nodes, b_vals, k_coef, x_hi, y_hi)``: accumulate
    the tabulated generator of the separable quadratic along the path and
    freeze at the exit of [0, x_hi] x [0, y_hi].
    """
    n = x0.shape[0]
    x = np.array(x0, dtype=float)
    y = np.zeros(n) if x_only else np.array(y0, dtype=float)
    ch1 = _Channel.build(p.sigma1, p.n1, scheme)
    ch2 = _Channel.build(p.sigma2, p.n2, scheme)
    dt, m = scheme.dt, scheme.n_steps
    cap = scheme.state_cap

    tau_lo = np.full(n, np.inf)
    tau_hi = np.full(n, np.inf)
    abort_t = np.full(n, np.inf)
    alive = np.ones(n, dtype=bool)
    idx = np.arange(n)

    dyn_acc = np.zeros(n) if dynkin is not None else None
    dyn_ft = np.full(n, np.nan) if dynkin is not None else None
    if dynkin is not None:
        xn, av, yn, bv, kcoef, dx_hi, dy_hi = dynkin

    if record:
        rec = np.full((m + 1, n, 2), np.nan)
        rec[0, :, 0] = x
        rec[0, :, 1] = y
    events: list[PathEvent] = []

    if low is not None:
        tau_lo[x <= low] = 0.0
    if high is not None:
        tau_hi[x >= high] = 0.0
    if dynkin is not None:
        out_now = (x > dx_hi) | (y > dy_hi)
        dyn_ft[out_now] = x[out_now] ** 2 + y[out_now] ** 2
        alive &= ~out_now

    for k in range(m):
        if x.shape[0] == 0 or not np.any(alive):
            break
        mx = float(np.max(x[alive], initial=0.0))
        my = float(np.max(y[alive], initial=0.0)) if not x_only else 0.0
        jump_rate = max(ch1.lam * mx, ch2.lam * my)
        stiff = p.b1 * mx ** (p.alpha1 - 1.0) + abs(p.a1)
        if not x_only:
            stiff = max(
                stiff, p.b2 * my ** (p.alpha2 - 1.0) + abs(p.a2) + abs(p.k) * mx
            )
        nsub = _substeps(dt, jump_rate, stiff)
        h = dt / nsub
        for j in range(nsub):
            gx = _gauss(ch1, x, h, rng)
            jx = _jump_arrays(ch1, x, h, rng)
            if not x_only:
                gy = _gauss(ch2, y, h, rng)
                jy = _jump_arrays(ch2, y, h, rng)
            t_sub = k * dt + (j + 1) * h

            if dynkin is not None:
                lf = (
                    np.interp(x, xn, av)
                    + np.interp(y, yn, bv)
                    + 2.0 * kcoef * x * y * y
                )
                dyn_acc[alive] += lf[alive] * h

            phi_x = -p.b1 * x**p.alpha1 + p.a1 * x + p.gamma1
            new_x = x + phi_x * h + gx + jx - x * ch1.tlm * h
            np.maximum(new_x, 0.0, out=new_x)
            if not x_only:
                xeff = np.minimum(x, truncation) if truncation is not None else x
                phi_y = p.k * xeff * y - p.b2 * y**p.alpha2 + p.a2 * y + p.gamma2
                new_y = y + phi_y * h + gy + jy - y * ch2.tlm * h
                np.maximum(new_y, 0.0, out=new_y)
            else:
                new_y = y

            x = np.where(alive, new_x, x)
            y = np.where(alive, new_y, y)

            if record and np.any(jx > 0):
                for i in np.flatnonzero(jx > 0):
                    events.append(
                        PathEvent(t_sub, "large_jump", {"component": "X", "size": float(jx[i])})
                    )
            if record and not x_only and np.any(jy > 0):
                for i in np.flatnonzero(jy > 0):
                    events.append(
                        PathEvent(t_sub, "large_jump", {"component": "Y", "size": float(jy[i])})
                    )

            if low is not None:
                hit = alive & (x <= low) & np.isinf(tau_lo[idx])
                tau_lo[idx[hit]] = t_sub
            if high is not None:
                hit = alive & (x >= high) & np.isinf(tau_hi[idx])
                tau_hi[idx[hit]] = t_sub
            over = alive & ((x >= cap) | (y >= cap))
            if np.any(over):
                abort_t[idx[over]] = t_sub
                alive &= ~over
                if record:
                    events.append(PathEvent(t_sub, "cap_abort", {}))
            if dynkin is not None:
                out_now = alive & ((x > dx_hi) | (y > dy_hi))
                if np.any(out_now):
                    dyn_ft[idx[out_now]] = x[out_now] ** 2 + y[out_now] ** 2
                    alive &= ~out_now
            if retire in ("low", "both") and low is not None:
                alive &= ~(np.isfinite(tau_lo[idx]))
            if retire in ("high", "both") and high is not None:
                alive &= ~(np.isfinite(tau_hi[idx]))

        if record:
            rec[k + 1, :, 0] = x
            rec[k + 1, :, 1] = y
        elif (
            dynkin is None
            and k % 64 == 63
            and alive.size > 0
            and np.mean(alive) < 0.5
        ):
            keep = alive
            x, y, idx = x[keep], y[keep], idx[keep]
            alive = np.ones(int(keep.sum()), dtype=bool)

    out = {"tau_minus": tau_lo, "tau_plus": tau_hi, "abort": abort_t}
    if dynkin is not None:
        # paths never stopped by the region exit froze at the horizon
        fx = np.full(n, np.nan)
        fy = np.full(n, np.nan)
        fx[idx] = x
        fy[idx] = y
        inside = np.isnan(dyn_ft)
        dyn_ft[inside] = fx[inside] ** 2 + fy[inside] ** 2
        out["dynkin_acc"] = dyn_acc
        out["dynkin_fT"] = dyn_ft
    if record:
        out["rec"] = rec
        out["events"] = events
    else:
        fx = np.full(n, np.nan)
        fy = np.full(n, np.nan)
        fx[idx] = x
        fy[idx] = y
        out["final_x"] = fx
        out["final_y"] = fy
    return out


def _pair_gauss(ch, u, v, h, rng):
    """Overlap-coupled Gaussian increments for a pair at levels (u, v)."""
    n = u.shape[0]
    bmin = np.minimum(u, v)
    d = np.abs(u - v)
    big_u = u >= v
    gb = rng.standard_normal(n)
    gd = rng.standard_normal(n)
    common = np.sqrt(2.0 * ch.sigma * bmin * h) * gb
    extra = np.sqrt(2.0 * ch.sigma * d * h) * gd
    if ch.ar_var > 0.0:
        gab = rng.standard_normal(n)
        gad = rng.standard_normal(n)
        common = common + np.sqrt(ch.ar_var * bmin * h) * gab
        extra = extra + np.sqrt(ch.ar_var * d * h) * gad
    inc_u = common + np.where(big_u, extra, 0.0)
    inc_v = common + np.where(big_u, 0.0, extra)
    return inc_u, inc_v


def _pair_jumps(ch, u, v, h, rng):
    """Overlap-coupled thinned jumps for a pair; compensators not included."""
    n = u.shape[0]
    ub = rng.random(n)
    usb = rng.random(n)
    ud = rng.random(n)
    usd = rng.random(n)
    if ch.lam <= 0.0:
        z = np.zeros(n)
        return z, z
    bmin = np.minimum(u, v)
    d = np.abs(u - v)
    big_u = u >= v
    jb = np.where(ub < bmin * ch.lam * h, ch.sizes(usb), 0.0)
    jd = np.where(ud < d * ch.lam * h, ch.sizes(usd), 0.0)
    inc_u = jb + np.where(big_u, jd, 0.0)
    inc_v = jb + np.where(big_u, 0.0, jd)
    return inc_u, inc_v


def _sheet_gauss(ch, levels, h, rng):
    """Sheet Gaussians for several consumers: Cov = 2 sigma h min(levels)."""
    n, c = levels.shape
    order = np.argsort(levels, axis=1, kind="stable")
    sorted_lv = np.take_along_axis(levels, order, axis=1)
    gaps = np.concatenate(
        [sorted_lv[:, :1], np.diff(sorted_lv, axis=1)], axis=1
    )
    g = rng.standard_normal((n, c))
    noise = np.sqrt(2.0 * ch.sigma * gaps * h) * g
    if ch.ar_var > 0.0:
        ga = rng.standard_normal((n, c))
        noise = noise + np.sqrt(ch.ar_var * gaps * h) * ga
    cums = np.cumsum(noise, axis=1)
    inv = np.argsort(order, axis=1, kind="stable")
    return np.take_along_axis(cums, inv, axis=1)


def _sheet_jumps(ch, levels, h, rng):
    """Sheet jump marks for several consumers; a mark hits levels above it."""
    n, c = levels.shape
    uf = rng.random(n)
    up = rng.random(n)
    us = rng.random(n)
    if ch.lam <= 0.0:
        return np.zeros((n, c))
    vtop = np.max(levels, axis=1)
    fire = uf < vtop * ch.lam * h
    if not np.any(fire):
        return np.zeros((n, c))
    pos = up * vtop
    sizes = ch.sizes(us)
    recv = fire[:, None] & (levels >= pos[:, None]) & (levels > 0.0)
    return np.where(recv, sizes[:, None], 0.0)


def _coupled_task(
    p: ModelParams,
    scheme: SimScheme,
    M: float | None,
    with_aux: bool,
    audit: bool,
    ignore_exit: bool,
    high: float | None,
    record: bool,
    x0: np.ndarray,
    xt0: np.ndarray,
    y0: np.ndarray,
    yt0: np.ndarray,
    rng: np.random.Generator,
) -> dict:
    """One batch of coupled pairs, optionally with the comparison processes.

    With ``with_aux`` the initial first components must coincide and
    ``y0 >= yt0``; Z starts at ``y0 - yt0`` and Zbar at the same value, both
    consuming the second-component sheet in the difference frame.
    """
    n = x0.shape[0]
    x = np.array(x0, dtype=float)
    xt = np.array(xt0, dtype=float)
    y = np.array(y0, dtype=float)
    yt = np.array(yt0, dtype=float)
    if with_aux:
        if M is None:
            raise InvalidParams("with_aux needs the freeze level M")
        if np.any(x != xt):
            raise InvalidParams("aux comparison runs need x0 == xt0")
        if np.any(y < yt):
            raise InvalidParams("aux comparison runs need y0 >= yt0")
        z = y - yt
        zb = y - yt
        lam_bar = 2.0 * p.k * M + p.a2
    ch1 = _Channel.build(p.sigma1, p.n1, scheme)
    ch2 = _Channel.build(p.sigma2, p.n2, scheme)
    dt, m = scheme.dt, scheme.n_steps
    cap = scheme.state_cap
    delta = scheme.meet_tol

    glued_x = np.zeros(n, dtype=bool)
    glued_y = np.zeros(n, dtype=bool)
    t_x = np.full(n, np.inf)
    t_full = np.full(n, np.inf)
    zeta0 = np.full(n, np.inf)
    zetab0 = np.full(n, np.inf)
    tau_hi = np.full(n, np.inf)
    abort_t = np.full(n, np.inf)
    alive = np.ones(n, dtype=bool)
    idx = np.arange(n)
    # audit/aux/record runs keep every path active, so the full-size
    # accumulators written with np.where stay aligned; only plain
    # meeting-time runs compact their working arrays
    compactable = not (audit or record or with_aux)

    # glue anything already together at time zero
    hit = np.abs(x - xt) <= delta
    glued_x |= hit
    t_x[hit] = 0.0
    xt = np.where(glued_x, x, xt)
    hit = glued_x & (np.abs(y - yt) <= delta)
    glued_y |= hit
    t_full[hit] = 0.0
    yt = np.where(glued_y, y, yt)
    if with_aux:
        done = z <= delta
        zeta0[done] = 0.0
        z = np.where(done, 0.0, z)
        done = zb <= delta
        zetab0[done] = 0.0
        zb = np.where(done, 0.0, zb)
    if high is not None:
        tau_hi[np.maximum(x, xt) >= high] = 0.0

    if audit:
        viol_order = np.full(n, -np.inf)  # max of yt - y at grid points
        viol_z = np.zeros(n)  # max per-substep overshoot of (y - yt) over z
        viol_zbar = np.zeros(n)  # max per-substep overshoot of z over zbar
        viol_z_sum = np.zeros(n)  # summed overshoots (per-event statistics)
        viol_z_cnt = np.zeros(n, dtype=np.int64)
        viol_zbar_sum = np.zeros(n)
        viol_zbar_cnt = np.zeros(n, dtype=np.int64)

    if record:
        cols = 6 if with_aux else 4
        rec = np.full((m + 1, n, cols), np.nan)
        rec[0, :, 0] = x
        rec[0, :, 1] = xt
        rec[0, :, 2] = y
        rec[0, :, 3] = yt
        if with_aux:
            rec[0, :, 4] = z
            rec[0, :, 5] = zb
    events: list[PathEvent] = []

    for k in range(m):
        if x.shape[0] == 0 or not np.any(alive):
            break
        act = alive
        mx = float(np.max(np.maximum(x, xt)[act], initial=0.0))
        tops = [np.max(np.maximum(y, yt)[act], initial=0.0)]
        if with_aux:
            tops.append(np.max(z[act], initial=0.0))
            tops.append(np.max(zb[act], initial=0.0))
        my = float(max(tops))
        jump_rate = max(ch1.lam * mx, 2.0 * ch2.lam * my)
        stiff = p.b1 * mx ** (p.alpha1 - 1.0) + abs(p.a1)
        s2 = p.b2 * my ** (p.alpha2 - 1.0) + abs(p.a2) + abs(p.k) * mx
        if with_aux:
            s2 = max(s2, p.b2 * my ** (p.alpha2 - 1.0) + abs(lam_bar))
        stiff = max(stiff, s2)
        nsub = _substeps(dt, jump_rate, stiff)
        h = dt / nsub
        for j in range(nsub):
            t_sub = k * dt + (j + 1) * h
            d_pre_x = x - xt
            gx_u, gx_v = _pair_gauss(ch1, x, xt, h, rng)
            jx_u, jx_v = _pair_jumps(ch1, x, xt, h, rng)
            phi = -p.b1 * x**p.alpha1 + p.a1 * x + p.gamma1
            phit = -p.b1 * xt**p.alpha1 + p.a1 * xt + p.gamma1
            new_x = np.maximum(x + phi * h + gx_u + jx_u - x * ch1.tlm * h, 0.0)
            new_xt = np.maximum(xt + phit * h + gx_v + jx_v - xt * ch1.tlm * h, 0.0)

            d_pre_y = y - yt
            if with_aux:
                base = yt
                gb = rng.standard_normal(n)
                base_noise = np.sqrt(2.0 * ch2.sigma * base * h) * gb
                if ch2.ar_var > 0.0:
                    gab = rng.standard_normal(n)
                    base_noise = base_noise + np.sqrt(ch2.ar_var * base * h) * gab
                levels = np.stack([y - yt, z, zb], axis=1)
                np.maximum(levels, 0.0, out=levels)
                dvals = _sheet_gauss(ch2, levels, h, rng)
                jb_u = rng.random(n)
                jb_s = rng.random(n)
                dj = _sheet_jumps(ch2, levels, h, rng)
                if ch2.lam > 0.0:
                    jbase = np.where(jb_u < base * ch2.lam * h, ch2.sizes(jb_s), 0.0)
                else:
                    jbase = np.zeros(n)
                phi_y = p.k * x * y - p.b2 * y**p.alpha2 + p.a2 * y + p.gamma2
                phi_yt = p.k * x * yt - p.b2 * yt**p.alpha2 + p.a2 * yt + p.gamma2
                phi_z = p.k * x * z - p.b2 * z**p.alpha2 + p.a2 * z
                phi_zb = lam_bar * zb - p.b2 * zb**p.alpha2
                new_y = np.maximum(
                    y
                    + phi_y * h
                    + base_noise
                    + dvals[:, 0]
                    + jbase
                    + dj[:, 0]
                    - y * ch2.tlm * h,
                    0.0,
                )
                new_yt = np.maximum(
                    yt + phi_yt * h + base_noise + jbase - yt * ch2.tlm * h, 0.0
                )
                new_z = np.maximum(
                    z + phi_z * h + dvals[:, 1] + dj[:, 1] - z * ch2.tlm * h, 0.0
                )
                new_zb = np.maximum(
                    zb + phi_zb * h + dvals[:, 2] + dj[:, 2] - zb * ch2.tlm * h, 0.0
                )
            else:
                gy_u, gy_v = _pair_gauss(ch2, y, yt, h, rng)
                jy_u, jy_v = _pair_jumps(ch2, y, yt, h, rng)
                phi_y = p.k * x * y - p.b2 * y**p.alpha2 + p.a2 * y + p.gamma2
                phi_yt = p.k * xt * yt - p.b2 * yt**p.alpha2 + p.a2 * yt + p.gamma2
                new_y = np.maximum(
                    y + phi_y * h + gy_u + jy_u - y * ch2.tlm * h, 0.0
                )
                new_yt = np.maximum(
                    yt + phi_yt * h + gy_v + jy_v - yt * ch2.tlm * h, 0.0
                )

            x = np.where(alive, new_x, x)
            xt = np.where(alive, new_xt, xt)
            y = np.where(alive, new_y, y)
            yt = np.where(alive, new_yt, yt)

            # gluing: tolerance hit or sign change within the substep
            d_new = x - xt
            meet = alive & ~glued_x & (
                (np.abs(d_new) <= delta) | (d_pre_x * d_new < 0.0) | (d_new == 0.0)
            )
            if np.any(meet):
                t_x[idx[meet]] = t_sub
                glued_x |= meet
                if record:
                    events.append(PathEvent(t_sub, "glue", {"pair": "X"}))
            xt = np.where(glued_x, x, xt)

            d_new = y - yt
            meet = (
                alive
                & glued_x
                & ~glued_y
                & (
                    (np.abs(d_new) <= delta)
                    | (d_pre_y * d_new < 0.0)
                    | (d_new == 0.0)
                )
            )
            if np.any(meet):
                t_full[idx[meet]] = t_sub
                glued_y |= meet
                if record:
                    events.append(PathEvent(t_sub, "glue", {"pair": "Y"}))
            yt = np.where(glued_y, y, yt)

            if with_aux:
                # a negative comparison gap within a substep means the
                # continuum paths met; project the dominating process up by
                # the overshoot and let the audit record the residual
                d_now = np.maximum(y - yt, 0.0)
                ov_z = np.where(alive, np.maximum(d_now - new_z, 0.0), 0.0)
                new_z = new_z + ov_z
                ov_zb = np.where(alive, np.maximum(new_z - new_zb, 0.0), 0.0)
                new_zb = new_zb + ov_zb
                z = np.where(alive, new_z, z)
                zb = np.where(alive, new_zb, zb)
                if audit:
                    if ignore_exit:
                        scope = alive
                    else:
                        th = tau_hi[idx]
                        scope = alive & (np.isinf(th) | (th >= t_sub))
                    viol_z = np.where(scope, np.maximum(viol_z, ov_z), viol_z)
                    viol_zbar = np.where(
                        scope, np.maximum(viol_zbar, ov_zb), viol_zbar
                    )
                    hit_z = scope & (ov_z > 0.0)
                    viol_z_sum[hit_z] += ov_z[hit_z]
                    viol_z_cnt[hit_z] += 1
                    hit_zb = scope & (ov_zb > 0.0)
                    viol_zbar_sum[hit_zb] += ov_zb[hit_zb]
                    viol_zbar_cnt[hit_zb] += 1

                done = alive & (z <= delta) & np.isinf(zeta0)
                zeta0[done] = t_sub
                z = np.where(z <= delta, 0.0, z)
                done = alive & (zb <= delta) & np.isinf(zetab0)
                zetab0[done] = t_sub
                zb = np.where(zb <= delta, 0.0, zb)

            if high is not None:
                hit = alive & (np.maximum(x, xt) >= high) & np.isinf(tau_hi[idx])
                tau_hi[idx[hit]] = t_sub
            states_top = np.maximum(np.maximum(x, xt), np.maximum(y, yt))
            if with_aux:
                states_top = np.maximum(states_top, np.maximum(z, zb))
            over = alive & (states_top >= cap)
            if np.any(over):
                abort_t[idx[over]] = t_sub
                alive &= ~over
                if record:
                    events.append(PathEvent(t_sub, "cap_abort", {}))

        if audit:
            act = alive & (np.isinf(abort_t))
            if not ignore_exit:
                act &= ~(np.isfinite(tau_hi) & (tau_hi <= (k + 1) * dt))
            viol_order = np.where(act, np.maximum(viol_order, yt - y), viol_order)
        if record:
            rec[k + 1, :, 0] = x
            rec[k + 1, :, 1] = xt
            rec[k + 1, :, 2] = y
            rec[k + 1, :, 3] = yt
            if with_aux:
                rec[k + 1, :, 4] = z
                rec[k + 1, :, 5] = zb
        if compactable:
            # meeting-time runs can drop fully-met paths
            alive &= ~(glued_x & glued_y)
            if k % 64 == 63 and alive.size > 0 and np.mean(alive) < 0.5:
                keep = alive
                x, xt = x[keep], xt[keep]
                y, yt = y[keep], yt[keep]
                glued_x, glued_y = glued_x[keep], glued_y[keep]
                idx = idx[keep]
                alive = np.ones(int(keep.sum()), dtype=bool)

    out = {
        "t_x": t_x,
        "t_full": t_full,
        "tau_plus": tau_hi,
        "abort": abort_t,
    }
    if with_aux:
        out["zeta0"] = zeta0
        out["zetabar0"] = zetab0
    if audit:
        out["viol_order"] = viol_order
        out["viol_z"] = viol_z
        out["viol_zbar"] = viol_zbar
        out["viol_z_sum"] = viol_z_sum
        out["viol_z_cnt"] = viol_z_cnt
        out["viol_zbar_sum"] = viol_zbar_sum
        out["viol_zbar_cnt"] = viol_zbar_cnt
    if record:
        out["rec"] = rec
        out["events"] = events
    return out


def _scalar_task(
    kind: str,
    args: tuple,
    scheme: SimScheme,
    z0: np.ndarray,
    rng: np.random.Generator,
) -> dict:
    """One batch of a one-dimensional process.

    kinds: ``zbar`` (args = (params, M)): absorption at meet_tol recorded;
    ``zdriver`` (args = (params, x_path)): dominating process along a frozen
    driver; ``cir`` (args = (b, gamma, sigma, hit_level)): mean-reverting
    diffusion with bridge-corrected level crossing.
    """
    n = z0.shape[0]
    z = np.array(z0, dtype=float)
    dt, m = scheme.dt, scheme.n_steps
    cap = scheme.state_cap
    hitting = np.full(n, np.inf)
    abort_t = np.full(n, np.inf)
    idx = np.arange(n)
    alive = np.ones(n, dtype=bool)

    if kind == "cir":
        b_cir, gamma_cir, sigma_cir, level = args
        ch = _Channel.build(sigma_cir, ZeroMeasure(), scheme)
        alive &= z > level
        hitting[z <= level] = 0.0
    elif kind == "zbar":
        p, M = args
        ch = _Channel.build(p.sigma2, p.n2, scheme)
        lam_bar = 2.0 * p.k * M + p.a2
        tol = scheme.meet_tol
        hitting[z <= tol] = 0.0
        z[z <= tol] = 0.0
        alive &= z > 0.0
    elif kind == "zdriver":
        p, xpath = args
        ch = _Channel.build(p.sigma2, p.n2, scheme)
        tol = scheme.meet_tol
        hitting[z <= tol] = 0.0
        z[z <= tol] = 0.0
        alive &= z > 0.0
    else:
        raise InvalidParams("unknown scalar engine %r" % kind)

    for k in range(m):
        if z.shape[0] == 0 or not np.any(alive):
            break
        mz = float(np.max(z[alive], initial=0.0))
        if kind == "cir":
            stiff = b_cir
            jump_rate = 0.0
        elif kind == "zbar":
            stiff = p.b2 * mz ** (p.alpha2 - 1.0) + abs(lam_bar)
            jump_rate = ch.lam * mz
        else:
            xk = float(xpath[min(k, len(xpath) - 1)])
            stiff = p.b2 * mz ** (p.alpha2 - 1.0) + abs(p.a2) + abs(p.k) * xk
            jump_rate = ch.lam * mz
        nsub = _substeps(dt, jump_rate, stiff)
        h = dt / nsub
        for j in range(nsub):
            t_sub = k * dt + (j + 1) * h
            g = _gauss(ch, z, h, rng)
            jz = (
                _jump_arrays(ch, z, h, rng)
                if not isinstance(ch.measure, ZeroMeasure)
                else 0.0
            )
            if kind == "cir":
                drift = -b_cir * z + gamma_cir
                ub = rng.random(z.shape[0])
            elif kind == "zbar":
                drift = lam_bar * z - p.b2 * z**p.alpha2
            else:
                drift = p.k * xk * z - p.b2 * z**p.alpha2 + p.a2 * z
            new_z = z + drift * h + g + jz - z * ch.tlm * h
            np.maximum(new_z, 0.0, out=new_z)

            if kind == "cir":
                was = alive & np.isinf(hitting[idx])
                crossed = was & (new_z <= level)
                if np.any(crossed):
                    frac = np.clip(
                        (z[crossed] - level)
                        / np.maximum(z[crossed] - new_z[crossed], 1e-300),
                        0.0,
                        1.0,
                    )
                    hitting[idx[crossed]] = t_sub - h + frac * h
                above = was & (new_z > level)
                if np.any(above):
                    vbar = sigma_cir * (z[above] + new_z[above])  # 2*sigma*mean
                    expo = (
                        -2.0
                        * (z[above] - level)
                        * (new_z[above] - level)
                        / np.maximum(vbar * h, 1e-300)
                    )
                    bridge = above.copy()
                    bridge[above] = ub[above] < np.exp(expo)
                    if np.any(bridge):
                        hitting[idx[bridge]] = t_sub - 0.5 * h
                        crossed = crossed | bridge
                alive &= np.isinf(hitting[idx])
            else:
                done = alive & (new_z <= tol) & np.isinf(hitting[idx])
                if np.any(done):
                    hitting[idx[done]] = t_sub
                    new_z[done] = 0.0
                alive &= np.isinf(hitting[idx])
            over = alive & (new_z >= cap)
            if np.any(over):
                abort_t[idx[over]] = t_sub
                alive &= ~over
            z = new_z
        if k % 64 == 63 and alive.size > 0 and np.mean(alive) < 0.5:
            keep = alive
            z, idx = z[keep], idx[keep]
            alive = np.ones(int(keep.sum()), dtype=bool)

    return {"hitting": hitting, "abort": abort_t}


# ---------------------------------------------------------------------------
# batch fan-out


def _run_task(payload):
    fn, static, arrays, seed, tag = payload
    rng = stream(seed, tag)
    return fn(*static, *arrays, rng)


def _fanout(fn, static, arrays, seed, tag_base, workers):
    n = arrays[0].shape[0]
    tasks = []
    for b, lo in enumerate(range(0, n, BATCH)):
        hi = min(lo + BATCH, n)
        tasks.append((fn, static, tuple(a[lo:hi] for a in arrays), seed, tag_base + b))
    if workers <= 1 or len(tasks) == 1:
        results = [_run_task(t) for t in tasks]
    else:
        ctx = get_context("fork")
        with ctx.Pool(processes=min(workers, len(tasks))) as pool:
            results = pool.map(_run_task, tasks)
    merged = {}
    for key in results[0]:
        parts = [r[key] for r in results]
        if isinstance(parts[0], np.ndarray):
            # recorded grids are (n_steps+1, batch, n_cols); the path axis is 1
            axis = 1 if parts[0].ndim == 3 else 0
            merged[key] = np.concatenate(parts, axis=axis)
        else:
            merged[key] = [item for part in parts for item in part]
    return merged


def resolve_workers(workers) -> int:
    if workers in (None, "auto"):
        return max(1, (os.cpu_count() or 2) - 1)
    return max(1, int(workers))


def mc_system(
    p: ModelParams,
    scheme: SimScheme,
    x0s: np.ndarray,
    y0s: np.ndarray | None,
    seed: int,
    *,
    truncation: float | None = None,
    x_only: bool = False,
    low: float | None = None,
    high: float | None = None,
    retire: str | None = None,
    record: bool = False,
    dynkin: tuple | None = None,
    workers: int = 1,
) -> dict:
    x0s = np.asarray(x0s, dtype=float)
    y0s = np.zeros_like(x0s) if y0s is None else np.asarray(y0s, dtype=float)
    return _fanout(
        _system_task,
        (p, scheme, truncation, x_only, low, high, retire, record, dynkin),
        (x0s, y0s),
        seed,
        _TAG_SYSTEM,
        workers,
    )


def mc_coupled(
    p: ModelParams,
    scheme: SimScheme,
    x0s,
    xt0s,
    y0s,
    yt0s,
    seed: int,
    *,
    M: float | None = None,
    with_aux: bool = False,
    audit: bool = False,
    ignore_exit: bool = False,
    high: float | None = None,
    workers: int = 1,
) -> dict:
    arrays = tuple(np.asarray(a, dtype=float) for a in (x0s, xt0s, y0s, yt0s))
    return _fanout(
        _coupled_task,
        (p, scheme, M, with_aux, audit, ignore_exit, high, False),
        arrays,
        seed,
        _TAG_COUPLED,
        workers,
    )


def mc_zbar(
    p: ModelParams, scheme: SimScheme, M: float, z0s, seed: int, workers: int = 1
) -> dict:
    z0s = np.asarray(z0s, dtype=float)
    return _fanout(
        _scalar_task, ("zbar", (p, M), scheme), (z0s,), seed, _TAG_ZBAR, workers
    )


def mc_cir(
    b: float,
    gamma: float,
    sigma: float,
    scheme: SimScheme,
    z0s,
    seed: int,
    hit_level: float = 1.0,
    workers: int = 1,
) -> dict:
    z0s = np.asarray(z0s, dtype=float)
    return _fanout(
        _scalar_task,
        ("cir", (b, gamma, sigma, hit_level), scheme),
        (z0s,),
        seed,
        _TAG_CIR,
        workers,
    )


# ---------------------------------------------------------------------------
# single-path wrappers


def _single_stopping(scheme, **kwargs) -> StoppingRecord:
    return StoppingRecord(horizon=scheme.horizon, **kwargs)


def simulate_cbipc(
    p: ModelParams,
    scheme: SimScheme,
    init: tuple[float, float],
    rng,
    *,
    low: float | None = None,
    high: float | None = None,
) -> PathGrid:
    """One (X, Y) path on the dt-grid with optional X crossing levels."""
    rng = _as_rng(rng)
    out = _system_task(
        p,
        scheme,
        None,
        False,
        low,
        high,
        None,
        True,
        None,
        np.array([init[0]], dtype=float),
        np.array([init[1]], dtype=float),
        rng,
    )
    times = np.arange(scheme.n_steps + 1) * scheme.dt
    stopping = _single_stopping(
        scheme,
        tau_minus=float(out["tau_minus"][0]) if low is not None else None,
        tau_minus_level=low,
        tau_plus=float(out["tau_plus"][0]) if high is not None else None,
        tau_plus_level=high,
        cap_abort=float(out["abort"][0]) if np.isfinite(out["abort"][0]) else None,
    )
    return PathGrid(
        times=times,
        states={"X": out["rec"][:, 0, 0], "Y": out["rec"][:, 0, 1]},
        events=out["events"],
        stopping=stopping,
    )


def simulate_truncated(
    p: ModelParams,
    scheme: SimScheme,
    N: float,
    init: tuple[float, float],
    rng,
) -> PathGrid:
    """Path of the N-truncated system: predation driven by min(X, N).

    Under the same stream the truncated and plain paths are bitwise equal at
    every grid point up to the first passage of X above N.
    """
    rng = _as_rng(rng)
    out = _system_task(
        p,
        scheme,
        N,
        False,
        None,
        N,
        None,
        True,
        None,
        np.array([init[0]], dtype=float),
        np.array([init[1]], dtype=float),
        rng,
    )
    times = np.arange(scheme.n_steps + 1) * scheme.dt
    stopping = _single_stopping(
        scheme,
        tau_plus=float(out["tau_plus"][0]),
        tau_plus_level=N,
        cap_abort=float(out["abort"][0]) if np.isfinite(out["abort"][0]) else None,
    )
    return PathGrid(
        times=times,
        states={"X": out["rec"][:, 0, 0], "Y": out["rec"][:, 0, 1]},
        events=out["events"],
        stopping=stopping,
    )


def simulate_coupled(
    p: ModelParams,
    scheme: SimScheme,
    init: tuple[float, float, float, float],
    rng,
    *,
    M: float | None = None,
    with_aux: bool = False,
    high: float | None = None,
) -> PathGrid:
    """One coupled path ((X, Y), (Xt, Yt)), optionally with (Z, Zbar)."""
    rng = _as_rng(rng)
    x0, xt0, y0, yt0 = (np.array([v], dtype=float) for v in init)
    out = _coupled_task(
        p, scheme, M, with_aux, False, False, high, True, x0, xt0, y0, yt0, rng
    )
    times = np.arange(scheme.n_steps + 1) * scheme.dt
    states = {
        "X": out["rec"][:, 0, 0],
        "Xt": out["rec"][:, 0, 1],
        "Y": out["rec"][:, 0, 2],
        "Yt": out["rec"][:, 0, 3],
    }
    kwargs = {}
    if with_aux:
        states["Z"] = out["rec"][:, 0, 4]
        states["Zbar"] = out["rec"][:, 0, 5]
        kwargs["zeta0"] = float(out["zeta0"][0])
        kwargs["zetabar0"] = float(out["zetabar0"][0])
    stopping = _single_stopping(
        scheme,
        t_x=float(out["t_x"][0]),
        t_full=float(out["t_full"][0]),
        tau_plus=float(out["tau_plus"][0]) if high is not None else None,
        tau_plus_level=high,
        cap_abort=float(out["abort"][0]) if np.isfinite(out["abort"][0]) else None,
        **kwargs,
    )
    return PathGrid(times=times, states=states, events=out["events"], stopping=stopping)


def simulate_aux_Zbar(
    p: ModelParams, scheme: SimScheme, M: float, z0: float, rng
) -> PathGrid:
    """Dominating frozen process; only the absorption time is recorded."""
    rng = _as_rng(rng)
    out = _scalar_task("zbar", (p, M), scheme, np.array([z0], dtype=float), rng)
    stopping = _single_stopping(
        scheme,
        zetabar0=float(out["hitting"][0]),
        cap_abort=float(out["abort"][0]) if np.isfinite(out["abort"][0]) else None,
    )
    return PathGrid(
        times=np.array([0.0]),
        states={},
        events=[],
        stopping=stopping,
    )


def simulate_aux_Z(
    p: ModelParams, scheme: SimScheme, driver: PathGrid, z0: float, rng
) -> PathGrid:
    """Dominating process along a frozen X driver path."""
    rng = _as_rng(rng)
    xpath = np.asarray(driver.states["X"], dtype=float)
    out = _scalar_task(
        "zdriver", (p, xpath), scheme, np.array([z0], dtype=float), rng
    )
    stopping = _single_stopping(
        scheme,
        zeta0=float(out["hitting"][0]),
        cap_abort=float(out["abort"][0]) if np.isfinite(out["abort"][0]) else None,
    )
    return PathGrid(times=np.array([0.0]), states={}, events=[], stopping=stopping)


def simulate_cir(
    b: float, gamma: float, sigma: float, scheme: SimScheme, x0: float, rng
) -> PathGrid:
    """Mean-reverting branching diffusion; records the passage below 1."""
    rng = _as_rng(rng)
    out = _scalar_task(
        "cir", (b, gamma, sigma, 1.0), scheme, np.array([x0], dtype=float), rng
    )
    stopping = _single_stopping(scheme, zeta0=float(out["hitting"][0]))
    return PathGrid(times=np.array([0.0]), states={}, events=[], stopping=stopping)
