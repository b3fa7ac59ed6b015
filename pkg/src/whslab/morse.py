"""Gradient dynamics of a Morse function on the flat torus.

Trajectories of ``x' = -grad h`` are integrated with a batched, per-row
adaptive Dormand-Prince 5(4) scheme (the Butcher tableau and dense-output
polynomials are taken from :class:`scipy.integrate.RK45`).  Connecting
orbits between consecutive-index critical points are located by shooting
from a small sphere in the unstable eigenspace and refining sign changes by
bisection.  Orientations follow the "outward normal first" convention so
that the incidence numbers satisfy Stokes' theorem on the unstable cells.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import RK45

from .errors import (AmbiguousCluster, BoundarySquareNonzero, FlowStall, FrameDegeneracy,
                     MeshUnderResolved, TransversalityWarning)
from .forms import GridForm, basis, d as exterior_d
from .geometry import CriticalPoint, MorseFunctionSpec, index_counts, minimal_distance, torus_delta

_C = RK45.C
_A = RK45.A
_B = RK45.B
_E = RK45.E
_P = RK45.P

DEFAULT_TOL = 1e-10
TRUNCATION_RADIUS = 1e-7


# ---------------------------------------------------------------------------
# batched Dormand-Prince integrator


def _dp45(rhs: Callable, y0: np.ndarray, stop: Callable, *, atol: float, rtol: float,
          h0: float, max_steps: int, t_max: float, on_accept: Callable | None = None,
          post: Callable | None = None, err_cols: int | None = None,
          stalled: np.ndarray | None = None) -> tuple:
    """Integrate the rows of ``y0`` independently until ``stop`` flags them.

    ``stop(rows, y)`` returns a boolean mask over ``rows``; ``on_accept`` is
    called as ``on_accept(rows, t_old, h, y_old, y_new, Q)`` where ``Q`` holds
    the dense-output coefficients, ``y(t_old + s h) = y_old + h Q @ [s, s^2, s^3, s^4]``.
    ``post(rows, y)`` may modify accepted states in place (for example to
    re-orthonormalize a transported frame).  With ``err_cols`` only the
    leading columns enter the error norm, so carrying auxiliary state does not
    change the step sequence.  When a boolean array ``stalled`` is given,
    rows exceeding the limits are flagged there instead of raising.
    Returns ``(y, t)``.
    """
    y = np.array(y0, dtype=float, copy=True)
    M, D = y.shape
    t = np.zeros(M)
    h = np.full(M, float(h0))
    steps = np.zeros(M, dtype=int)
    active = np.ones(M, dtype=bool)
    f = rhs(y)
    done0 = stop(np.arange(M), y)
    active[done0] = False
    while active.any():
        idx = np.nonzero(active)[0]
        yi, hi = y[idx], h[idx]
        K = np.empty((7, idx.size, D))
        K[0] = f[idx]
        for s in range(1, 6):
            dy = np.tensordot(_A[s, :s], K[:s], axes=(0, 0))
            K[s] = rhs(yi + hi[:, None] * dy)
        y_new = yi + hi[:, None] * np.tensordot(_B, K[:6], axes=(0, 0))
        f_new = rhs(y_new)
        K[6] = f_new
        c = D if err_cols is None else err_cols
        err = hi[:, None] * np.tensordot(_E, K[:, :, :c], axes=(0, 0))
        scale = atol + rtol * np.maximum(np.abs(yi[:, :c]), np.abs(y_new[:, :c]))
        en = np.sqrt(np.mean((err / scale) ** 2, axis=1))
        ok = en <= 1.0
        if ok.any():
            acc = idx[ok]
            if on_accept is not None:
                Q = np.einsum("smd,sp->mdp", K[:, ok], _P)
                on_accept(acc, t[acc], hi[ok], yi[ok], y_new[ok], Q)
            y[acc] = y_new[ok]
            f[acc] = f_new[ok]
            t[acc] += hi[ok]
            steps[acc] += 1
            if post is not None and post(acc, y):
                f[acc] = rhs(y[acc])
            fin = stop(acc, y[acc])
            active[acc[fin]] = False
        with np.errstate(divide="ignore"):
            fac = np.where(en == 0, 10.0, 0.9 * en ** -0.2)
        fac = np.clip(fac, 0.2, 10.0)
        fac[~ok] = np.minimum(fac[~ok], 1.0)
        h[idx] = hi * fac
        bad = active & ((steps > max_steps) | (t > t_max) | (h < 1e-14))
        if bad.any() and stalled is not None:
            stalled[bad] = True
            active[bad] = False
        elif bad.any():
            r = int(np.nonzero(bad)[0][0])
            raise FlowStall(f"trajectory {r} not captured after {steps[r]} steps (time {t[r]:.4g}); "
                            "near-degenerate geometry or a missing critical point")
    return y, t


def _gauss_legendre(m: int) -> tuple:
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (x + 1.0), 0.5 * w


def _dense_eval(y_old, h, Q, s):
    """Dense output at fractions ``s`` of each step; returns (rows, len(s), D)."""
    powers = np.stack([s, s ** 2, s ** 3, s ** 4], axis=0)  # (4, S)
    return y_old[:, None, :] + h[:, None, None] * np.einsum("mdp,ps->msd", Q, powers)


# ---------------------------------------------------------------------------
# trajectories and flows


@dataclass(frozen=True)
class Trajectory:
    """Samples of a solution of the (negative) gradient flow.

    ``points`` are unwrapped coordinates (continuous in the universal
    cover); reduce them modulo 1 for positions on the torus.
    """

    times: np.ndarray = field(repr=False)
    points: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    origin: str | None
    destination: str | None

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.values) < 0))

    def level_crossing(self, c: float) -> np.ndarray:
        """Point where h first drops below ``c`` (linear interpolation, reduced mod 1)."""
        below = np.nonzero(self.values < c)[0]
        if below.size == 0 or below[0] == 0:
            raise ValueError(f"trajectory does not cross the level {c}")
        i = below[0]
        v0, v1 = self.values[i - 1], self.values[i]
        s = (v0 - c) / (v0 - v1)
        return np.mod(self.points[i - 1] + s * (self.points[i] - self.points[i - 1]), 1.0)


class MorseFlow:
    """Gradient-flow integrator bound to a Morse function and its critical set."""

    def __init__(self, spec: MorseFunctionSpec, points: Sequence[CriticalPoint],
                 capture_radius: float | None = None, tol: float = DEFAULT_TOL):
        self.spec = spec
        self.points = tuple(points)
        if len(self.points) < 2:
            raise ValueError("a Morse function on a closed manifold has at least two critical points")
        self.n = spec.n
        self.positions = np.array([c.x for c in self.points])
        self.values = np.array([c.value for c in self.points])
        self.indices = np.array([c.index for c in self.points])
        self.labels = [c.label for c in self.points]
        self.d_min = minimal_distance(self.points)
        self.capture_radius = 0.05 * self.d_min if capture_radius is None else float(capture_radius)
        self.tol = tol
        eigs = np.concatenate([c.abs_eigs for c in self.points])
        self.lam_min = float(np.min(eigs))
        self.lam_max = float(np.max(eigs))
        self.t_max = 400.0 / self.lam_min
        self.h_curv = 0.5 * spec.hessian_bound()

    def point(self, label: str) -> CriticalPoint:
        return self.points[self.labels.index(label)]

    # distances from rows to every critical point
    def _dist(self, y: np.ndarray) -> np.ndarray:
        return np.linalg.norm(torus_delta(y[:, None, :], self.positions[None]), axis=-1)

    def _rhs(self, sign: float, frame_cols: int = 0):
        spec, n = self.spec, self.n

        def rhs(y):
            x = y[:, :n]
            out = np.empty_like(y)
            out[:, :n] = sign * spec.grad(x)
            if frame_cols:
                H = spec.hessian(x)
                V = y[:, n:].reshape(-1, n, frame_cols)
                out[:, n:] = (sign * np.einsum("mij,mjk->mik", H, V)).reshape(len(y), -1)
            return out
        return rhs

    def integrate(self, starts: np.ndarray, *, reverse: bool = False, frames: np.ndarray | None = None,
                  orthonormalize: bool = False, targets: np.ndarray | None = None,
                  radius: float | None = None, stop_below: np.ndarray | None = None,
                  tol: float | None = None, on_accept: Callable | None = None,
                  record: bool = True, allow_stall: bool = False) -> dict:
        """Batched flow from ``starts`` with capture at critical points.

        A row is captured by critical point ``c`` when within ``radius`` of it,
        ``c`` is allowed by the boolean ``targets`` matrix (rows x points) and
        ``h(c)`` lies strictly below (above, when ``reverse``) the starting
        value.  Rows with ``stop_below`` set also stop once h falls below it.
        With ``allow_stall`` rows that never get captured are flagged in
        ``stalled`` instead of raising :class:`FlowStall`.
        """
        starts = np.atleast_2d(np.asarray(starts, dtype=float))
        M, n = starts.shape
        tol = self.tol if tol is None else tol
        radius = self.capture_radius if radius is None else radius
        sign = 1.0 if reverse else -1.0
        m = 0 if frames is None else frames.shape[-1]
        y0 = starts if frames is None else np.hstack([starts, frames.reshape(M, -1)])
        h_start = self.spec.value(starts)
        allowed = (self.values[None, :] > h_start[:, None]) if reverse else (self.values[None, :] < h_start[:, None])
        if targets is not None:
            allowed &= targets
        dest = np.full(M, -1)
        below = np.zeros(M, dtype=bool)
        stalled = np.zeros(M, dtype=bool) if allow_stall else None
        samples = [[(0.0, y0[i].copy())] for i in range(M)] if record else None
        t_now = np.zeros(M)

        def stop(rows, y):
            x = y[:, :n]
            dist = self._dist(x)
            hit = (dist < radius) & allowed[rows]
            got = hit.any(axis=1)
            dest[rows[got]] = np.argmin(np.where(hit[got], dist[got], np.inf), axis=1)
            fin = got.copy()
            if stop_below is not None:
                lo = self.spec.value(x) < stop_below[rows]
                below[rows[lo & ~got]] = True
                fin |= lo
            return fin

        def accept(rows, t_old, hstep, y_old, y_new, Q):
            t_now[rows] = t_old + hstep
            if record:
                for r, tt, yy in zip(rows, t_old + hstep, y_new):
                    samples[r].append((tt, yy.copy()))
            if on_accept is not None:
                on_accept(rows, t_old, hstep, y_old, y_new, Q)

        def post(rows, y):
            if not orthonormalize:
                return False
            V = y[rows, n:].reshape(-1, n, m)
            Qm, R = np.linalg.qr(V)
            diag = np.diagonal(R, axis1=1, axis2=2)
            if np.any(np.abs(diag) < 1e-12):
                raise FrameDegeneracy("transported frame lost rank during re-orthonormalization")
            Qm = Qm * np.sign(diag)[:, None, :]
            y[rows, n:] = Qm.reshape(len(rows), -1)
            return True

        h0 = 1e-2 / self.lam_max
        y_end, _ = _dp45(self._rhs(sign, m), y0, stop, atol=tol, rtol=tol, h0=h0,
                         max_steps=200000, t_max=self.t_max, on_accept=accept, post=post,
                         err_cols=n if orthonormalize else None, stalled=stalled)
        return {"y": y_end, "dest": dest, "below": below, "samples": samples, "h_start": h_start,
                "stalled": np.zeros(M, dtype=bool) if stalled is None else stalled}

    def trajectory_from(self, samples, origin, dest_idx) -> Trajectory:
        times = np.array([s[0] for s in samples])
        pts = np.array([s[1][:self.n] for s in samples])
        return Trajectory(times, pts, self.spec.value(pts), origin,
                          self.labels[dest_idx] if dest_idx >= 0 else None)


def flow(spec: MorseFunctionSpec, points: Sequence[CriticalPoint], start, tol: float = DEFAULT_TOL,
         reverse: bool = False, capture_radius: float | None = None) -> Trajectory:
    """Follow -grad h (or +grad h with ``reverse``) from ``start`` until capture."""
    mf = MorseFlow(spec, points, capture_radius, tol)
    start = np.asarray(start, dtype=float).reshape(1, spec.n)
    if np.min(mf._dist(start)) < mf.capture_radius:
        raise ValueError("start point lies inside the capture ball of a critical point")
    res = mf.integrate(start, reverse=reverse)
    return mf.trajectory_from(res["samples"][0], None, int(res["dest"][0]))


# ---------------------------------------------------------------------------
# connecting orbits


@dataclass(frozen=True)
class ConnectingOrbit:
    """A flow line from ``x`` to ``y`` with its orientation data.

    ``frame_end`` is the unstable frame of ``x`` (without its orientation
    sign) transported along the orbit; ``direction_end`` is the unit flow
    direction at arrival.
    """

    trajectory: Trajectory = field(repr=False)
    x: str
    y: str
    launch: np.ndarray = field(repr=False)
    crossing: np.ndarray = field(repr=False)
    frame_end: np.ndarray = field(repr=False)
    direction_end: np.ndarray = field(repr=False)
    sign: int
    angle: float | None = None


def orbit_sign(orbit: ConnectingOrbit, x: CriticalPoint, y: CriticalPoint) -> int:
    """Sign of an orbit relative to the orientations of ``x`` and ``y``.

    The transported frame of W_x^- is compared with (flow direction, frame
    of W_y^-), the flow direction playing the role of the outward normal.
    """
    if x.index != y.index + 1:
        raise ValueError("orbit signs are defined for consecutive indices only")
    T = orbit.frame_end
    target = np.column_stack([orbit.direction_end, y.unstable_frame])
    det = float(np.linalg.det(T.T @ target))
    if abs(det) < 0.05:
        raise FrameDegeneracy(f"transported frame of {x.label} is nearly degenerate at {y.label} (det {det:.3g})")
    return int(np.sign(det)) * x.orientation * y.orientation


def top_cell_radius(mf: MorseFlow, x: CriticalPoint) -> float:
    """Largest disc around a local maximum on which -grad h points strictly outward.

    Such a disc lies inside W_x^- and every flow line crosses its boundary
    exactly once, so it can replace the small shooting sphere; on it the
    linearized flow has not yet compressed the seed directions.
    """
    others = [float(np.linalg.norm(torus_delta(c.x, x.x))) for c in mf.points if c.label != x.label]
    R = 0.45 * min(others)
    rho = np.linspace(0.05, 1.0, 20)
    th = 2 * math.pi * np.arange(64) / 64
    u = (rho[:, None, None] * np.stack([np.cos(th), np.sin(th)], axis=-1)[None]).reshape(-1, 2) @ x.unstable_frame.T
    lam = float(np.min(x.abs_eigs))
    while R > mf.capture_radius:
        p = x.x + R * u
        radial = np.sum(-mf.spec.grad(p) * (R * u), axis=1)
        if np.all(radial > 0.25 * lam * np.sum((R * u) ** 2, axis=1)):
            return R
        R *= 0.8
    return mf.capture_radius


def _unit_sphere_angles(count: int) -> np.ndarray:
    return 2 * math.pi * (np.arange(count) + 0.5) / count


class _Shooter:
    """Finds all orbits from one critical point to the points one index lower."""

    def __init__(self, mf: MorseFlow, x: CriticalPoint, radius: float | None = None):
        self.mf = mf
        self.x = x
        if radius is None:
            radius = top_cell_radius(mf, x) if x.index == mf.n == 2 else mf.capture_radius
        self.r0 = radius
        lower = [i for i, c in enumerate(mf.points) if c.index == x.index - 1]
        self.lower = lower
        self.infl = 0.25 * mf.d_min

    def seed(self, theta: np.ndarray) -> np.ndarray:
        E = self.x.unstable_frame
        u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return self.x.x + self.r0 * u @ E.T

    def classify(self, theta: np.ndarray) -> tuple:
        """Landing key and saddle sides for seeds at angles ``theta``.

        The key is (sink index, integer lift of the endpoint in the universal
        cover); trajectories are captured at sinks only, so a change of key
        between neighbouring seeds brackets a flow line ending at a saddle.
        ``sides`` (seeds x targets) records on which side of each target's
        stable manifold the seed passes, +1/-1, or 0 when it never enters the
        influence ball of that target.
        """
        mf = self.mf
        starts = self.seed(theta)
        M = len(starts)
        lower = self.lower
        best = np.full((M, len(lower)), np.inf)
        side = np.zeros((M, len(lower)), dtype=int)
        pos = mf.positions[lower]
        eu = np.array([mf.points[i].unstable_frame[:, 0] for i in lower])

        def watch(rows, t_old, hstep, y_old, y_new, Q):
            delta = torus_delta(y_new[:, None, :mf.n], pos[None])
            dist = np.linalg.norm(delta, axis=-1)
            closer = (dist < best[rows]) & (dist < self.infl)
            comp = np.einsum("mjd,jd->mj", delta, eu)
            sub = side[rows]
            sub[closer] = np.where(comp[closer] >= 0, 1, -1)
            side[rows] = sub
            b = best[rows]
            b[closer] = dist[closer]
            best[rows] = b

        sinks = np.broadcast_to(mf.indices[None, :] == 0, (M, len(mf.points)))
        res = mf.integrate(starts, targets=sinks, on_accept=watch, record=False, allow_stall=True)
        end = res["y"][:, :mf.n]
        lift = np.rint(end - mf.positions[res["dest"]]).astype(int)
        keys = [(int(j),) + tuple(int(v) for v in l) for j, l in zip(res["dest"], lift)]
        # a seed on a stable manifold to machine precision parks at that saddle
        near = np.argmin(mf._dist(end), axis=1)
        for i in np.nonzero(res["stalled"])[0]:
            keys[i] = (-1 - int(near[i]),)
        return keys, side

    def orbits(self, shoot_count: int) -> dict:
        mf, x = self.mf, self.x
        out = {mf.labels[i]: [] for i in self.lower}
        if not self.lower:
            return out
        if x.index == 1:
            e = x.unstable_frame[:, 0]
            starts = np.array([x.x + self.r0 * e, x.x - self.r0 * e])
            res = mf.integrate(starts, frames=np.array([e[:, None], e[:, None]]), orthonormalize=True)
            for i in range(2):
                j = int(res["dest"][i])
                if j < 0 or mf.indices[j] != x.index - 1:
                    continue
                out[mf.labels[j]].append(self._finish(res, i, starts[i], j, None))
            return out
        if x.index != 2 or mf.n != 2:
            raise NotImplementedError("orbit search supports index differences 2->1 on T^2 and 1->0")
        S = shoot_count
        theta = _unit_sphere_angles(S)
        keys, side = self.classify(theta)
        brackets, modes = [], []
        for a in range(S):
            b = (a + 1) % S
            lo, hi = theta[a], theta[b] + (2 * math.pi if b == 0 else 0.0)
            if keys[a] != keys[b]:
                brackets.append((lo, hi))
                modes.append(-1)
                continue
            for jj in range(len(self.lower)):
                if side[a, jj] * side[b, jj] < 0:
                    brackets.append((lo, hi))
                    modes.append(jj)
        if not brackets:
            return out
        angles = []
        brackets, modes = np.array(brackets), np.array(modes)
        for _ in range(16):
            mid, hi_key, hi_side = self._bisect(brackets, modes)
            angles.extend(mid)
            # a bracket may hide further separatrices past the one just found
            _, keys_hi, side_hi = self._state(brackets[:, 1])
            more = [(m, b[1], mode) for m, b, mode, k1, k2, s1, s2 in
                    zip(mid, brackets, modes, hi_key, keys_hi, hi_side, side_hi)
                    if (k1 != k2 if mode < 0 else s1[mode] != s2[mode]) and b[1] - m > 1e-12]
            if not more:
                break
            brackets = np.array([(m + 1e-13, b) for m, b, _ in more])
            modes = np.array([mode for _, _, mode in more])
        found = self._launch(np.array(angles))
        for j in self.lower:
            mine = sorted((o for o in found if o.y == mf.labels[j]), key=lambda o: o.angle)
            for a, o1 in enumerate(mine):
                for o2 in mine[a + 1:]:
                    if np.linalg.norm(torus_delta(o1.crossing, o2.crossing)) < 1e-6:
                        raise AmbiguousCluster(f"two orbit clusters from {x.label} to {mf.labels[j]} merged; "
                                               "increase shoot_count")
            out[mf.labels[j]].extend(mine)
        return out

    def _state(self, theta: np.ndarray) -> tuple:
        keys, side = self.classify(theta)
        return theta, keys, side

    def _bisect(self, brackets: np.ndarray, modes: np.ndarray, iters: int = 64) -> tuple:
        """Refine each bracket to a change point of its landing key (or saddle side).

        Returns the refined angles with the key and sides at the upper end
        of each final interval.
        """
        lo, hi = brackets[:, 0].copy(), brackets[:, 1].copy()
        keys_lo, side_lo = self.classify(lo)
        keys_hi, side_hi = self.classify(hi)
        rows = np.arange(len(lo))
        jj = np.maximum(modes, 0)
        for _ in range(iters):
            if np.all(hi - lo <= 4 * np.spacing(np.maximum(np.abs(lo), np.abs(hi)))):
                break
            mid = 0.5 * (lo + hi)
            keys_mid, side_mid = self.classify(mid)
            same_key = np.array([a == b for a, b in zip(keys_mid, keys_lo)])
            same_side = side_mid[rows, jj] == side_lo[rows, jj]
            if np.any((modes >= 0) & (side_mid[rows, jj] == 0)):
                warnings.warn("bisection left the influence ball of the target; transversality is "
                              "presumed violated", TransversalityWarning)
            left = np.where(modes < 0, same_key, same_side)
            lo = np.where(left, mid, lo)
            hi = np.where(left, hi, mid)
            keys_hi = [kh if l else km for kh, km, l in zip(keys_hi, keys_mid, left)]
            side_hi = np.where(left[:, None], side_hi, side_mid)
        return 0.5 * (lo + hi), keys_hi, side_hi

    def _launch(self, angles: np.ndarray) -> list:
        mf, x = self.mf, self.x
        starts = self.seed(angles)
        F = np.repeat(x.unstable_frame[None], len(angles), axis=0)
        res = mf.integrate(starts, frames=F, orthonormalize=True)
        found, seen = [], []
        for i in range(len(angles)):
            j = int(res["dest"][i])
            if j < 0 or mf.indices[j] != x.index - 1:
                warnings.warn(f"refined orbit from {x.label} at angle {angles[i]:.12g} does not land at a "
                              "critical point of the next lower index; transversality presumed violated",
                              TransversalityWarning)
                continue
            ang = float(np.mod(angles[i], 2 * math.pi))
            if any(abs(math.remainder(ang - a, 2 * math.pi)) < 1e-9 for a in seen):
                continue
            seen.append(ang)
            found.append(self._finish(res, i, starts[i], j, ang))
        return found

    def _finish(self, res, i, start, j, angle) -> ConnectingOrbit:
        mf, x = self.mf, self.x
        y = mf.points[j]
        traj = mf.trajectory_from(res["samples"][i], x.label, j)
        n = mf.n
        end = res["y"][i]
        T = end[n:].reshape(n, -1)
        v = -mf.spec.grad(end[:n])
        v = v / np.linalg.norm(v)
        # clustering level between the critical values; it must lie below the launch point
        c = min(0.5 * (x.value + y.value), 0.5 * (traj.values[0] + y.value))
        crossing = traj.level_crossing(c)
        orbit = ConnectingOrbit(traj, x.label, y.label, np.asarray(start), crossing, T, v, 0, angle)
        return replace(orbit, sign=orbit_sign(orbit, x, y))


def connecting_orbits(spec: MorseFunctionSpec, points: Sequence[CriticalPoint], x: CriticalPoint,
                      y: CriticalPoint, shoot_count: int = 256, tol: float = DEFAULT_TOL,
                      capture_radius: float | None = None) -> list:
    """Orbits of -grad h from ``x`` to ``y`` (``index x = index y + 1``)."""
    if x.label == y.label or np.allclose(x.x, y.x):
        raise ValueError("x = y: the only point of W_x^- meeting W_x^+ is x itself")
    if x.index - y.index != 1:
        raise ValueError("only consecutive-index orbit spaces are enumerated")
    mf = MorseFlow(spec, points, capture_radius, tol)
    return _Shooter(mf, mf.point(x.label)).orbits(shoot_count)[y.label]


def incidence(orbits: Sequence[ConnectingOrbit]) -> int:
    """I(x, y): the sum of the orbit signs (0 for no orbits)."""
    return int(sum(o.sign for o in orbits))


# ---------------------------------------------------------------------------
# the Morse complex


def _exact_rank(matrix) -> int:
    rows = [[Fraction(int(v)) for v in row] for row in np.asarray(matrix)]
    rank, col = 0, 0
    ncols = len(rows[0]) if rows else 0
    while rank < len(rows) and col < ncols:
        piv = next((r for r in range(rank, len(rows)) if rows[r][col] != 0), None)
        if piv is None:
            col += 1
            continue
        rows[rank], rows[piv] = rows[piv], rows[rank]
        for r in range(rank + 1, len(rows)):
            f = rows[r][col] / rows[rank][col]
            if f:
                rows[r] = [a - f * b for a, b in zip(rows[r], rows[rank])]
        rank += 1
        col += 1
    return rank


@dataclass(frozen=True)
class MorseComplex:
    """Morse cochain complex with integer coboundary matrices.

    ``boundary[q]`` has shape ``(m_{q+1}, m_q)`` with entry ``I(x, y)`` for
    ``index x = q + 1`` and ``index y = q``; rows and columns follow
    ``generators[q + 1]`` and ``generators[q]``.
    """

    n: int
    points: tuple = field(repr=False)
    generators: tuple
    boundary: tuple
    orbits: dict = field(repr=False, default_factory=dict)

    @property
    def counts(self) -> list:
        return [len(g) for g in self.generators]

    def point(self, label: str) -> CriticalPoint:
        return next(c for c in self.points if c.label == label)

    def with_orientation(self, label: str) -> "MorseComplex":
        """The complex after reversing the orientation of one generator."""
        pts = tuple(c.flipped() if c.label == label else c for c in self.points)
        bd = []
        for q, D in enumerate(self.boundary):
            D = D.copy()
            if label in self.generators[q + 1]:
                D[self.generators[q + 1].index(label), :] *= -1
            if label in self.generators[q]:
                D[:, self.generators[q].index(label)] *= -1
            bd.append(D)
        return replace(self, points=pts, boundary=tuple(bd))

    def report(self) -> str:
        lines = [f"Morse complex on T^{self.n}: counts {self.counts}", "critical points:"]
        for c in self.points:
            pos = ", ".join(f"{p:.10f}" for p in c.position)
            lines.append(f"  {c.label:8s} index {c.index}  h = {c.value:+.12f}  at ({pos})  "
                         f"orientation {c.orientation:+d}")
        for q, D in enumerate(self.boundary):
            lines.append(f"coboundary {q} -> {q + 1} (rows {list(self.generators[q + 1])}, "
                         f"columns {list(self.generators[q])}):")
            lines.extend("  " + " ".join(f"{int(v):+d}" for v in row) for row in D)
        lines.append(f"Betti numbers: {cohomology_ranks(self)}")
        return "\n".join(lines) + "\n"

    def incidence_csv(self, q: int) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x"] + list(self.generators[q]))
        for label, row in zip(self.generators[q + 1], self.boundary[q]):
            w.writerow([label] + [int(v) for v in row])
        return buf.getvalue()

    def betti_json(self) -> str:
        return json.dumps({"n": self.n, "counts": self.counts, "betti": cohomology_ranks(self),
                           "euler_characteristic": sum((-1) ** q * m for q, m in enumerate(self.counts))},
                          indent=2, sort_keys=True)


def build_complex(spec: MorseFunctionSpec, points: Sequence[CriticalPoint], shoot_count: int = 256,
                  tol: float = DEFAULT_TOL, capture_radius: float | None = None) -> MorseComplex:
    points = tuple(points)
    if len(points) < 2:
        raise ValueError("a Morse complex on a compact manifold needs at least two critical points")
    n = spec.n
    mf = MorseFlow(spec, points, capture_radius, tol)
    gens = tuple(tuple(c.label for c in points if c.index == q) for q in range(n + 1))
    orbits = {}
    bd = []
    for q in range(n):
        D = np.zeros((len(gens[q + 1]), len(gens[q])), dtype=np.int64)
        for a, xl in enumerate(gens[q + 1]):
            found = _Shooter(mf, mf.point(xl)).orbits(shoot_count)
            for b, yl in enumerate(gens[q]):
                orbits[(xl, yl)] = tuple(found.get(yl, ()))
                D[a, b] = incidence(orbits[(xl, yl)])
        bd.append(D)
    for q in range(n - 1):
        S = bd[q + 1] @ bd[q]
        if np.any(S != 0):
            a, b = (int(v) for v in np.argwhere(S != 0)[0])
            raise BoundarySquareNonzero(
                f"coboundary squared is nonzero: entry ({gens[q + 2][a]}, {gens[q][b]}) = {int(S[a, b])}",
                pair=(gens[q + 2][a], gens[q][b]), degree=q)
    return MorseComplex(n, points, gens, tuple(bd), orbits)


def cohomology_ranks(cx: MorseComplex) -> list:
    """b_q = m_q - rank d^q - rank d^{q-1}, with exact rational ranks."""
    m = cx.counts
    ranks = [_exact_rank(D) if D.size else 0 for D in cx.boundary]
    return [m[q] - (ranks[q] if q < cx.n else 0) - (ranks[q - 1] if q > 0 else 0) for q in range(cx.n + 1)]


# ---------------------------------------------------------------------------
# trigonometric interpolation of grid forms


class TrigInterpolant:
    """Evaluates the trigonometric interpolant of grid components at arbitrary points.

    Fourier modes whose magnitude falls below ``rel_cut`` times the largest
    one are dropped.
    """

    def __init__(self, components: np.ndarray, rel_cut: float = 1e-15):
        comps = np.asarray(components, dtype=float)
        self.C = comps.shape[0]
        self.n = comps.ndim - 1
        N = comps.shape[1]
        self.N = N
        coef = np.fft.fftn(comps, axes=tuple(range(1, self.n + 1))) / N ** self.n
        k = np.fft.fftfreq(N, 1.0 / N)
        mag = np.max(np.abs(coef), axis=0)
        keep = mag > rel_cut * max(float(mag.max()), 1e-300)
        if self.n == 2:
            rows = np.nonzero(keep.any(axis=1))[0]
            cols = np.nonzero(keep.any(axis=0))[0]
            self.kx, self.ky = k[rows], k[cols]
            self.coef = coef[:, rows][:, :, cols]
        else:
            idx = np.argwhere(keep)
            self.modes = k[idx]
            self.coef = coef[(slice(None),) + tuple(idx.T)]

    def __call__(self, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((len(pts), self.C))
        for s in range(0, len(pts), chunk):
            p = pts[s:s + chunk]
            if self.n == 2:
                Ex = np.exp(2j * math.pi * np.outer(p[:, 0], self.kx))
                Ey = np.exp(2j * math.pi * np.outer(p[:, 1], self.ky))
                for c in range(self.C):
                    out[s:s + chunk, c] = np.real(np.sum((Ex @ self.coef[c]) * Ey, axis=1))
            else:
                phase = np.exp(2j * math.pi * (p @ self.modes.T))
                out[s:s + chunk] = np.real(phase @ self.coef.T)
        return out


# ---------------------------------------------------------------------------
# unstable cells


@dataclass(frozen=True)
class CellMesh:
    """Quadrature on an unstable cell: integral = sum_i sum_I omega_I(nodes_i) coef_iI."""

    nodes: np.ndarray = field(repr=False)
    coef: np.ndarray = field(repr=False)
    radius: float


@dataclass(frozen=True)
class UnstableCell:
    """Oriented quadrature meshes for W_x^- at several inner radii.

    ``mode`` selects how the radii are combined: ``"point"`` (index 0),
    ``"richardson"`` (index 1: radii r, r/2, r/4 with an r^2 error model)
    or ``"check"`` (top-dimensional cells: the inner disc is exact, two
    radii only cross-check each other).
    """

    point: CriticalPoint
    dim: int
    meshes: tuple = field(repr=False)
    mode: str

    @property
    def label(self) -> str:
        return self.point.label


def _segment_nodes(x: CriticalPoint, r: float, m: int = 16) -> tuple:
    s, w = _gauss_legendre(m)
    s = (2 * s - 1) * r
    w = 2 * r * w
    e = x.unstable_frame[:, 0]
    return x.x + np.outer(s, e), np.outer(w, e)


def _branch_meshes(mf: MorseFlow, starts: np.ndarray, signs: np.ndarray, *, extra: np.ndarray | None = None,
                   weights: np.ndarray | None = None, gl: int = 5, prefactor: float = 1.0,
                   sinks_only: bool = False) -> tuple:
    """GL nodes along flow lines from ``starts`` down to a lower critical point.

    With ``extra`` (one tangent vector per start, n = 2) the flow carries the
    variation vector and the 2-vector coefficient det[flow, variation] is
    produced; otherwise the 1-vector coefficient is the flow velocity.
    """
    n = mf.n
    s_gl, w_gl = _gauss_legendre(gl)
    nodes, coefs = [], []
    signs = np.asarray(signs, dtype=float)
    wts = np.ones(len(starts)) if weights is None else np.asarray(weights, dtype=float)

    def accept(rows, t_old, hstep, y_old, y_new, Q):
        Y = _dense_eval(y_old, hstep, Q, s_gl)  # (m, gl, D)
        P = Y[..., :n].reshape(-1, n)
        vel = -mf.spec.grad(P)
        w = (hstep[:, None] * w_gl[None, :] * (signs[rows] * wts[rows])[:, None]).reshape(-1) * prefactor
        if extra is None:
            coefs.append(vel * w[:, None])
        else:
            V = Y[..., n:].reshape(-1, n)
            det = vel[:, 0] * V[:, 1] - vel[:, 1] * V[:, 0]
            coefs.append((det * w)[:, None])
        nodes.append(P)

    targets = None
    if sinks_only:
        targets = np.broadcast_to(mf.indices[None, :] == 0, (len(starts), len(mf.points)))
    res = mf.integrate(starts, frames=None if extra is None else extra[:, :, None], targets=targets,
                       radius=TRUNCATION_RADIUS, on_accept=accept, record=False, tol=mf.tol)
    if extra is None:
        # chord from the truncation point to the sink
        for i, j in enumerate(res["dest"]):
            p = res["y"][i, :n]
            c = p + torus_delta(mf.positions[j], p)
            s, w = _gauss_legendre(4)
            nodes.append(p + np.outer(s, c - p))
            coefs.append(np.outer(w * signs[i] * wts[i] * prefactor, c - p))
    return np.concatenate(nodes), np.concatenate(coefs), res["dest"]


def _tanh_sinh(a: float, b: float, step: float = 0.125, clip: float = 1e-13) -> tuple:
    k = np.arange(-int(4.0 / step), int(4.0 / step) + 1) * step
    u = 0.5 * math.pi * np.sinh(k)
    x = np.tanh(u)
    w = 0.5 * math.pi * np.cosh(k) / np.cosh(u) ** 2 * step
    half, mid = 0.5 * (b - a), 0.5 * (a + b)
    theta = mid + half * x
    w = half * w
    ok = (theta - a > clip) & (b - theta > clip) & (w > 1e-18)
    return theta[ok], w[ok]


def _cell_mesh(mf: MorseFlow, x: CriticalPoint, r: float, shoot_count: int) -> CellMesh:
    n, k = mf.n, x.index
    o = x.orientation
    if k == 0:
        return CellMesh(x.x[None], np.full((1, 1), float(o)), 0.0)
    if k == 1:
        seg_nodes, seg_coef = _segment_nodes(x, r)
        e = x.unstable_frame[:, 0]
        starts = np.array([x.x + r * e, x.x - r * e])
        b_nodes, b_coef, _ = _branch_meshes(mf, starts, np.array([1.0, -1.0]))
        return CellMesh(np.vstack([seg_nodes, b_nodes]), o * np.vstack([seg_coef, b_coef]), r)
    if k == 2 and n == 2:
        E = x.unstable_frame
        detE = float(np.linalg.det(E))
        # exact inner disc in polar coordinates
        panels = [(0.0, r / 8), (r / 8, r / 4), (r / 4, r / 2), (r / 2, r)]
        g, gw = _gauss_legendre(16)
        rho = np.concatenate([a + (b - a) * g for a, b in panels])
        wr = np.concatenate([(b - a) * gw for a, b in panels])
        nth = 64
        th = 2 * math.pi * np.arange(nth) / nth
        R, TH = np.meshgrid(rho, th, indexing="ij")
        u = np.stack([R * np.cos(TH), R * np.sin(TH)], axis=-1).reshape(-1, 2)
        disc_nodes = x.x + u @ E.T
        disc_coef = (detE * np.outer(wr * rho, np.full(nth, 2 * math.pi / nth))).reshape(-1, 1)
        # fan of trajectories, sectors bounded by the separatrix angles
        shooter = _Shooter(mf, x, radius=r)
        angles = sorted(o_.angle for lst in shooter.orbits(shoot_count).values() for o_ in lst)
        if angles:
            bounds = angles + [angles[0] + 2 * math.pi]
            parts = [_tanh_sinh(a, b, step=0.25) for a, b in zip(bounds[:-1], bounds[1:])]
            theta = np.concatenate([p[0] for p in parts])
            wth = np.concatenate([p[1] for p in parts])
        else:
            theta = 2 * math.pi * np.arange(256) / 256
            wth = np.full(256, 2 * math.pi / 256)
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        starts = x.x + r * dirs @ E.T
        var = r * np.stack([-np.sin(theta), np.cos(theta)], axis=-1) @ E.T
        f_nodes, f_coef, _ = _branch_meshes(mf, starts, np.ones(len(theta)), extra=var, weights=wth,
                                            sinks_only=True, gl=3)
        return CellMesh(np.vstack([disc_nodes, f_nodes]), o * np.vstack([disc_coef, f_coef]), r)
    raise NotImplementedError("unstable cells are supported for index <= 1, and index 2 on T^2")


def build_cell(spec: MorseFunctionSpec, points: Sequence[CriticalPoint], x: CriticalPoint,
               radius: float | None = None, shoot_count: int = 128, tol: float = 1e-11,
               flow: MorseFlow | None = None) -> UnstableCell:
    mf = flow if flow is not None else MorseFlow(spec, points, tol=tol)
    r = mf.capture_radius if radius is None else radius
    if x.index == 0:
        return UnstableCell(x, 0, (_cell_mesh(mf, x, r, shoot_count),), "point")
    if x.index == 1:
        return UnstableCell(x, 1, tuple(_cell_mesh(mf, x, r / 2 ** i, shoot_count) for i in range(3)), "richardson")
    if radius is None:
        r = top_cell_radius(mf, x)
    return UnstableCell(x, x.index, tuple(_cell_mesh(mf, x, r / 2 ** i, shoot_count) for i in range(2)), "check")


def build_cells(cx: MorseComplex, spec: MorseFunctionSpec, **kwargs) -> dict:
    """Unstable cells of every generator, sharing one flow integrator."""
    tol = kwargs.pop("tol", 1e-11)
    mf = MorseFlow(spec, cx.points, tol=tol)
    return {c.label: build_cell(spec, cx.points, c, flow=mf, **kwargs) for c in cx.points}


def integrate_values(cell: UnstableCell, evaluate: Callable, tol: float = 1e-6) -> float:
    """Integrate a k-form given as ``evaluate(nodes) -> (nodes, C(n, k))`` over the cell."""
    vals = [float(np.sum(evaluate(m.nodes) * m.coef)) for m in cell.meshes]
    if cell.mode == "point":
        return vals[0]
    if cell.mode == "richardson":
        r1 = (4 * vals[1] - vals[0]) / 3
        r2 = (4 * vals[2] - vals[1]) / 3
        result, resid = r2, abs(r2 - r1)
    else:
        result, resid = vals[-1], abs(vals[-1] - vals[0])
    if resid > tol * max(1.0, abs(result)):
        raise MeshUnderResolved(f"cell {cell.label}: radius extrapolation residual {resid:.3e} exceeds {tol:.1e}")
    return result


def integrate_over_unstable(form: GridForm, cell: UnstableCell, tol: float = 1e-6) -> float:
    """Int(form)(x): the oriented integral of a degree-k form over W_x^-."""
    if form.degree != cell.dim:
        raise ValueError(f"cannot integrate a {form.degree}-form over a {cell.dim}-cell")
    interp = TrigInterpolant(form.components)
    return integrate_values(cell, lambda nodes: interp(np.mod(nodes, 1.0)), tol)


def int_cochain(form: GridForm, cx: MorseComplex, cells: dict, tol: float = 1e-6) -> np.ndarray:
    """The Morse cochain Int^q(form) in the basis of index-q generators."""
    interp = TrigInterpolant(form.components)
    return np.array([integrate_values(cells[label], lambda nodes: interp(np.mod(nodes, 1.0)), tol)
                     for label in cx.generators[form.degree]])


def int_morphism_check(form: GridForm, cx: MorseComplex, cells: dict, tol: float = 1e-6) -> float:
    """max_x |Int(d form)(x) - (coboundary Int form)(x)| over index-(q+1) generators."""
    q = form.degree
    if q >= cx.n:
        raise ValueError("the form degree must be below the dimension")
    lhs = int_cochain(exterior_d(form), cx, cells, tol)
    rhs = cx.boundary[q] @ int_cochain(form, cx, cells, tol)
    return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
