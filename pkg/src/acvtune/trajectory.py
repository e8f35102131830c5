"""Planar point-mass trajectory integrated with classical fixed-step RK4.

State is (x, h, u, v, a): downrange position, altitude, the two velocity
components and a pitch-disturbance angle ``a`` that relaxes towards zero at an
aerodynamic rate.  While ``a`` is large it adds a drag spike, which is the
fast transient that coarse time steps fail to resolve.

Inputs per point (columns of ``z``):

    0  launch speed [m/s]
    1  flight-path angle [deg]
    2  drag coefficient (per unit dynamic pressure and mass)
    3  surface density scale rho0
    4  phase of a standing density wave [rad]

Outputs per point: time of flight, landing range, speed when descending
through ``h_probe`` (impact speed if the apex stays below it).
"""

import math

import numba
import numpy as np

QOI_NAMES = ("time_of_flight", "landing_range", "speed_at_altitude")

# Order of the packed physics parameter vector passed to the kernel.
PHYSICS_KEYS = (
    "h0",
    "scale_height",
    "gravity",
    "a0",
    "spike_drag",
    "relax_coeff",
    "relax_rate_max",
    "wave_amplitude",
    "wave_number",
    "h_probe",
    "h_ref",
    "t_max",
)

DEFAULT_PHYSICS = {
    "h0": 2.0,
    "scale_height": 15.0,
    "gravity": 9.81,
    "a0": 0.7,
    "spike_drag": 200.0,
    "relax_coeff": 0.6,
    # RK4 is stable on the real axis for rate*dt < 2.785; 10.8 * 0.25 = 2.7.
    "relax_rate_max": 10.8,
    "wave_amplitude": 0.8,
    "wave_number": 0.3,
    "h_probe": 3.0,
    "h_ref": 10.0,
    "t_max": 100.0,
}


def pack_physics(physics):
    return np.array([float(physics[k]) for k in PHYSICS_KEYS])


@numba.njit(cache=True)
def _integrate(z, dt, par, constant_density):
    h0 = par[0]
    scale_h = par[1]
    grav = par[2]
    a0 = par[3]
    kspike = par[4]
    crelax = par[5]
    lmax = par[6]
    wamp = par[7]
    wnum = par[8]
    hprobe = par[9]
    href = par[10]
    tmax = par[11]

    n = z.shape[0]
    out = np.empty((n, 3))
    for p in range(n):
        speed0 = z[p, 0]
        gam = z[p, 1] * math.pi / 180.0
        cd = z[p, 2]
        rho0 = z[p, 3]
        phase = z[p, 4]
        rho_c = rho0 * math.exp(-href / scale_h)

        x = 0.0
        h = h0
        u = speed0 * math.cos(gam)
        v = speed0 * math.sin(gam)
        a = a0
        t = 0.0
        probe = np.nan
        while True:
            sx = x
            sh = h
            su = u
            sv = v
            sa = a
            ax = 0.0
            ah = 0.0
            au = 0.0
            av = 0.0
            aa = 0.0
            for st in range(4):
                if constant_density:
                    rho = rho_c
                else:
                    rho = rho0 * math.exp(-sh / scale_h) * (1.0 + wamp * math.sin(wnum * sh + phase))
                vel = math.sqrt(su * su + sv * sv)
                dfac = (cd * rho * vel * vel + kspike * rho * sa * sa) / vel
                lam = lmax * math.tanh(crelax * rho * vel / lmax)
                dx = su
                dh = sv
                du = -dfac * su
                dv = -dfac * sv - grav
                da = -lam * sa
                wgt = 1.0 if (st == 0 or st == 3) else 2.0
                ax += wgt * dx
                ah += wgt * dh
                au += wgt * du
                av += wgt * dv
                aa += wgt * da
                if st < 3:
                    c = 0.5 * dt if st < 2 else dt
                    sx = x + c * dx
                    sh = h + c * dh
                    su = u + c * du
                    sv = v + c * dv
                    sa = a + c * da
            xn = x + dt / 6.0 * ax
            hn = h + dt / 6.0 * ah
            un = u + dt / 6.0 * au
            vn = v + dt / 6.0 * av
            an = a + dt / 6.0 * aa
            if math.isnan(probe) and v < 0.0 and h > hprobe and hn <= hprobe:
                w = (h - hprobe) / (h - hn)
                ui = u + w * (un - u)
                vi = v + w * (vn - v)
                probe = math.sqrt(ui * ui + vi * vi)
            if hn <= 0.0:
                w = h / (h - hn)
                out[p, 0] = t + w * dt
                out[p, 1] = x + w * (xn - x)
                if math.isnan(probe):
                    # Apex below the probe altitude: report the impact speed.
                    ui = u + w * (un - u)
                    vi = v + w * (vn - v)
                    probe = math.sqrt(ui * ui + vi * vi)
                out[p, 2] = probe
                break
            x = xn
            h = hn
            u = un
            v = vn
            a = an
            t += dt
            if t > tmax or not math.isfinite(hn):
                out[p, 0] = np.nan
                out[p, 1] = np.nan
                out[p, 2] = np.nan
                break
    return out


def simulate(points, dt, physics=None, constant_density=False):
    """Integrate every row of ``points`` and return an ``(n, 3)`` QoI array."""
    par = pack_physics(physics or DEFAULT_PHYSICS)
    z = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    if z.shape[0] == 0:
        return np.empty((0, 3))
    return _integrate(z, float(dt), par, bool(constant_density))
