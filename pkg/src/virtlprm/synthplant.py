"""Physics-lite synthetic plant data: smooth statepoint evolution over a
fuel cycle plus an analytic detector-response oracle.

The oracle makes no neutronics-fidelity claim; it is deliberately simple
(kernel-weighted nodal power, scaled by thermal power and shadowed by the
local rod variable) so that an independent brute-force check is feasible
and trained models have learnable signal. The generator is a pure
function of (scenario, geometry): every frame is derived from closed-form
fields plus per-frame seeded rng streams, so frames can be produced in
any order or in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .coredata import (
    CoreGeometry,
    CoreState,
    DataError,
    LprmFrame,
    RodInputs,
    derive_rod_variable,
)

# Axial power node sampled by each detector level (levels sit 6 nodes apart,
# the lowest near the bottom of the active fuel).
LEVEL_AXIAL_NODE = {"A": 2, "B": 8, "C": 14, "D": 20}

KERNEL_SIGMA = 1.0       # radial response kernel width, grid cells
ROD_SHADOW = 0.3         # reading attenuation per unit of local rod variable
NP_ROD_SUPPRESSION = 0.5  # nodal-power depression per unit of rod variable
DIP_PROBABILITY = 0.004   # chance per frame of a sub-90%-power excursion

# 3x3 window offsets grouped so mirrored offsets share a commutative pair
# sum: diagonal-symmetric states then yield bitwise-equal partner readings.
_OFFSET_GROUPS = (
    ((0, 0),),
    ((-1, -1),),
    ((1, 1),),
    ((-1, 0), (0, -1)),
    ((-1, 1), (1, -1)),
    ((0, 1), (1, 0)),
)


@dataclass(frozen=True)
class PlantScenario:
    """Knobs for one synthetic fuel cycle."""

    cycle_id: int
    frame_count: int
    seed: int
    symmetry_fidelity: float = 1.0
    noise_sigma: float = 0.0
    drift_rate: float = 0.0
    drift_detectors: frozenset | None = None  # None means every detector drifts

    def __post_init__(self):
        if self.frame_count < 1:
            raise DataError(f"frame_count must be >= 1, got {self.frame_count}")
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.drift_rate < 1.0:
            raise DataError(f"drift_rate must lie in [0, 1), got {self.drift_rate}")
        if not 0.0 <= self.symmetry_fidelity <= 1.0:
            raise DataError(f"symmetry_fidelity must lie in [0, 1], got "
                            f"{self.symmetry_fidelity}")


# ---------------------------------------------------------------------------
# detector response oracle


def _kernel_weight(di: int, dj: int) -> float:
    return float(np.exp(-(di * di + dj * dj) / (2.0 * KERNEL_SIGMA ** 2)))


def _detector_window(geom: CoreGeometry, row: int, col: int):
    """Valid offset groups and their kernel weights for one string position."""
    if not (0 <= row < geom.h and 0 <= col < geom.w):
        raise DataError(f"detector position ({row}, {col}) outside the grid")
    groups = []
    for group in _OFFSET_GROUPS:
        members = [(di, dj) for di, dj in group
                   if 0 <= row + di < geom.h and 0 <= col + dj < geom.w]
        if members:
            groups.append(tuple(members))
    return groups


def _paired_sum(values_by_offset, groups):
    """Fixed-order accumulation: group-internal sums first, then groups."""
    total = None
    for group in groups:
        part = values_by_offset[group[0]]
        for offset in group[1:]:
            part = part + values_by_offset[offset]
        total = part if total is None else total + part
    return total


def oracle_readings(np_stack: np.ndarray, rv_stack: np.ndarray,
                    thermal_power: np.ndarray, geom: CoreGeometry) -> np.ndarray:
    """Vectorized oracle over stacked frames.

    ``np_stack`` is (N, H, W, D), ``rv_stack`` (N, H, W, D'), and
    ``thermal_power`` (N,). Each detector reads the kernel-weighted nodal
    power in its 3x3 radial neighborhood at its axial node, scaled by
    thermal power and attenuated by the mean local rod variable.
    """
    n = np_stack.shape[0]
    out = np.empty((n, geom.detector_count), dtype=np.float32)
    rv_depth = rv_stack.shape[3]
    for d in geom.detectors:
        row, col = geom.position_of(d.string_index)
        z = LEVEL_AXIAL_NODE[d.level]
        zr = min(z, rv_depth - 1)
        groups = _detector_window(geom, row, col)

        np_vals = {}
        rv_vals = {}
        weights = {}
        for group in groups:
            for di, dj in group:
                np_vals[(di, dj)] = np_stack[:, row + di, col + dj, z]
                rv_vals[(di, dj)] = rv_stack[:, row + di, col + dj, zr]
                weights[(di, dj)] = np.float32(_kernel_weight(di, dj))

        weighted = {k: weights[k] * v for k, v in np_vals.items()}
        norm = _paired_sum(weights, groups)
        local_power = _paired_sum(weighted, groups) / norm
        count = np.float32(sum(len(g) for g in groups))
        local_rod = _paired_sum(rv_vals, groups) / count
        attenuation = np.float32(1.0) - np.float32(ROD_SHADOW) * local_rod
        out[:, geom.detector_index(d)] = thermal_power * local_power * attenuation
    return out


def lprm_response_oracle(state: CoreState, geom: CoreGeometry) -> np.ndarray:
    """Deterministic reading for every detector given one core state."""
    return oracle_readings(state.nodal_power[None], state.rod_variable[None],
                           np.array([state.thermal_power], dtype=np.float32), geom)[0]


# ---------------------------------------------------------------------------
# cycle generator


def _symmetrize(arr: np.ndarray, fidelity: float) -> np.ndarray:
    """Blend a field toward its diagonal reflection; fidelity 1 is exact."""
    axes = (1, 0) + tuple(range(2, arr.ndim))
    mirrored = 0.5 * (arr + np.transpose(arr, axes))
    if fidelity >= 1.0:
        return mirrored
    return fidelity * mirrored + (1.0 - fidelity) * arr


class _CycleModel:
    """Random structure behind one cycle's frames.

    Plant-level features (where the control-blade footprints sit, which
    radial modes the power shape can excite) are drawn from the scenario
    seed alone, so every cycle of one plant shares them; how those features
    move over time is drawn per cycle. Held-out cycles therefore present
    new trajectories over familiar structure rather than a different plant.
    """

    def __init__(self, scenario: PlantScenario, geom: CoreGeometry):
        self.scenario = scenario
        self.geom = geom
        plant_rng = np.random.default_rng([scenario.seed])
        rng = np.random.default_rng([scenario.seed, scenario.cycle_id])
        fid = scenario.symmetry_fidelity
        h, w, d, dp = geom.h, geom.w, geom.d, geom.dprime

        rows = np.arange(h)[:, None]
        cols = np.arange(w)[None, :]

        # Control-blade bumps: fixed gaussian footprints whose strengths
        # swing sinusoidally over the cycle.
        self.rod_fields = []
        for _ in range(6):
            cr, cc = plant_rng.uniform(4, h - 5, size=2)
            width = plant_rng.uniform(2.0, 4.0)
            footprint = np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2 * width ** 2))
            self.rod_fields.append({
                "footprint": _symmetrize(footprint, fid).astype(np.float64),
                "amp": rng.uniform(0.4, 1.0),
                "freq": rng.uniform(0.5, 2.5),
                "phase": rng.uniform(0, 2 * np.pi),
            })

        # Radial power perturbation modes on top of a center-peaked base.
        # Several independent harmonics keep the power field high-rank, the
        # way real flux distributions are; a single dominant mode would let
        # any detector be read off distant regions of the core.
        center = (h - 1) / 2.0
        dist = np.sqrt((rows - center) ** 2 + (cols - center) ** 2)
        self.base_radial = 0.55 + 0.45 * np.cos(np.pi * np.minimum(dist / center, 1.0))
        self.power_modes = []
        for _ in range(7):
            kr, kc = plant_rng.integers(1, 5, size=2)
            phase = plant_rng.uniform(0, 2 * np.pi)
            mode = np.sin(2 * np.pi * (kr * rows / h + kc * cols / w) + phase)
            self.power_modes.append({
                "field": _symmetrize(mode, fid),
                "amp": rng.uniform(0.06, 0.16),
                "freq": rng.uniform(0.5, 2.5),
                "phase": rng.uniform(0, 2 * np.pi),
            })
        self.fluct_sigma = 0.03  # per-frame smooth radial fluctuation, relative

        # Blade depletion: a smooth starting field plus a non-negative
        # accumulation rate, stronger near the rod footprints and the
        # bottom. Both spatial patterns are plant-level (absorber wears
        # where blades park, cycle after cycle); each cycle only scales
        # the accumulation and advances along it.
        start = gaussian_filter(plant_rng.random((h, w, dp)), sigma=(3, 3, 4))
        start = 0.10 * (start - start.min()) / max(np.ptp(start), 1e-9)
        exposure = sum(f["footprint"] for f in self.rod_fields)
        exposure = exposure / max(exposure.max(), 1e-9)
        taper = 1.0 - 0.5 * np.arange(dp) / dp
        pattern = (0.4 + 0.6 * exposure)[:, :, None] * taper[None, None, :]
        carry = 0.06 * min(max(scenario.cycle_id - 1, 0), 8)
        self.nbd_start = _symmetrize(np.clip(start + carry * pattern, 0.0, 0.6), fid)
        rate_scale = rng.uniform(0.25, 0.45)
        self.nbd_rate = rate_scale * pattern

        # Axial shape and scalar trends.
        self.axial_base = np.sin(np.pi * (np.arange(d) + 0.5) / d) ** 0.8
        self.axial_swing = {"freq": rng.uniform(0.8, 1.6), "phase": rng.uniform(0, 2 * np.pi)}
        self.power_trend = {"freq": rng.uniform(0.8, 2.2), "phase": rng.uniform(0, 2 * np.pi)}
        self.subcool_trend = {"freq": rng.uniform(0.5, 1.5), "phase": rng.uniform(0, 2 * np.pi)}
        self.flow_trend = {"freq": rng.uniform(0.5, 1.5), "phase": rng.uniform(0, 2 * np.pi)}

        counts = geom.detector_count
        if scenario.drift_detectors is None:
            self.drift_mask = np.ones(counts, dtype=bool)
        else:
            self.drift_mask = np.zeros(counts, dtype=bool)
            for det in scenario.drift_detectors:
                self.drift_mask[geom.detector_index(det)] = True

    def rod_pattern(self, u: float) -> np.ndarray:
        total = np.zeros((self.geom.h, self.geom.w))
        for f in self.rod_fields:
            strength = f["amp"] * (0.5 + 0.5 * np.sin(2 * np.pi * f["freq"] * u + f["phase"]))
            total += strength * f["footprint"]
        return np.clip(total, 0.0, 1.0).astype(np.float32)

    def blade_depletion(self, u: float) -> np.ndarray:
        return np.clip(self.nbd_start + u * self.nbd_rate, 0.0, 0.95).astype(np.float32)

    def nodal_power(self, u: float, rod_variable: np.ndarray,
                    rng_frame=None) -> np.ndarray:
        radial = self.base_radial.copy()
        for m in self.power_modes:
            radial = radial * (1.0 + m["amp"] * np.sin(2 * np.pi * m["freq"] * u + m["phase"])
                               * m["field"])
        if rng_frame is not None and self.fluct_sigma > 0.0:
            ripple = gaussian_filter(rng_frame.standard_normal((self.geom.h, self.geom.w)),
                                     sigma=2.5)
            ripple /= max(float(ripple.std()), 1e-9)
            radial = radial * (1.0 + self.fluct_sigma
                               * _symmetrize(ripple, self.scenario.symmetry_fidelity))
        radial = np.clip(radial, 0.05, None)
        skew = 0.5 * np.sin(2 * np.pi * self.axial_swing["freq"] * u + self.axial_swing["phase"])
        axial = self.axial_base * (1.0 + skew * ((np.arange(self.geom.d) + 0.5) / self.geom.d - 0.5))
        axial = np.clip(axial, 0.02, None)
        z_map = np.minimum(np.arange(self.geom.d), self.geom.dprime - 1)
        suppression = 1.0 - NP_ROD_SUPPRESSION * rod_variable[:, :, z_map]
        raw = radial[:, :, None] * axial[None, None, :] * suppression
        return (raw / raw.mean()).astype(np.float32)


def generate_cycle(scenario: PlantScenario, geom: CoreGeometry) -> list[LprmFrame]:
    """Produce one cycle of frames: smooth rod moves, monotonically
    accumulating depletion, evolving power shapes, occasional sub-90%-power
    dips, and oracle readings with measurement noise and sensitivity drift."""
    model = _CycleModel(scenario, geom)
    denom = max(scenario.frame_count - 1, 1)

    states, rods = [], []
    for t in range(scenario.frame_count):
        u = t / denom
        rng_t = np.random.default_rng([scenario.seed, scenario.cycle_id, t])

        rp = model.rod_pattern(u)
        nbd = model.blade_depletion(u)
        rv = derive_rod_variable(rp, nbd)
        nodal_power = model.nodal_power(u, rv, rng_frame=np.random.default_rng(
            [scenario.seed, scenario.cycle_id, t, 3]))

        tp = 0.965 + 0.025 * np.sin(2 * np.pi * model.power_trend["freq"] * u
                                    + model.power_trend["phase"])
        tp += 0.004 * rng_t.standard_normal()
        if rng_t.random() < DIP_PROBABILITY:
            tp = rng_t.uniform(0.72, 0.88)
        tp = float(np.clip(tp, 0.6, 1.02))

        subcool = 1.0 + 0.08 * np.sin(2 * np.pi * model.subcool_trend["freq"] * u
                                      + model.subcool_trend["phase"])
        subcool += 0.01 * rng_t.standard_normal()
        flow = 0.97 + 0.04 * np.sin(2 * np.pi * model.flow_trend["freq"] * u
                                    + model.flow_trend["phase"])
        flow += 0.005 * rng_t.standard_normal()

        states.append(CoreState(nodal_power=nodal_power, rod_variable=rv,
                                thermal_power=tp, core_inlet_subcooling=float(subcool),
                                core_flow=float(flow)))
        rods.append(RodInputs(rod_pattern=rp, nodal_blade_depletion=nbd))

    all_readings = oracle_readings(
        np.stack([s.nodal_power for s in states]),
        np.stack([s.rod_variable for s in states]),
        np.array([s.thermal_power for s in states], dtype=np.float32), geom)

    frames = []
    for t, (state, rod) in enumerate(zip(states, rods)):
        readings = all_readings[t]
        if scenario.drift_rate > 0.0:
            factor = np.where(model.drift_mask,
                              np.float32((1.0 - scenario.drift_rate) ** t),
                              np.float32(1.0))
            readings = readings * factor
        if scenario.noise_sigma > 0.0:
            rng_noise = np.random.default_rng([scenario.seed, scenario.cycle_id, t, 7])
            noise = 1.0 + scenario.noise_sigma * rng_noise.standard_normal(readings.shape)
            readings = readings * noise
        frames.append(LprmFrame(
            timestamp=scenario.cycle_id * 1_000_000 + t,
            cycle_id=scenario.cycle_id,
            state=state,
            readings=np.asarray(readings, dtype=np.float32),
            rod_inputs=rod,
        ))
    return frames


def generate_plant(scenarios, geom: CoreGeometry) -> list[LprmFrame]:
    """Concatenate the frames of several cycles, in the given order."""
    frames = []
    for scenario in scenarios:
        frames.extend(generate_cycle(scenario, geom))
    return frames
