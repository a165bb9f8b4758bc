"""Run configuration: shipped defaults plus nested overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .bcd import BcdConfig, CommTemplate
from .channel import RadioConfig
from .dynamics import VehicleGeometry
from .errors import InvalidConfigError
from .feel import FeelConfig
from .mpc import MpcConfig
from .rsma_sca import SCHEMES
from .scenario import SCENARIOS, Scenario, apply_weather, make_scenario


def load_defaults() -> dict:
    with resources.files("rsma_platoon").joinpath("data/defaults.json").open() as f:
        return json.load(f)


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, overrides: dict | None = None) -> "RunConfig":
        cfg = cls(merge(load_defaults(), overrides or {}))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        with open(path) as f:
            data = json.load(f)
        return cls.from_dict(merge(data, overrides or {}))

    def validate(self):
        r = self.raw
        if r["scheme"] not in SCHEMES:
            raise InvalidConfigError(f"unknown scheme {r['scheme']!r}; expected one of {SCHEMES}")
        if r["scenario"] not in SCENARIOS:
            raise InvalidConfigError(f"unknown scenario {r['scenario']!r}; expected one of {SCENARIOS}")
        if not isinstance(r["seed"], int):
            raise InvalidConfigError("seed must be an integer")

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)

    def __getitem__(self, key):
        return self.raw[key]

    # -- builders -----------------------------------------------------------
    def geometry(self) -> VehicleGeometry:
        return VehicleGeometry(**self.raw["vehicle"])

    def radio(self) -> RadioConfig:
        r = self.raw["radio"]
        return RadioConfig.from_dbm(r["power_dbm"], M=int(r["M"]), K=int(self.raw["K"]), B=float(r["B"]),
                                    noise_density=float(r["noise_density"]), mu=float(r["mu"]))

    def scenario(self) -> Scenario:
        r = self.raw
        road, lim = r["road"], r["limits"]
        sc = make_scenario(r["scenario"], int(r["K"]), T=int(r["T"]), dt=float(r["dt"]),
                           speed=float(road["speed"]), decel=float(road["decel"]),
                           spacing=float(road["spacing"]), lane_width=float(road["lane_width"]),
                           geometry=self.geometry())
        sc = replace(sc, u_min=np.array([lim["accel"][0], lim["steer"][0]]),
                     u_max=np.array([lim["accel"][1], lim["steer"][1]]),
                     du_max=np.array([lim["accel_rate"], lim["steer_rate"] * float(r["dt"])]),
                     accel_limit=None)
        if r.get("kappa") is not None:
            sc = apply_weather(sc, float(r["kappa"]))
        return sc

    def comm(self) -> CommTemplate:
        d = self.raw["downlink"]
        return CommTemplate(self.radio(), float(d["B0"]), float(d["R_th"]), float(d["Q_t"]), float(d["Q_h"]),
                            self.raw["scheme"], int(d["max_iters"]), float(d["tol"]))

    def mpc(self) -> MpcConfig:
        m = self.raw["mpc"]
        return MpcConfig(horizon=int(m["horizon"]), Q_z=tuple(m["Q_z"]), Q_u=tuple(m["Q_u"]),
                         Q_du=tuple(m["Q_du"]), Q_h=float(self.raw["downlink"]["Q_h"]),
                         max_inner_iters=int(m["max_inner_iters"]), tol=float(m["tol"]),
                         disc_margin=float(m["disc_margin"]))

    def bcd(self) -> BcdConfig:
        b = self.raw["bcd"]
        return BcdConfig(int(b["max_outer"]), b["stop_tol"])

    def feel(self) -> FeelConfig:
        f = self.raw["feel"]
        return FeelConfig(float(f["step_size"]), int(f["rounds"]), int(self.raw["K"]), f["loss"],
                          bool(f["weighted"]))
