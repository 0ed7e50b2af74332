"""Platoon roster shared by the data generator, the system assembler and the simulator."""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import CAR, IDM_BY_CLASS, IdmParams

ROLES = ("cav", "hdv")
CLASSES = ("car", "truck")


@dataclass(frozen=True)
class VehicleSpec:
    role: str = "hdv"
    vclass: str = "car"
    controlled: bool = True  # only meaningful for CAVs

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.vclass not in CLASSES:
            raise ValueError(f"vclass must be one of {CLASSES}, got {self.vclass!r}")
        if self.role == "cav" and self.vclass != "car":
            raise ValueError("CAVs are passenger cars")

    @property
    def is_controlled_cav(self) -> bool:
        return self.role == "cav" and self.controlled

    @property
    def idm(self) -> IdmParams:
        # unengaged CAVs drive like human car drivers
        return CAR if self.role == "cav" else IDM_BY_CLASS[self.vclass]

    @property
    def length(self) -> float:
        return self.idm.vehicle_length


@dataclass(frozen=True)
class PlatoonConfig:
    """Followers of an external head vehicle, front to back.

    Index 0 of the simulated world is the head vehicle; ``vehicles[k]`` is world index ``k + 1``.
    """

    vehicles: tuple[VehicleSpec, ...]
    leader_length: float = CAR.vehicle_length
    tags: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.vehicles) == 0:
            raise ValueError("platoon needs at least one follower")
        object.__setattr__(self, "vehicles", tuple(self.vehicles))

    def __len__(self) -> int:
        return len(self.vehicles)

    @classmethod
    def from_codes(cls, codes: str | list[str], **kwargs) -> "PlatoonConfig":
        """Build from short codes: ``C`` controlled CAV, ``c`` unengaged CAV, ``H`` car, ``T`` truck."""
        table = {
            "C": VehicleSpec("cav", "car", True),
            "c": VehicleSpec("cav", "car", False),
            "H": VehicleSpec("hdv", "car"),
            "T": VehicleSpec("hdv", "truck"),
        }
        try:
            vehicles = tuple(table[ch] for ch in codes)
        except KeyError as exc:
            raise ValueError(f"unknown vehicle code {exc.args[0]!r}; use C, c, H or T") from None
        return cls(vehicles, **kwargs)

    def codes(self) -> str:
        out = []
        for v in self.vehicles:
            if v.role == "cav":
                out.append("C" if v.controlled else "c")
            else:
                out.append("T" if v.vclass == "truck" else "H")
        return "".join(out)

    @property
    def lengths(self) -> list[float]:
        """Lengths indexed by world index (head vehicle first)."""
        return [self.leader_length] + [v.length for v in self.vehicles]

    def controlled_indices(self) -> list[int]:
        """World indices of CAVs whose controller is engaged."""
        return [k + 1 for k, v in enumerate(self.vehicles) if v.is_controlled_cav]
