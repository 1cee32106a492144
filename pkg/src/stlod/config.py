"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from types import SimpleNamespace

from .coefficient import _ratio, check_compatible
from .errors import InvalidArgumentError
from .grid import build_temporal_grid


class ConfigError(InvalidArgumentError):
    pass


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_bool(v: str):
    return None if v.strip().lower() == "auto" else _bool(v)


def _opt_int(v: str):
    return None if v.strip().lower() == "auto" else int(v)


def _opt_float(v: str):
    return None if v.strip().lower() == "auto" else float(v)


def _int_list(v: str) -> tuple:
    return tuple(int(x) for x in v.replace(",", " ").split())


def _float_list(v: str) -> tuple:
    return tuple(float(x) for x in v.replace(",", " ").split())


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class ExperimentConfig:
    # meshes: H = 2^-coarse_exponent, h = 2^-fine_exponent
    coarse_exponent: int = 3
    fine_exponent: int = 6
    # time: coarse step 2^-coarse_time_exponent, fine step 2^-fine_time_exponent (auto = spatial exponent)
    t_final: float = 1.25
    coarse_time_exponent: int | None = None
    fine_time_exponent: int | None = None
    # coefficient
    seed: int = 1
    eps_x: float = 0.0625
    eps_t: float = 0.0625
    coef_low: float = 0.01
    coef_high: float = 0.1
    periodic: bool = True
    period: float | None = None  # auto = coarse time step
    # localization
    k: int | None = None  # auto = coarse_exponent
    ell: int = 4
    reuse: bool | None = None
    # right-hand sides
    rhs: str = "one"
    quadrature: str = "nodal"
    rhs_count: int = 50
    rhs_seed: int = 7
    histogram_bins: int = 10
    # decay study
    decay_node: tuple = (0.5, 0.5)
    decay_time_index: int = 1
    k_values: tuple = (1, 2, 3, 4, 5)
    ell_values: tuple = (1, 2, 3, 4, 5, 6, 7)
    # convergence study
    coarse_exponents: tuple = ()  # empty: convergence is not configured

    _parsers = {
        "coarse_exponent": int, "fine_exponent": int, "t_final": float,
        "coarse_time_exponent": _opt_int, "fine_time_exponent": _opt_int,
        "seed": int, "eps_x": float, "eps_t": float, "coef_low": float, "coef_high": float,
        "periodic": _bool, "period": _opt_float, "k": _opt_int, "ell": int, "reuse": _opt_bool,
        "rhs": str, "quadrature": str, "rhs_count": int, "rhs_seed": int, "histogram_bins": int,
        "decay_node": _float_list, "decay_time_index": int, "k_values": _int_list,
        "ell_values": _int_list, "coarse_exponents": _int_list,
    }

    # ---- derived quantities

    @property
    def cte(self) -> int:
        return self.coarse_exponent if self.coarse_time_exponent is None else self.coarse_time_exponent

    @property
    def fte(self) -> int:
        return self.fine_exponent if self.fine_time_exponent is None else self.fine_time_exponent

    @property
    def coarse_step(self) -> float:
        return 2.0 ** -self.cte

    @property
    def fine_step(self) -> float:
        return 2.0 ** -self.fte

    @property
    def coarse_steps(self) -> int:
        return _ratio(self.t_final, self.coarse_step, "t_final/coarse time step")

    @property
    def fine_per_coarse(self) -> int:
        return _ratio(self.coarse_step, self.fine_step, "coarse/fine time step")

    @property
    def coefficient_period(self) -> float:
        return self.coarse_step if self.period is None else self.period

    @property
    def k_value(self) -> int:
        return self.coarse_exponent if self.k is None else self.k

    def at_level(self, coarse_exponent: int) -> "ExperimentConfig":
        """Same experiment with ``H = coarse step = 2^-coarse_exponent``."""
        return replace(self, coarse_exponent=coarse_exponent, coarse_time_exponent=coarse_exponent)

    def validate(self) -> "ExperimentConfig":
        try:
            if self.coarse_exponent < 1 or self.fine_exponent <= self.coarse_exponent:
                raise ConfigError("need 1 <= coarse_exponent < fine_exponent")
            if self.fte < self.cte:
                raise ConfigError("fine time step must not exceed the coarse time step")
            if not 0 < self.coef_low < self.coef_high:
                raise ConfigError("need 0 < coef_low < coef_high")
            if self.ell < 1 or self.k_value < 1:
                raise ConfigError("k and ell must be >= 1")
            if self.rhs not in ("one", "random"):
                raise ConfigError(f"rhs must be 'one' or 'random', got {self.rhs!r}")
            if self.quadrature not in ("nodal", "edge"):
                raise ConfigError(f"quadrature must be 'nodal' or 'edge', got {self.quadrature!r}")
            if self.rhs_count < 1 or self.histogram_bins < 1:
                raise ConfigError("rhs_count and histogram_bins must be >= 1")
            if len(self.decay_node) != 2:
                raise ConfigError("decay_node needs two coordinates")
            tgrid = build_temporal_grid(self.t_final, self.coarse_steps, self.fine_per_coarse)
            _ratio(1.0, self.eps_x, "1/eps_x")
            if self.periodic:
                p = self.coefficient_period
                if p >= self.eps_t:
                    _ratio(p, self.eps_t, "period/eps_t")
                else:
                    _ratio(self.eps_t, p, "eps_t/period")
            levels = {self.coarse_exponent} | set(self.coarse_exponents)
            for n in levels:
                cfg = self.at_level(n) if n != self.coarse_exponent else self
                if n < 1 or n >= self.fine_exponent:
                    raise ConfigError(f"coarse exponent {n} must lie in 1..{self.fine_exponent - 1}")
                _ratio(cfg.t_final, cfg.coarse_step, "t_final/coarse time step")
            if self.periodic:
                nt = 1 if self.coefficient_period < self.eps_t else 2
            else:
                nt = int(-(-self.t_final // self.eps_t))
            fake = SimpleNamespace(
                eps_x=self.eps_x, eps_t=self.eps_t, time_periodic=self.periodic,
                period=self.coefficient_period, n_slabs=nt,
            )
            check_compatible(fake, SimpleNamespace(spacing=2.0 ** -self.fine_exponent), tgrid)
        except ConfigError:
            raise
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # ---- text form

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in cls._parsers:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                values[key] = cls._parsers[key](value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        return cls(**values).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))
