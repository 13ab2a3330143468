import csv
import dataclasses
import io
import json
import math
import os
from functools import lru_cache
from typing import Sequence

import aiofiles
import aiofiles.os
import dataclasses_json
import numpy as np
from dataclasses_json import DataClassJsonMixin
from scipy import stats

from .consts import MIN_SWEEP_POINTS
from .errors import FitError


def _encode_array(value: np.ndarray | None) -> list | None:
    if value is None:
        return None
    array = np.asarray(value)
    if np.iscomplexobj(array):
        return {"re": array.real.tolist(), "im": array.imag.tolist()}
    return array.tolist()


def _decode_array(value: list | dict | None) -> np.ndarray | None:
    if value is None:
        return None
    if isinstance(value, dict):
        return np.asarray(value["re"], dtype=float) + 1j * np.asarray(value["im"], dtype=float)
    return np.asarray(value, dtype=float)


def array_field(**kwargs) -> dataclasses.Field:
    return dataclasses.field(
        metadata=dataclasses_json.config(encoder=_encode_array, decoder=_decode_array),
        **kwargs
    )


def smooth_step(s: np.ndarray | float) -> np.ndarray:
    """C-infinity step: 0 for s <= 0, 1 for s >= 1."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        f0 = np.where(s > 0, np.exp(-1 / np.where(s > 0, s, 1.0)), 0.0)
        f1 = np.where(s < 1, np.exp(-1 / np.where(s < 1, 1 - s, 1.0)), 0.0)
    return f0 / (f0 + f1)


def plateau_bump(u: np.ndarray | float) -> np.ndarray:
    """Smooth bump equal to 1 on |u| <= 1 and 0 on |u| >= 2."""
    return smooth_step(2.0 - np.abs(np.asarray(u, dtype=float)))


def band_cutoff(u: np.ndarray | float) -> np.ndarray:
    """Radial multiplier: 1 for u <= 1, exp(1 - 1/(1 - v^2)) on the band v = u - 1 in (0, 1), 0 for u >= 2."""
    u = np.asarray(u, dtype=float)
    v = np.clip(u - 1.0, 0.0, 1.0)
    inside = v < 1.0
    with np.errstate(divide="ignore", over="ignore"):
        band = np.where(inside, np.exp(1.0 - 1.0 / np.where(inside, 1.0 - v ** 2, 1.0)), 0.0)
    return np.where(u <= 1.0, 1.0, band)


def periodic_delta(a: np.ndarray | float, b: np.ndarray | float, period: float | None) -> np.ndarray:
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if period is None:
        return diff
    return (diff + period / 2) % period - period / 2


def dyadic_floor(count: int) -> int:
    if count < 1:
        raise ValueError(f"Dyadic rounding needs a positive count, got {count}")
    return 1 << (int(count).bit_length() - 1)


def relative_error(value: np.ndarray, reference: np.ndarray) -> float:
    ref = float(np.linalg.norm(reference))
    err = float(np.linalg.norm(np.asarray(value) - np.asarray(reference)))
    return err / ref if ref > 0 else err


@lru_cache
def t_quantile(dof: int) -> float:
    return float(stats.t.ppf(0.975, dof)) if dof > 0 else math.inf


@dataclasses.dataclass(frozen=True)
class LogLogFit(DataClassJsonMixin):
    slope: float
    intercept: float
    stderr: float
    ci95: tuple[float, float]
    points: int

    @property
    def prefactor(self) -> float:
        return math.exp(self.intercept)


def loglog_fit(x: Sequence[float], y: Sequence[float], min_points: int = MIN_SWEEP_POINTS) -> LogLogFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    if int(mask.sum()) < min_points:
        raise FitError(f"Need at least {min_points} positive points for a log-log fit, got {int(mask.sum())}")
    result = stats.linregress(np.log(x[mask]), np.log(y[mask]))
    n = int(mask.sum())
    stderr = float(result.stderr) if n > 2 else 0.0
    half = t_quantile(n - 2) * stderr if n > 2 else 0.0
    return LogLogFit(
        slope=float(result.slope),
        intercept=float(result.intercept),
        stderr=stderr,
        ci95=(float(result.slope) - half, float(result.slope) + half),
        points=n,
    )


async def ensure_dir(path: str):
    if not await aiofiles.os.path.exists(path):
        await aiofiles.os.makedirs(path)


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


async def dump_json(path: str, data: dict | list):
    await ensure_dir(os.path.dirname(path) or ".")
    async with aiofiles.open(path, "w", encoding="utf-8") as f:
        await f.write(json.dumps(data, ensure_ascii=False, indent=4, default=_json_default))


async def dump_csv(path: str, rows: Sequence[dict], fieldnames: Sequence[str] | None = None):
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    await ensure_dir(os.path.dirname(path) or ".")
    async with aiofiles.open(path, "w", encoding="utf-8") as f:
        await f.write(buffer.getvalue())


async def dump_binary(path: str, array: np.ndarray, header: DataClassJsonMixin):
    """Little-endian array payload next to a JSON header with the same stem."""
    dtype = "<c16" if np.iscomplexobj(array) else "<f8"
    await ensure_dir(os.path.dirname(path) or ".")
    async with aiofiles.open(path, "wb") as f:
        await f.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
    await dump_json(os.path.splitext(path)[0] + ".json", header.to_dict())
