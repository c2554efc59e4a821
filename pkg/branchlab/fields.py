from abc import abstractmethod, ABC
from typing import Dict, List, Sequence, Union

import numpy as np

from .errors import ValidationError


ArrayLike = Union[float, np.ndarray]


class Field(ABC):
    """
    Real function of position, evaluated elementwise on arrays, with declared bounds
    """

    @abstractmethod
    def __call__(self, x: ArrayLike) -> np.ndarray:
        pass

    @property
    @abstractmethod
    def sup(self) -> float:
        pass

    @property
    @abstractmethod
    def inf(self) -> float:
        pass

    @abstractmethod
    def to_json(self) -> Dict:
        pass

    def plus(self, constant: float) -> "Field":
        return Sum([self, Constant(constant)])

    def scaled(self, factor: float) -> "Field":
        return Scaled(self, factor)

    @classmethod
    def create_from(cls, json: Union[Dict, float, int], key: str = "field") -> "Field":
        """
        Create the field from a TOML table {kind = ..., ...}; a bare number is a constant field
        """
        if isinstance(json, (int, float)):
            return Constant(float(json))
        if not isinstance(json, dict) or "kind" not in json:
            raise ValidationError("missing key", f"{key}.kind")
        kind = json["kind"]
        try:
            if kind == "constant":
                return Constant(float(json["value"]))
            elif kind == "indicator":
                return Indicator(float(json["left"]), float(json["right"]), float(json.get("value", 1.0)))
            elif kind == "ramp":
                return Ramp(
                    float(json["left"]),
                    float(json["right"]),
                    float(json.get("low", 0.0)),
                    float(json.get("high", 1.0)),
                )
            elif kind == "inv_sqrt":
                return InvSqrt(float(json.get("threshold", 1.0)), float(json.get("scale", 1.0)))
            elif kind == "step":
                return Step(json["breaks"], json["values"])
            elif kind == "occupation":
                return Occupation(int(json.get("n", 8)), float(json.get("scale", 1.0)))
        except KeyError as e:
            raise ValidationError("missing key", f"{key}.{e.args[0]}")
        raise ValidationError(f"unknown kind {kind!r}", f"{key}.kind")


class Constant(Field):
    def __init__(self, value: float):
        self.value = value

    def __call__(self, x: ArrayLike) -> np.ndarray:
        return np.full(np.shape(x), self.value, dtype=np.float64)

    @property
    def sup(self) -> float:
        return self.value

    @property
    def inf(self) -> float:
        return self.value

    def to_json(self) -> Dict:
        return {"kind": "constant", "value": self.value}


class Indicator(Field):
    """
    value on the open interval (left, right), 0 elsewhere
    """

    def __init__(self, left: float, right: float, value: float = 1.0):
        if right <= left:
            raise ValidationError(f"empty interval ({left}, {right})", "indicator")
        self.left = left
        self.right = right
        self.value = value

    def __call__(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.where((x > self.left) & (x < self.right), self.value, 0.0)

    @property
    def sup(self) -> float:
        return max(self.value, 0.0)

    @property
    def inf(self) -> float:
        return min(self.value, 0.0)

    def to_json(self) -> Dict:
        return {"kind": "indicator", "left": self.left, "right": self.right, "value": self.value}


class Ramp(Field):
    """
    Linear from low at left to high at right, constant outside
    """

    def __init__(self, left: float, right: float, low: float = 0.0, high: float = 1.0):
        if right <= left:
            raise ValidationError(f"empty interval ({left}, {right})", "ramp")
        self.left = left
        self.right = right
        self.low = low
        self.high = high

    def __call__(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.interp(x, [self.left, self.right], [self.low, self.high])

    @property
    def sup(self) -> float:
        return max(self.low, self.high)

    @property
    def inf(self) -> float:
        return min(self.low, self.high)

    def to_json(self) -> Dict:
        return {"kind": "ramp", "left": self.left, "right": self.right, "low": self.low, "high": self.high}


class InvSqrt(Field):
    """
    scale * x^{-1/2} for x >= threshold, 0 below
    """

    def __init__(self, threshold: float = 1.0, scale: float = 1.0):
        if threshold <= 0:
            raise ValidationError(f"must be > 0, got {threshold}", "inv_sqrt.threshold")
        self.threshold = threshold
        self.scale = scale

    def __call__(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        safe = np.maximum(x, self.threshold)
        return np.where(x >= self.threshold, self.scale / np.sqrt(safe), 0.0)

    @property
    def sup(self) -> float:
        return max(self.scale / np.sqrt(self.threshold), 0.0)

    @property
    def inf(self) -> float:
        return min(self.scale / np.sqrt(self.threshold), 0.0)

    def to_json(self) -> Dict:
        return {"kind": "inv_sqrt", "threshold": self.threshold, "scale": self.scale}


class Step(Field):
    """
    Piecewise constant: values[i] on [breaks[i-1], breaks[i]) with len(values) = len(breaks) + 1
    """

    def __init__(self, breaks: Sequence[float], values: Sequence[float]):
        self.breaks = np.asarray(breaks, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.size != self.breaks.size + 1:
            raise ValidationError("need one more value than breaks", "step.values")
        if np.any(np.diff(self.breaks) <= 0):
            raise ValidationError("breaks must be ascending", "step.breaks")

    def __call__(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.values[np.searchsorted(self.breaks, x, side="right")]

    @property
    def sup(self) -> float:
        return float(self.values.max())

    @property
    def inf(self) -> float:
        return float(self.values.min())

    def to_json(self) -> Dict:
        return {"kind": "step", "breaks": self.breaks.tolist(), "values": self.values.tolist()}


class Occupation(Field):
    """
    scale * (1_A - 1_B) for the alternating interval construction on [0, S_n), 0 for x < 0 and beyond S_n
    """

    def __init__(self, n: int = 8, scale: float = 1.0):
        from .repro import IntervalConstruction

        self.n = n
        self.scale = scale
        self.construction = IntervalConstruction(n)
        self.breaks = np.array([float(b) for b in self.construction.breakpoints()])

    def __call__(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        k = np.searchsorted(self.breaks, x, side="right")
        # even positions of the breakpoint list open an A interval, odd ones a B interval
        sign = np.where(k % 2 == 1, 1.0, -1.0)
        inside = (x >= 0) & (k < self.breaks.size)
        return np.where(inside, self.scale * sign, 0.0)

    @property
    def sup(self) -> float:
        return abs(self.scale)

    @property
    def inf(self) -> float:
        return -abs(self.scale)

    def to_json(self) -> Dict:
        return {"kind": "occupation", "n": self.n, "scale": self.scale}


class Sum(Field):
    def __init__(self, fields: List[Field]):
        self.fields = fields

    def __call__(self, x: ArrayLike) -> np.ndarray:
        return sum(f(x) for f in self.fields)

    @property
    def sup(self) -> float:
        return sum(f.sup for f in self.fields)

    @property
    def inf(self) -> float:
        return sum(f.inf for f in self.fields)

    def to_json(self) -> Dict:
        return {"kind": "sum", "fields": [f.to_json() for f in self.fields]}


class Scaled(Field):
    def __init__(self, field: Field, factor: float):
        self.field = field
        self.factor = factor

    def __call__(self, x: ArrayLike) -> np.ndarray:
        return self.factor * self.field(x)

    @property
    def sup(self) -> float:
        return max(self.factor * self.field.sup, self.factor * self.field.inf)

    @property
    def inf(self) -> float:
        return min(self.factor * self.field.sup, self.factor * self.field.inf)

    def to_json(self) -> Dict:
        return {"kind": "scaled", "factor": self.factor, "field": self.field.to_json()}
