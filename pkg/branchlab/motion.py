import math

from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from .core import OffspringLaw
from .errors import ValidationError
from .fields import Constant, Field


class MotionKind(Enum):
    diffusion_1d = "diffusion_1d"
    diffusion_radial = "diffusion_radial"
    ctmc = "ctmc"


class Boundary(Enum):
    killing = "killing"
    reflecting = "reflecting"
    open = "open"


class MotionSpec:
    """
    Single-particle motion: dX = b(X) dt + sqrt(a(X)) dW on (left, right), or a finite CTMC
    The radial kind is the radius of a d-dimensional diffusion; its drift gets the extra a (d - 1) / (2x).
    """

    def __init__(
        self,
        kind: MotionKind = MotionKind.diffusion_1d,
        drift: Optional[Field] = None,
        diffusion: Optional[Field] = None,
        left: float = -math.inf,
        right: float = math.inf,
        left_boundary: Boundary = Boundary.killing,
        right_boundary: Boundary = Boundary.killing,
        dimension: int = 1,
        rates: Optional[np.ndarray] = None,
    ):
        self.kind = kind
        self.drift = drift or Constant(0.0)
        self.diffusion = diffusion or Constant(1.0)
        self.left = float(left)
        self.right = float(right)
        self.left_boundary = Boundary.open if math.isinf(self.left) else left_boundary
        self.right_boundary = Boundary.open if math.isinf(self.right) else right_boundary
        self.dimension = dimension
        self.rates = None if rates is None else np.asarray(rates, dtype=np.float64)

        if kind is MotionKind.ctmc:
            self._validate_rates()
            return
        if not self.left < self.right:
            raise ValidationError(f"empty domain ({self.left}, {self.right})", "domain")
        if self.diffusion.inf <= 0:
            raise ValidationError("diffusion must be bounded below by a positive constant", "diffusion")
        if not (math.isfinite(self.diffusion.sup) and math.isfinite(self.drift.sup)):
            raise ValidationError("drift and diffusion need finite bounds", "drift")
        if kind is MotionKind.diffusion_radial:
            if self.left < 0 or math.isinf(self.right):
                raise ValidationError("radial motion lives on (x_min, radius)", "domain")
            self.left_boundary = Boundary.reflecting

    def _validate_rates(self):
        q = self.rates
        if q is None or q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValidationError("rate matrix must be square", "rates")
        off = q - np.diag(np.diag(q))
        if np.any(off < 0):
            raise ValidationError("off-diagonal rates must be nonnegative", "rates")
        if np.any(np.abs(q.sum(axis=1)) > 1e-9):
            raise ValidationError("rows of the rate matrix must sum to 0", "rates")
        self.left, self.right = 0.0, float(q.shape[0] - 1)

    def __str__(self):
        if self.kind is MotionKind.ctmc:
            return f"MotionSpec(ctmc, {self.rates.shape[0]} states)"
        return (
            f"MotionSpec({self.kind.value}, ({self.left}, {self.right}), "
            f"{self.left_boundary.value}/{self.right_boundary.value})"
        )

    @classmethod
    def brownian(
        cls,
        left: float = -math.inf,
        right: float = math.inf,
        drift: float = 0.0,
        a: float = 1.0,
        left_boundary: Boundary = Boundary.killing,
        right_boundary: Boundary = Boundary.killing,
    ) -> "MotionSpec":
        return cls(
            MotionKind.diffusion_1d,
            Constant(drift),
            Constant(a),
            left,
            right,
            left_boundary,
            right_boundary,
        )

    @classmethod
    def radial(cls, dimension: int, radius: float, x_min: float, a: float = 1.0) -> "MotionSpec":
        return cls(
            MotionKind.diffusion_radial,
            Constant(0.0),
            Constant(a),
            x_min,
            radius,
            Boundary.reflecting,
            Boundary.killing,
            dimension,
        )

    @classmethod
    def ctmc(cls, rates) -> "MotionSpec":
        return cls(MotionKind.ctmc, rates=rates)

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.left) and math.isfinite(self.right)

    def effective_drift(self, x: np.ndarray) -> np.ndarray:
        b = self.drift(x)
        if self.kind is MotionKind.diffusion_radial:
            b = b + 0.5 * self.diffusion(x) * (self.dimension - 1) / x
        return b

    def contains(self, x: float) -> bool:
        return self.left < x < self.right or (
            self.kind is MotionKind.ctmc and self.left <= x <= self.right
        )

    def with_domain(
        self,
        left: float,
        right: float,
        left_boundary: Optional[Boundary] = None,
        right_boundary: Optional[Boundary] = None,
    ) -> "MotionSpec":
        return MotionSpec(
            self.kind,
            self.drift,
            self.diffusion,
            left,
            right,
            left_boundary or self.left_boundary,
            right_boundary or self.right_boundary,
            self.dimension,
            self.rates,
        )

    def box(self, center: float, width: float) -> "MotionSpec":
        """
        Finite surrogate of an unbounded domain: infinite sides are cut at center -/+ width/2 and reflect
        """
        left, right = self.left, self.right
        left_boundary, right_boundary = self.left_boundary, self.right_boundary
        if math.isinf(left):
            left, left_boundary = center - width / 2, Boundary.reflecting
        if math.isinf(right):
            right, right_boundary = center + width / 2, Boundary.reflecting
        return self.with_domain(left, right, left_boundary, right_boundary)

    def to_json(self) -> Dict:
        payload = {"kind": self.kind.value}
        if self.kind is MotionKind.ctmc:
            payload["rates"] = self.rates.tolist()
            return payload
        payload.update(
            {
                "drift": self.drift.to_json(),
                "diffusion": self.diffusion.to_json(),
                "left": self.left if math.isfinite(self.left) else None,
                "right": self.right if math.isfinite(self.right) else None,
                "left_boundary": self.left_boundary.value,
                "right_boundary": self.right_boundary.value,
                "dimension": self.dimension,
            }
        )
        return payload

    @classmethod
    def create_from(cls, json: Dict) -> "MotionSpec":
        """
        Create the motion from a TOML table; missing left/right mean an unbounded side
        """
        try:
            kind = MotionKind(json.get("kind", "diffusion_1d"))
        except ValueError:
            raise ValidationError(f"unknown kind {json.get('kind')!r}", "motion.kind")
        if kind is MotionKind.ctmc:
            if "rates" not in json:
                raise ValidationError("missing key", "motion.rates")
            return cls.ctmc(json["rates"])
        try:
            left_boundary = Boundary(json.get("left_boundary", "killing"))
            right_boundary = Boundary(json.get("right_boundary", "killing"))
        except ValueError as e:
            raise ValidationError(str(e), "motion.boundary")
        left = json.get("left")
        right = json.get("right")
        return cls(
            kind,
            Field.create_from(json.get("drift", 0.0), "motion.drift"),
            Field.create_from(json.get("diffusion", 1.0), "motion.diffusion"),
            -math.inf if left is None else float(left),
            math.inf if right is None else float(right),
            left_boundary,
            right_boundary,
            int(json.get("dimension", 1)),
        )


class BranchChannel:
    """
    Branching clock with rate r(x); when it rings the particle is replaced by n children with probability p_n
    """

    def __init__(self, rate: Field, law: OffspringLaw):
        if not law.is_local:
            raise ValidationError("continuous-time branching is purely local", "law.displacement")
        if rate.inf < 0:
            raise ValidationError("branch rate must be nonnegative", "rate")
        if not math.isfinite(rate.sup):
            raise ValidationError("branch rate must be bounded", "rate")
        self.rate = rate
        self.law = law

    def to_json(self) -> Dict:
        return {"rate": self.rate.to_json(), **self.law.to_json()}


BINARY = OffspringLaw([(2, 1.0)])
DEATH = OffspringLaw([(0, 1.0)])


class BranchFieldSpec:
    """
    Local branching mechanism as a list of independent channels
    The total rate is the sum of the channel rates; the offspring law at x is their rate-weighted mixture.
    """

    def __init__(self, channels: List[BranchChannel]):
        self.channels = channels

    @classmethod
    def binary(cls, rate: float = 1.0) -> "BranchFieldSpec":
        return cls([BranchChannel(Constant(rate), BINARY)])

    @classmethod
    def none(cls) -> "BranchFieldSpec":
        return cls([])

    def with_channel(self, rate: Field, law: OffspringLaw) -> "BranchFieldSpec":
        return BranchFieldSpec(self.channels + [BranchChannel(rate, law)])

    @property
    def sup_rate(self) -> float:
        return float(sum(c.rate.sup for c in self.channels))

    def rate(self, x: np.ndarray) -> np.ndarray:
        total = np.zeros(np.shape(x))
        for c in self.channels:
            total = total + c.rate(x)
        return total

    def potential(self, x: np.ndarray) -> np.ndarray:
        """
        r(x) (mean offspring(x) - 1), the Feynman-Kac potential of the expectation semigroup
        """
        total = np.zeros(np.shape(x))
        for c in self.channels:
            total = total + c.rate(x) * (c.law.mean - 1.0)
        return total

    def nonlinearity(self, u: np.ndarray, x: np.ndarray) -> np.ndarray:
        """
        f(u, x) = sum over channels of r(x) sum p_n [(1 - u) - (1 - u)^n]
        """
        v = 1.0 - np.asarray(u, dtype=np.float64)
        total = np.zeros(np.broadcast(v, np.asarray(x)).shape)
        for c in self.channels:
            g = np.zeros_like(total)
            for n, p in c.law.items():
                g = g + p * (v - v**n)
            total = total + c.rate(x) * g
        return total

    @property
    def lipschitz(self) -> float:
        """
        Bound on |df/du| over [0, 1]
        """
        return float(sum(c.rate.sup * max(1.0, abs(c.law.mean - 1.0)) for c in self.channels))

    def offspring_at(self, x: float) -> OffspringLaw:
        rates = [float(c.rate(np.array(x))) for c in self.channels]
        total = sum(rates)
        if total == 0:
            return OffspringLaw([(1, 1.0)])
        mixture = []
        for r, c in zip(rates, self.channels):
            mixture.extend((n, r / total * p) for n, p in c.law.items())
        return OffspringLaw(mixture)

    def to_json(self) -> Dict:
        return {"channels": [c.to_json() for c in self.channels]}

    @classmethod
    def create_from(cls, json: Dict) -> "BranchFieldSpec":
        """
        Create the branching from a TOML payload: [[channel]] rate = <field>, probs = [[n, p], ...]
        """
        channels = []
        for i, item in enumerate(json.get("channel", [])):
            if "rate" not in item:
                raise ValidationError("missing key", f"branch.channel[{i}].rate")
            rate = Field.create_from(item["rate"], f"branch.channel[{i}].rate")
            channels.append(BranchChannel(rate, OffspringLaw.create_from(item)))
        return cls(channels)
